use crate::head_model::Vec3;
use crate::render::Camera;

/// Screen-space triangle with per-vertex inverse depth.
#[derive(Clone, Debug)]
struct ScreenTri {
    face: usize,
    p: [[f64; 2]; 3],
    inv_z: [f64; 3],
    area: f64,
}

/// A triangle mesh rasterized into a camera: per-pixel nearest face with
/// perspective-correct barycentrics, plus exact depth queries at arbitrary
/// sub-pixel points.
#[derive(Clone, Debug)]
pub struct MeshRaster {
    pub width: usize,
    pub height: usize,
    /// Nearest face at each pixel centre (`u32::MAX` when uncovered).
    pub face: Vec<u32>,
    /// Perspective-correct barycentrics of the nearest face.
    pub bary: Vec<[f64; 3]>,
    /// Camera-space depth at each pixel centre (`+∞` when uncovered).
    pub depth: Vec<f64>,
    tris: Vec<ScreenTri>,
    offsets: Vec<usize>,
    bins: Vec<u32>,
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

impl ScreenTri {
    /// Screen-space barycentrics when `p` lies inside (inclusive).
    fn contains(&self, p: [f64; 2]) -> Option<[f64; 3]> {
        let l = [
            edge(self.p[1], self.p[2], p) / self.area,
            edge(self.p[2], self.p[0], p) / self.area,
            edge(self.p[0], self.p[1], p) / self.area,
        ];
        l.iter().all(|&x| x >= -1e-12).then_some(l)
    }

    fn depth(&self, l: &[f64; 3]) -> f64 {
        1.0 / (l[0] * self.inv_z[0] + l[1] * self.inv_z[1] + l[2] * self.inv_z[2])
    }
}

impl MeshRaster {
    /// Triangles with a vertex in front of the near plane are dropped.
    pub fn new(vertices: &[Vec3], faces: &[[u32; 3]], cam: &Camera) -> Self {
        let (w, h) = (cam.width, cam.height);
        let cam_pts: Vec<Vec3> = vertices.iter().map(|v| cam.to_camera(v)).collect();
        let mut tris = Vec::new();
        for (fi, f) in faces.iter().enumerate() {
            let c = f.map(|i| cam_pts[i as usize]);
            if c.iter().any(|p| p.z <= cam.near) {
                continue;
            }
            let p = c.map(|q| [cam.fx * q.x / q.z + cam.cx, cam.fy * q.y / q.z + cam.cy]);
            let area = edge(p[0], p[1], p[2]);
            if area.abs() < 1e-14 {
                continue;
            }
            tris.push(ScreenTri {
                face: fi,
                p,
                inv_z: c.map(|q| 1.0 / q.z),
                area,
            });
        }
        // bin each triangle to the pixels its bounding box touches
        let span = |t: &ScreenTri, axis: usize, n: usize| {
            let lo = t.p.iter().map(|q| q[axis]).fold(f64::INFINITY, f64::min);
            let hi = t.p.iter().map(|q| q[axis]).fold(f64::NEG_INFINITY, f64::max);
            let lo = lo.floor().max(0.0);
            let hi = hi.floor().min(n as f64 - 1.0);
            (lo <= hi).then(|| (lo as usize, hi as usize))
        };
        let spans: Vec<_> = tris
            .iter()
            .map(|t| Some((span(t, 0, w)?, span(t, 1, h)?)))
            .collect();
        let mut offsets = vec![0usize; w * h + 1];
        for ((c0, c1), (r0, r1)) in spans.iter().flatten() {
            for r in *r0..=*r1 {
                for c in *c0..=*c1 {
                    offsets[r * w + c + 1] += 1;
                }
            }
        }
        for p in 0..w * h {
            offsets[p + 1] += offsets[p];
        }
        let mut fill = offsets.clone();
        let mut bins = vec![0u32; offsets[w * h]];
        for (k, s) in spans.iter().enumerate() {
            if let Some(((c0, c1), (r0, r1))) = s {
                for r in *r0..=*r1 {
                    for c in *c0..=*c1 {
                        bins[fill[r * w + c]] = k as u32;
                        fill[r * w + c] += 1;
                    }
                }
            }
        }
        let mut out = MeshRaster {
            width: w,
            height: h,
            face: vec![u32::MAX; w * h],
            bary: vec![[0.0; 3]; w * h],
            depth: vec![f64::INFINITY; w * h],
            tris,
            offsets,
            bins,
        };
        for r in 0..h {
            for c in 0..w {
                let p = [c as f64 + 0.5, r as f64 + 0.5];
                if let Some((k, l, z)) = out.nearest(p) {
                    let t = &out.tris[k];
                    let persp = [l[0] * t.inv_z[0] * z, l[1] * t.inv_z[1] * z, l[2] * t.inv_z[2] * z];
                    let i = r * w + c;
                    out.face[i] = t.face as u32;
                    out.bary[i] = persp;
                    out.depth[i] = z;
                }
            }
        }
        out
    }

    fn nearest(&self, p: [f64; 2]) -> Option<(usize, [f64; 3], f64)> {
        if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] < self.width as f64 && p[1] < self.height as f64) {
            return None;
        }
        let pix = p[1] as usize * self.width + p[0] as usize;
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for &k in &self.bins[self.offsets[pix]..self.offsets[pix + 1]] {
            let t = &self.tris[k as usize];
            if let Some(l) = t.contains(p) {
                let z = t.depth(&l);
                if best.is_none_or(|b| z < b.2) {
                    best = Some((k as usize, l, z));
                }
            }
        }
        best
    }

    /// Depth of the nearest surface at pixel coordinates `(x, y)`.
    pub fn depth_at(&self, x: f64, y: f64) -> Option<f64> {
        self.nearest([x, y]).map(|b| b.2)
    }
}
