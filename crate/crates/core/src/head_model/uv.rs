use super::{blend_transforms, joint_transforms, FlameParams, HeadModel, Mat3, Vec3};
use crate::error::Result;
use crate::image::Image;

pub const INVALID_FACE: u32 = u32::MAX;

/// Texel → (face, barycentric) assignment over a square UV grid.
#[derive(Clone, Debug)]
pub struct UvChart {
    pub resolution: usize,
    pub face: Vec<u32>,
    pub bary: Vec<[f64; 3]>,
    pub mouth: Vec<bool>,
}

impl UvChart {
    /// Rasterizes the model's UV triangles at texel centres. Texels covered by
    /// several faces go to the lowest face index.
    pub fn build(model: &HeadModel, resolution: usize) -> Self {
        let n = resolution * resolution;
        let mut face = vec![INVALID_FACE; n];
        let mut bary = vec![[0.0; 3]; n];
        let res = resolution as f64;
        for (fi, f) in model.faces.iter().enumerate() {
            let uv: Vec<[f64; 2]> = f
                .iter()
                .map(|&i| {
                    let [u, v] = model.uvs[i as usize];
                    [u * res, v * res]
                })
                .collect();
            let min_x = uv.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
            let max_x = uv.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
            let min_y = uv.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
            let max_y = uv.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
            let c0 = ((min_x - 0.5).floor().max(0.0)) as usize;
            let c1 = ((max_x - 0.5).ceil().max(0.0) as usize).min(resolution - 1);
            let r0 = ((min_y - 0.5).floor().max(0.0)) as usize;
            let r1 = ((max_y - 0.5).ceil().max(0.0) as usize).min(resolution - 1);
            let area = edge(uv[0], uv[1], uv[2]);
            if area.abs() < 1e-14 {
                continue;
            }
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let t = row * resolution + col;
                    if face[t] != INVALID_FACE {
                        continue;
                    }
                    let p = [col as f64 + 0.5, row as f64 + 0.5];
                    let b = [
                        edge(uv[1], uv[2], p) / area,
                        edge(uv[2], uv[0], p) / area,
                        edge(uv[0], uv[1], p) / area,
                    ];
                    if b.iter().all(|&x| x >= -1e-12) {
                        let b = [b[0].max(0.0), b[1].max(0.0), b[2].max(0.0)];
                        let s = b[0] + b[1] + b[2];
                        face[t] = fi as u32;
                        bary[t] = [b[0] / s, b[1] / s, b[2] / s];
                    }
                }
            }
        }
        let mouth = face
            .iter()
            .map(|&f| f != INVALID_FACE && model.mouth_faces[f as usize])
            .collect();
        UvChart {
            resolution,
            face,
            bary,
            mouth,
        }
    }

    pub fn n_texels(&self) -> usize {
        self.face.len()
    }

    #[inline]
    pub fn is_valid(&self, texel: usize) -> bool {
        self.face[texel] != INVALID_FACE
    }

    pub fn texel(&self, texel: usize) -> Option<(usize, [f64; 3])> {
        let f = self.face[texel];
        (f != INVALID_FACE).then(|| (f as usize, self.bary[texel]))
    }

    pub fn n_valid(&self) -> usize {
        self.face.iter().filter(|&&f| f != INVALID_FACE).count()
    }

    /// Validity as a single-channel {0,1} map.
    pub fn validity_map(&self) -> Image {
        let mut m = Image::new(self.resolution, self.resolution, 1);
        for (t, v) in m.data.iter_mut().enumerate() {
            *v = self.is_valid(t) as u8 as f64;
        }
        m
    }

    /// Mouth mask as a single-channel {0,1} map.
    pub fn mouth_map(&self) -> Image {
        let mut m = Image::new(self.resolution, self.resolution, 1);
        for (t, v) in m.data.iter_mut().enumerate() {
            *v = self.mouth[t] as u8 as f64;
        }
        m
    }

    /// Mean template-space distance between horizontally or vertically
    /// adjacent valid texels.
    pub fn texel_spacing(&self, model: &HeadModel) -> f64 {
        let pos = self.interpolate(model, &model.template);
        let res = self.resolution;
        let mut d = Vec::new();
        for r in 0..res {
            for c in 0..res {
                let Some(a) = pos[r * res + c] else { continue };
                for (rr, cc) in [(r, c + 1), (r + 1, c)] {
                    if rr < res && cc < res {
                        if let Some(b) = pos[rr * res + cc] {
                            d.push((a - b).norm());
                        }
                    }
                }
            }
        }
        if d.is_empty() {
            return 0.0;
        }
        d.iter().sum::<f64>() / d.len() as f64
    }

    /// Interpolates a per-vertex quantity at every valid texel.
    pub fn interpolate(&self, model: &HeadModel, values: &[Vec3]) -> Vec<Option<Vec3>> {
        (0..self.n_texels())
            .map(|t| {
                self.texel(t).map(|(fi, b)| {
                    let f = model.faces[fi];
                    values[f[0] as usize] * b[0]
                        + values[f[1] as usize] * b[1]
                        + values[f[2] as usize] * b[2]
                })
            })
            .collect()
    }
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Per-texel surface binding used to place Gaussians.
#[derive(Clone, Debug)]
pub struct SurfaceAnchors {
    pub resolution: usize,
    pub valid: Vec<bool>,
    /// Canonical-space anchor (barycentric interpolation of the canonical mesh).
    pub canonical: Vec<Vec3>,
    /// Blended skinning linear part.
    pub linear: Vec<Mat3>,
    pub translation: Vec<Vec3>,
    /// Barycentrically blended skinning weights, `[texels, J]`.
    pub weights: Vec<f64>,
    pub n_joints: usize,
}

impl SurfaceAnchors {
    /// Posed anchor position `linear·canonical + translation`.
    pub fn posed(&self, texel: usize) -> Vec3 {
        self.linear[texel] * self.canonical[texel] + self.translation[texel]
    }

    pub fn texel_weights(&self, texel: usize) -> &[f64] {
        &self.weights[texel * self.n_joints..(texel + 1) * self.n_joints]
    }
}

pub(super) fn surface_anchors(
    model: &HeadModel,
    params: &FlameParams,
    chart: &UvChart,
) -> Result<SurfaceAnchors> {
    let mesh = model.canonical_mesh(params)?;
    let joints = model.regress_joints(&params.shape)?;
    let transforms = joint_transforms(&joints, &model.parents, &params.pose, &params.translation)?;
    let nj = model.n_joints();
    let n = chart.n_texels();
    let mut out = SurfaceAnchors {
        resolution: chart.resolution,
        valid: vec![false; n],
        canonical: vec![Vec3::zeros(); n],
        linear: vec![Mat3::identity(); n],
        translation: vec![Vec3::zeros(); n],
        weights: vec![0.0; n * nj],
        n_joints: nj,
    };
    let mut w = vec![0.0; nj];
    for t in 0..n {
        let Some((fi, b)) = chart.texel(t) else {
            continue;
        };
        let f = model.faces[fi];
        let mut p = Vec3::zeros();
        w.iter_mut().for_each(|x| *x = 0.0);
        for k in 0..3 {
            let v = f[k] as usize;
            p += mesh[v] * b[k];
            for j in 0..nj {
                w[j] += model.skinning_weights[v * nj + j] * b[k];
            }
        }
        let (a, tr) = blend_transforms(&transforms, &w);
        out.valid[t] = true;
        out.canonical[t] = p;
        out.linear[t] = a;
        out.translation[t] = tr;
        out.weights[t * nj..(t + 1) * nj].copy_from_slice(&w);
    }
    Ok(out)
}
