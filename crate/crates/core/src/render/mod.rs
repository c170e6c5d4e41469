//! Reference splat renderer: EWA projection of 3D Gaussians to image-plane
//! ellipses, a global depth sort and per-pixel front-to-back compositing,
//! with an analytic backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::head_model::{Mat3, Vec3};
use crate::image::Image;
use crate::splat::{
    sh_basis_with_jacobian, sh_response, GaussianSet, WorldGaussian, WorldGaussianGrad,
    SH_COEFFS, SH_COLOR_OFFSET,
};

/// Pinhole camera with a world-to-camera rigid transform (`x_c = R·x + t`,
/// camera looks along +z with y pointing down in the image).
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        rotation: Mat3,
        translation: Vec3,
        intrinsics: [f64; 4],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Camera {
            rotation,
            translation,
            fx: intrinsics[0],
            fy: intrinsics[1],
            cx: intrinsics[2],
            cy: intrinsics[3],
            width,
            height,
            near: 0.01,
            far: 100.0,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with `up` mapped to image-up and a
    /// vertical field of view of `fov_y` radians.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let z = (target - eye).normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::InvalidInput("look_at: up is parallel to view".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Camera::new(
            r,
            -(r * eye),
            [f, f, 0.5 * width as f64, 0.5 * height as f64],
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.near > 0.0
            && self.near < self.far
            && self.width > 0
            && self.height > 0
            && (self.rotation * self.rotation.transpose() - Mat3::identity()).amax() < 1e-6
            && self.translation.iter().all(|x| x.is_finite())
            && self.cx.is_finite()
            && self.cy.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput("invalid camera".into()))
        }
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// Pixel coordinates of a world point (pixel centres at half-integers).
    pub fn project_point(&self, x: &Vec3) -> Option<[f64; 2]> {
        let t = self.to_camera(x);
        (t.z > self.near).then(|| [self.fx * t.x / t.z + self.cx, self.fy * t.y / t.z + self.cy])
    }

    pub fn record(&self) -> CameraRecord {
        let r = self.rotation;
        CameraRecord {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
            intrinsics: [self.fx, self.fy, self.cx, self.cy],
            width: self.width,
            height: self.height,
            near: self.near,
            far: self.far,
        }
    }

    pub fn from_record(r: &CameraRecord) -> Result<Self> {
        let cam = Camera {
            rotation: Mat3::from_fn(|i, j| r.rotation[i][j]),
            translation: Vec3::from(r.translation),
            fx: r.intrinsics[0],
            fy: r.intrinsics[1],
            cx: r.intrinsics[2],
            cy: r.intrinsics[3],
            width: r.width,
            height: r.height,
            near: r.near,
            far: r.far,
        };
        cam.validate()?;
        Ok(cam)
    }
}

/// Serializable camera description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub intrinsics: [f64; 4],
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

/// Compositing constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub background: [f64; 3],
    /// Upper clamp on per-splat alpha.
    pub alpha_max: f64,
    /// Splats contributing less than this alpha at a pixel are skipped.
    pub alpha_min: f64,
    /// Compositing stops once transmittance falls below this value.
    pub transmittance_min: f64,
    /// Added to the diagonal of every projected covariance, in px².
    pub low_pass: f64,
    /// Means further than this multiple of the half field of view are culled.
    pub guard_band: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            background: [0.0; 3],
            alpha_max: 0.99,
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            low_pass: 0.3,
            guard_band: 1.3,
        }
    }
}

/// A Gaussian projected onto the image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    pub cov2d: [[f64; 2]; 2],
    /// Inverse of `cov2d` as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub rgb: [f64; 3],
    /// Index of the source Gaussian in its set.
    pub source: usize,
}

impl Splat2D {
    /// `−½·dᵀ·cov2d⁻¹·d` at pixel coordinates `(px, py)`.
    #[inline]
    pub fn power(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.mean2d[0];
        let dy = py - self.mean2d[1];
        let [a, b, c] = self.conic;
        -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    }
}

/// Projects one Gaussian; `None` when culled.
pub fn project(g: &WorldGaussian, cam: &Camera, settings: &RenderSettings) -> Option<Splat2D> {
    project_indexed(g, 0, cam, settings)
}

fn project_indexed(
    g: &WorldGaussian,
    source: usize,
    cam: &Camera,
    settings: &RenderSettings,
) -> Option<Splat2D> {
    let t = cam.to_camera(&g.position);
    if !(t.z > cam.near && t.z < cam.far) {
        return None;
    }
    let lim_x = settings.guard_band * cam.cx.max(cam.width as f64 - cam.cx) / cam.fx;
    let lim_y = settings.guard_band * cam.cy.max(cam.height as f64 - cam.cy) / cam.fy;
    if (t.x / t.z).abs() > lim_x || (t.y / t.z).abs() > lim_y {
        return None;
    }
    let j = jacobian(cam, &t);
    let m = j * cam.rotation;
    let c = m * g.covariance * m.transpose();
    let cov = [
        [c[(0, 0)] + settings.low_pass, c[(0, 1)]],
        [c[(1, 0)], c[(1, 1)] + settings.low_pass],
    ];
    let b = 0.5 * (cov[0][1] + cov[1][0]);
    let det = cov[0][0] * cov[1][1] - b * b;
    if !(det > 0.0) {
        return None;
    }
    let conic = [cov[1][1] / det, -b / det, cov[0][0] / det];
    let dir = g.position - cam.center();
    let dn = dir.norm();
    if !(dn > 0.0) {
        return None;
    }
    let (basis, _) = sh_basis_with_jacobian(&(dir / dn));
    let raw = sh_response(&g.sh, &basis);
    Some(Splat2D {
        mean2d: [cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy],
        cov2d: [[cov[0][0], b], [b, cov[1][1]]],
        conic,
        depth: t.z,
        opacity: g.opacity,
        rgb: raw.map(|v| (v + SH_COLOR_OFFSET).max(0.0)),
        source,
    })
}

fn jacobian(cam: &Camera, t: &Vec3) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    nalgebra::Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz * iz,
    )
}

/// Alpha of a splat at a pixel, `(alpha, exp(power), clamped)`; `None` when
/// below the skip threshold.
#[inline]
fn splat_alpha(s: &Splat2D, px: f64, py: f64, settings: &RenderSettings) -> Option<(f64, f64, bool)> {
    let power = s.power(px, py);
    if power > 0.0 {
        return None;
    }
    let g = power.exp();
    let raw = s.opacity * g;
    let (alpha, clamped) = if raw > settings.alpha_max {
        (settings.alpha_max, true)
    } else {
        (raw, false)
    };
    (alpha >= settings.alpha_min).then_some((alpha, g, clamped))
}

/// Renderer output plus what the backward pass needs.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: Image,
    /// Accumulated opacity `1 − T_final`.
    pub alpha: Image,
    /// Projected splats in compositing order.
    pub splats: Vec<Splat2D>,
    /// Per-pixel candidate lists (indices into `splats`), CSR layout.
    offsets: Vec<usize>,
    ids: Vec<u32>,
}

impl Rendered {
    /// Candidate splats of a pixel in front-to-back order.
    pub fn candidates(&self, row: usize, col: usize) -> &[u32] {
        let p = row * self.image.width + col;
        &self.ids[self.offsets[p]..self.offsets[p + 1]]
    }
}

/// Depth-sorts projected splats (ascending depth, ties by source index).
pub fn sort_splats(splats: &mut [Splat2D]) {
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source.cmp(&b.source)));
}

/// Projects and depth-sorts every Gaussian of a set.
pub fn project_all(set: &GaussianSet, cam: &Camera, settings: &RenderSettings) -> Vec<Splat2D> {
    let mut splats: Vec<Splat2D> = set
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_indexed(g, i, cam, settings))
        .collect();
    sort_splats(&mut splats);
    splats
}

/// Pixel range `[lo, hi]` whose centres lie within `r` of `m`.
fn pixel_span(m: f64, r: f64, n: usize) -> Option<(usize, usize)> {
    let lo = (m - r - 0.5).ceil().max(0.0);
    let hi = (m + r - 0.5).floor().min(n as f64 - 1.0);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

/// Renders a Gaussian set.
pub fn render(set: &GaussianSet, cam: &Camera, settings: &RenderSettings) -> Result<Rendered> {
    cam.validate()?;
    for g in &set.gaussians {
        let finite = g.position.iter().all(|x| x.is_finite())
            && g.covariance.iter().all(|x| x.is_finite())
            && g.opacity.is_finite()
            && g.sh.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidInput("non-finite Gaussian".into()));
        }
    }
    let splats = project_all(set, cam, settings);
    Ok(composite_splats(splats, cam.width, cam.height, settings))
}

/// Bins depth-sorted splats to pixels and composites every pixel.
pub fn composite_splats(
    splats: Vec<Splat2D>,
    width: usize,
    height: usize,
    settings: &RenderSettings,
) -> Rendered {
    let n_pix = width * height;
    // Outside this radius `opacity·exp(power) < alpha_min`, so the skipped
    // pixels are exactly those the compositing loop would skip anyway.
    let spans: Vec<Option<((usize, usize), (usize, usize))>> = splats
        .iter()
        .map(|s| {
            if s.opacity < settings.alpha_min {
                return None;
            }
            let r = if settings.alpha_min > 0.0 {
                let lmax = 0.5 * (s.cov2d[0][0] + s.cov2d[1][1])
                    + (0.25 * (s.cov2d[0][0] - s.cov2d[1][1]).powi(2) + s.cov2d[0][1].powi(2))
                        .sqrt();
                (2.0 * lmax * (s.opacity / settings.alpha_min).ln()).sqrt() * (1.0 + 1e-9) + 1e-9
            } else {
                f64::INFINITY
            };
            Some((
                pixel_span(s.mean2d[0], r, width)?,
                pixel_span(s.mean2d[1], r, height)?,
            ))
        })
        .collect();
    let mut counts = vec![0usize; n_pix + 1];
    for ((c0, c1), (r0, r1)) in spans.iter().flatten() {
        for row in *r0..=*r1 {
            for col in *c0..=*c1 {
                counts[row * width + col + 1] += 1;
            }
        }
    }
    for p in 0..n_pix {
        counts[p + 1] += counts[p];
    }
    let offsets = counts;
    let mut fill = offsets.clone();
    let mut ids = vec![0u32; offsets[n_pix]];
    for (k, span) in spans.iter().enumerate() {
        if let Some(((c0, c1), (r0, r1))) = span {
            for row in *r0..=*r1 {
                for col in *c0..=*c1 {
                    let p = row * width + col;
                    ids[fill[p]] = k as u32;
                    fill[p] += 1;
                }
            }
        }
    }
    let mut image = Image::new(height, width, 3);
    let mut alpha = Image::new(height, width, 1);
    for row in 0..height {
        for col in 0..width {
            let p = row * width + col;
            let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for &k in &ids[offsets[p]..offsets[p + 1]] {
                let s = &splats[k as usize];
                let Some((a, _, _)) = splat_alpha(s, px, py, settings) else {
                    continue;
                };
                for ch in 0..3 {
                    c[ch] += s.rgb[ch] * a * t;
                }
                t *= 1.0 - a;
                if t < settings.transmittance_min {
                    break;
                }
            }
            for ch in 0..3 {
                image.data[p * 3 + ch] = c[ch] + t * settings.background[ch];
            }
            alpha.data[p] = 1.0 - t;
        }
    }
    Rendered {
        image,
        alpha,
        splats,
        offsets,
        ids,
    }
}

/// Gradients with respect to one projected splat.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splat2DGrad {
    pub mean2d: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub rgb: [f64; 3],
}

/// Backward of the compositing stage: gradients per entry of `rendered.splats`
/// given `∂L/∂image` and optionally `∂L/∂alpha`.
pub fn composite_backward(
    rendered: &Rendered,
    d_image: &Image,
    d_alpha: Option<&Image>,
    settings: &RenderSettings,
) -> Result<Vec<Splat2DGrad>> {
    let (h, w) = (rendered.image.height, rendered.image.width);
    ensure_dim("d_image pixels", h * w * 3, d_image.data.len())?;
    if let Some(da) = d_alpha {
        ensure_dim("d_alpha pixels", h * w, da.data.len())?;
    }
    let splats = &rendered.splats;
    let mut grads = vec![Splat2DGrad::default(); splats.len()];
    // (splat, alpha, exp(power), clamped, transmittance before)
    let mut used: Vec<(usize, f64, f64, bool, f64)> = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let p = row * w + col;
            let dc = [d_image.data[3 * p], d_image.data[3 * p + 1], d_image.data[3 * p + 2]];
            let da = d_alpha.map_or(0.0, |a| a.data[p]);
            if dc == [0.0; 3] && da == 0.0 {
                continue;
            }
            let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
            used.clear();
            let mut t = 1.0;
            for &k in rendered.candidates(row, col) {
                let s = &splats[k as usize];
                let Some((a, g, clamped)) = splat_alpha(s, px, py, settings) else {
                    continue;
                };
                used.push((k as usize, a, g, clamped, t));
                t *= 1.0 - a;
                if t < settings.transmittance_min {
                    break;
                }
            }
            // rest = colour composited behind the current splat (incl. background)
            // per unit of transmittance after it; q = product of (1 − α) behind it.
            let mut rest = settings.background;
            let mut q = 1.0;
            for &(k, a, g, clamped, t_i) in used.iter().rev() {
                let s = &splats[k];
                let gr = &mut grads[k];
                let mut d_a = da * t_i * q;
                for ch in 0..3 {
                    d_a += dc[ch] * t_i * (s.rgb[ch] - rest[ch]);
                    gr.rgb[ch] += dc[ch] * a * t_i;
                    rest[ch] = s.rgb[ch] * a + (1.0 - a) * rest[ch];
                }
                q *= 1.0 - a;
                if clamped {
                    continue;
                }
                gr.opacity += d_a * g;
                let d_power = d_a * a;
                let dx = px - s.mean2d[0];
                let dy = py - s.mean2d[1];
                let [ca, cb, cc] = s.conic;
                gr.mean2d[0] += d_power * (ca * dx + cb * dy);
                gr.mean2d[1] += d_power * (cb * dx + cc * dy);
                gr.conic[0] -= 0.5 * d_power * dx * dx;
                gr.conic[1] -= d_power * dx * dy;
                gr.conic[2] -= 0.5 * d_power * dy * dy;
            }
        }
    }
    Ok(grads)
}

/// Backward of projection: accumulates splat gradients into per-Gaussian
/// world-space gradients (one entry per Gaussian of `set`).
pub fn project_backward(
    set: &GaussianSet,
    cam: &Camera,
    splats: &[Splat2D],
    grads: &[Splat2DGrad],
) -> Vec<WorldGaussianGrad> {
    let mut out = vec![WorldGaussianGrad::default(); set.len()];
    let center = cam.center();
    for (s, gr) in splats.iter().zip(grads) {
        let g = &set.gaussians[s.source];
        let o = &mut out[s.source];
        o.opacity += gr.opacity;

        // colour
        let dir = g.position - center;
        let dn = dir.norm();
        let d = dir / dn;
        let (basis, jac) = sh_basis_with_jacobian(&d);
        let raw = sh_response(&g.sh, &basis);
        let d_raw: [f64; 3] =
            std::array::from_fn(|ch| if raw[ch] + SH_COLOR_OFFSET > 0.0 { gr.rgb[ch] } else { 0.0 });
        let mut d_dir = Vec3::zeros();
        for k in 0..SH_COEFFS {
            let mut acc = 0.0;
            for ch in 0..3 {
                o.sh[3 * k + ch] += basis[k] * d_raw[ch];
                acc += g.sh[3 * k + ch] * d_raw[ch];
            }
            d_dir += Vec3::new(jac[k][0], jac[k][1], jac[k][2]) * acc;
        }
        o.position += (d_dir - d * d.dot(&d_dir)) / dn;

        // conic → 2D covariance
        let [a, b, c] = s.conic;
        let q = nalgebra::Matrix2::new(a, b, b, c);
        let gq = nalgebra::Matrix2::new(gr.conic[0], 0.5 * gr.conic[1], 0.5 * gr.conic[1], gr.conic[2]);
        let d_cov2 = -(q * gq * q);

        // 2D covariance → 3D covariance and Jacobian
        let t = cam.to_camera(&g.position);
        let j = jacobian(cam, &t);
        let m = j * cam.rotation;
        o.covariance += m.transpose() * d_cov2 * m;
        let d_m = (d_cov2 + d_cov2.transpose()) * m * g.covariance;
        let d_j = d_m * cam.rotation.transpose();
        let iz = 1.0 / t.z;
        let iz2 = iz * iz;
        let (fx, fy) = (cam.fx, cam.fy);
        let mut d_t = Vec3::new(
            -fx * iz2 * d_j[(0, 2)],
            -fy * iz2 * d_j[(1, 2)],
            -fx * iz2 * d_j[(0, 0)] + 2.0 * fx * t.x * iz2 * iz * d_j[(0, 2)] - fy * iz2 * d_j[(1, 1)]
                + 2.0 * fy * t.y * iz2 * iz * d_j[(1, 2)],
        );
        // mean
        d_t.x += gr.mean2d[0] * fx * iz;
        d_t.y += gr.mean2d[1] * fy * iz;
        d_t.z -= gr.mean2d[0] * fx * t.x * iz2 + gr.mean2d[1] * fy * t.y * iz2;
        o.position += cam.rotation.transpose() * d_t;
    }
    out
}

/// Full backward: world-space gradients for every Gaussian of `set`.
pub fn render_backward(
    set: &GaussianSet,
    cam: &Camera,
    rendered: &Rendered,
    d_image: &Image,
    d_alpha: Option<&Image>,
    settings: &RenderSettings,
) -> Result<Vec<WorldGaussianGrad>> {
    let grads = composite_backward(rendered, d_image, d_alpha, settings)?;
    Ok(project_backward(set, cam, &rendered.splats, &grads))
}
