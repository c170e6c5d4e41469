//! Checks shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use splathead::generator::{ActivationConfig, CHANNELS, CH_OFFSET, CH_OPACITY, CH_ROTATION, CH_SCALE, CH_SH};
use splathead::head_model::{FlameParams, HeadModel, HeadModelConfig, UvChart, Vec3};
use splathead::image::Image;
use splathead::pipeline::SplatChain;
use splathead::render::Camera;
use splathead::synthetic::{camera_rig, SyntheticConfig};

/// Largest relative error seen for one group of raw channels.
#[derive(Clone, Debug)]
pub struct ChannelCheck {
    pub name: &'static str,
    pub checked: usize,
    pub max_rel: f64,
}

pub const GROUPS: [(&str, usize, usize); 5] = [
    ("position", CH_OFFSET, 3),
    ("opacity", CH_OPACITY, 1),
    ("rotation", CH_ROTATION, 4),
    ("scale", CH_SCALE, 3),
    ("sh_dc", CH_SH, 3),
];

pub struct Scene {
    pub model: HeadModel,
    pub chart: UvChart,
    pub params: FlameParams,
    pub camera: Camera,
    pub raw: Vec<f64>,
    pub weights: Image,
}

/// A 16×16 render of a small random head with a random raw map and a random
/// linear read-out `L = Σ w ⊙ image`.
pub fn gradient_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = HeadModel::procedural(&HeadModelConfig::default());
    let chart = model.uv_chart(16);
    let mut params = FlameParams::neutral(&model);
    params.expression.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    params.pose[0] = Vec3::new(0.05, rng.random_range(-0.2..0.2), 0.0);
    let cfg = SyntheticConfig { image_size: 16, ..Default::default() };
    let camera = camera_rig(&cfg).unwrap().swap_remove(0).0;
    let n = chart.n_texels();
    let mut raw: Vec<f64> = (0..CHANNELS * n)
        .map(|_| 0.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    for t in 0..n {
        // keep rotations away from the sign flip and opacities below the clamp
        raw[CH_ROTATION * n + t] += 1.5;
        raw[CH_OPACITY * n + t] = raw[CH_OPACITY * n + t].clamp(-1.5, 1.5);
    }
    let weights = Image::from_data(16, 16, 3, (0..16 * 16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    Scene { model, chart, params, camera, raw, weights }
}

/// Analytic raw-map gradients of render∘deform∘activate against central
/// differences, per channel group, on the entries with the largest gradients.
pub fn gradient_battery(seed: u64, per_group: usize) -> Vec<ChannelCheck> {
    let s = gradient_scene(seed);
    let chain = SplatChain::new(&s.model, &s.chart, ActivationConfig::for_model(&s.model, &s.chart));
    let transports = chain.transports(&s.params).unwrap();
    let loss = |raw: &[f64]| -> f64 {
        let pass = chain.forward(raw, transports.clone(), &s.camera).unwrap();
        pass.rendered.image.data.iter().zip(&s.weights.data).map(|(a, b)| a * b).sum()
    };
    let pass = chain.forward(&s.raw, transports.clone(), &s.camera).unwrap();
    let analytic = chain.backward(&s.raw, &pass, &s.camera, &s.weights, None).unwrap();
    let n = s.chart.n_texels();
    let h = 1e-6;
    GROUPS
        .iter()
        .map(|&(name, start, len)| {
            let mut idx: Vec<usize> = (start * n..(start + len) * n).collect();
            idx.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
            idx.truncate(per_group);
            let mut max_rel: f64 = 0.0;
            for &i in &idx {
                let mut raw = s.raw.clone();
                raw[i] += h;
                let up = loss(&raw);
                raw[i] -= 2.0 * h;
                let down = loss(&raw);
                let fd = (up - down) / (2.0 * h);
                let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-12);
                max_rel = max_rel.max(rel);
            }
            ChannelCheck { name, checked: idx.len(), max_rel }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bound {
    AtMost,
    AtLeast,
    Below,
    Above,
}

/// One measured quantity against its limit.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub bound: Bound,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Check { name: name.into(), value, limit, bound: Bound::AtMost }
    }
    pub fn with(name: impl Into<String>, value: f64, bound: Bound, limit: f64) -> Self {
        Check { name: name.into(), value, limit, bound }
    }
    pub fn passed(&self) -> bool {
        match self.bound {
            Bound::AtMost => self.value <= self.limit,
            Bound::AtLeast => self.value >= self.limit,
            Bound::Below => self.value < self.limit,
            Bound::Above => self.value > self.limit,
        }
    }
    pub fn relation(&self) -> &'static str {
        match self.bound {
            Bound::AtMost => "≤",
            Bound::AtLeast => "≥",
            Bound::Below => "<",
            Bound::Above => ">",
        }
    }
}

fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

fn random_vec(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
    Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

fn random_params(model: &HeadModel, rng: &mut ChaCha8Rng) -> FlameParams {
    let mut p = FlameParams::neutral(model);
    p.shape.iter_mut().for_each(|x| *x = rng.random_range(-1.5..1.5));
    p.expression.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    p.pose.iter_mut().for_each(|a| *a = random_vec(rng, 0.3));
    p.translation = random_vec(rng, 0.05);
    p
}

/// Gaussian density against a product of 1D normals in the eigenframe.
pub fn pdf_oracle(rng: &mut ChaCha8Rng) -> Vec<Check> {
    use splathead::splat::{covariance_from, gaussian_pdf, quat_to_matrix};
    let unit = gaussian_pdf(&Vec3::zeros(), &Vec3::zeros(), &splathead::head_model::Mat3::identity()).unwrap();
    let known = (2.0 * std::f64::consts::PI).powf(-1.5);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let q = random_quat(rng);
        let s = Vec3::new(rng.random_range(0.2..2.0), rng.random_range(0.2..2.0), rng.random_range(0.2..2.0));
        let mean = random_vec(rng, 1.0);
        let x = mean + random_vec(rng, 2.0);
        let cov = covariance_from(&q, &s).unwrap();
        let local = quat_to_matrix(&q).transpose() * (x - mean);
        let expected: f64 = (0..3)
            .map(|i| (-0.5 * (local[i] / s[i]).powi(2)).exp() / ((2.0 * std::f64::consts::PI).sqrt() * s[i]))
            .product();
        let got = gaussian_pdf(&x, &mean, &cov).unwrap();
        worst = worst.max((got - expected).abs() / expected);
    }
    vec![Check::new("pdf at the mean of N(0, I)", (unit - known).abs(), 1e-15), Check::new("pdf relative error", worst, 1e-9)]
}

/// Eigenvalues, trace and determinant of `R S Sᵀ Rᵀ` against `s²`.
pub fn covariance_oracle(rng: &mut ChaCha8Rng) -> Vec<Check> {
    use splathead::splat::covariance_from;
    let (mut worst, mut worst_det): (f64, f64) = (0.0, 0.0);
    for _ in 0..500 {
        let q = random_quat(rng);
        let s = Vec3::new(rng.random_range(1e-3..1.0), rng.random_range(1e-3..1.0), rng.random_range(1e-3..1.0));
        let cov = covariance_from(&q, &s).unwrap();
        let mut eig: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        let mut want: Vec<f64> = s.iter().map(|v| v * v).collect();
        want.sort_by(f64::total_cmp);
        let top = want[2];
        for (a, b) in eig.iter().zip(&want) {
            worst = worst.max((a - b).abs() / top);
        }
        worst = worst.max((cov.trace() - want.iter().sum::<f64>()).abs() / top);
        let det: f64 = want.iter().product();
        worst_det = worst_det.max((cov.determinant() - det).abs() / det);
    }
    vec![
        Check::new("covariance eigenvalues and trace = s² (rel. to largest)", worst, 1e-12),
        Check::new("covariance determinant = Π s² (relative)", worst_det, 1e-6),
    ]
}

/// Posed vertices against forward kinematics on homogeneous 4×4 matrices and
/// an explicit per-vertex weighted sum.
pub fn lbs_oracle(model: &HeadModel, rng: &mut ChaCha8Rng) -> Check {
    use nalgebra::{Matrix4, Rotation3, Vector4};
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let p = random_params(model, rng);
        let posed = model.posed(&p).unwrap().positions;
        let mesh = model.canonical_mesh(&p).unwrap();
        let joints = model.regress_joints(&p.shape).unwrap();
        let nj = model.n_joints();
        let mut world: Vec<Matrix4<f64>> = Vec::with_capacity(nj);
        for k in 0..nj {
            let local_t = match model.parents[k] {
                None => joints[k],
                Some(par) => joints[k] - joints[par],
            };
            let mut local = Rotation3::from_scaled_axis(p.pose[k]).to_homogeneous();
            local.fixed_view_mut::<3, 1>(0, 3).copy_from(&local_t);
            world.push(match model.parents[k] {
                None => local,
                Some(par) => world[par] * local,
            });
        }
        let skinning: Vec<Matrix4<f64>> = world
            .iter()
            .zip(&joints)
            .map(|(g, j)| {
                let mut undo = Matrix4::identity();
                undo.fixed_view_mut::<3, 1>(0, 3).copy_from(&-j);
                let mut shift = Matrix4::identity();
                shift.fixed_view_mut::<3, 1>(0, 3).copy_from(&p.translation);
                shift * g * undo
            })
            .collect();
        for (v, x) in mesh.iter().enumerate() {
            let h = Vector4::new(x.x, x.y, x.z, 1.0);
            let mut out = Vector4::zeros();
            for k in 0..nj {
                out += skinning[k] * h * model.skinning_weights[v * nj + k];
            }
            worst = worst.max((posed[v] - out.xyz()).norm());
        }
    }
    Check::new("LBS per-vertex max error (m)", worst, 1e-12)
}

/// Posed Gaussians against `Σ_k w_k T_k (anchor + Δx)` with anchors and
/// weights interpolated barycentrically, plus eigenvalue preservation under
/// the polar transport.
pub fn deformation_oracle(model: &HeadModel, rng: &mut ChaCha8Rng) -> Vec<Check> {
    use splathead::head_model::joint_transforms;
    use splathead::splat::{covariance_from, deform_gaussians, CovarianceTransport, GaussianPrimitive, SH_LEN};
    let chart = model.uv_chart(32);
    let p = random_params(model, rng);
    let anchors = model.uv_surface_anchors(&p, &chart).unwrap();
    let prims: Vec<GaussianPrimitive> = (0..chart.n_texels())
        .map(|_| GaussianPrimitive {
            offset: random_vec(rng, 0.004),
            opacity: rng.random_range(0.0..1.0),
            rotation: random_quat(rng),
            scale: Vec3::new(rng.random_range(1e-3..5e-3), rng.random_range(1e-3..5e-3), rng.random_range(1e-3..5e-3)),
            sh: [0.1; SH_LEN],
        })
        .collect();
    let set = deform_gaussians(&prims, &anchors, CovarianceTransport::Polar).unwrap();
    let joints = model.regress_joints(&p.shape).unwrap();
    let transforms = joint_transforms(&joints, &model.parents, &p.pose, &p.translation).unwrap();
    let mesh = model.canonical_mesh(&p).unwrap();
    let nj = model.n_joints();
    let (mut pos_err, mut eig_err): (f64, f64) = (0.0, 0.0);
    for (g, &t) in set.gaussians.iter().zip(&set.texels) {
        let (fi, bary) = chart.texel(t).unwrap();
        let face = model.faces[fi];
        let mut anchor = Vec3::zeros();
        let mut w = vec![0.0; nj];
        for k in 0..3 {
            let v = face[k] as usize;
            anchor += mesh[v] * bary[k];
            for j in 0..nj {
                w[j] += model.skinning_weights[v * nj + j] * bary[k];
            }
        }
        let x = anchor + prims[t].offset;
        let expected = transforms.iter().enumerate().fold(Vec3::zeros(), |acc, (j, (r, tr))| acc + (r * x + tr) * w[j]);
        pos_err = pos_err.max((g.position - expected).norm());
        let local = covariance_from(&prims[t].rotation, &prims[t].scale).unwrap();
        let sorted = |m: &splathead::head_model::Mat3| {
            let mut e: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
            e.sort_by(f64::total_cmp);
            e
        };
        for (a, b) in sorted(&g.covariance).iter().zip(sorted(&local)) {
            eig_err = eig_err.max((a - b).abs() / b);
        }
    }
    vec![
        Check::new("deformed position max error (m)", pos_err, 1e-12),
        Check::new("transported covariance eigenvalue rel. error", eig_err, 1e-8),
    ]
}

/// Gauss–Legendre nodes and weights on [-1, 1] by Newton iteration.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let step = p1 / dp;
                x -= step;
                if step.abs() < 1e-16 {
                    break;
                }
            }
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

/// Integrates products of SH basis functions over the sphere with a product
/// rule (Gauss–Legendre in `cos θ`, uniform in `φ`) that is exact for the
/// degrees involved.
pub fn sh_integration_oracle() -> Vec<Check> {
    use splathead::splat::{sh_basis, sh_eval, SH_COEFFS, SH_C0, SH_LEN};
    let nodes = gauss_legendre(12);
    let nphi = 24;
    let dphi = 2.0 * std::f64::consts::PI / nphi as f64;
    let mut gram = [[0.0f64; SH_COEFFS]; SH_COEFFS];
    for &(u, wu) in &nodes {
        let r = (1.0 - u * u).sqrt();
        for j in 0..nphi {
            let phi = (j as f64 + 0.5) * dphi;
            let b = sh_basis(&Vec3::new(r * phi.cos(), r * phi.sin(), u));
            for a in 0..SH_COEFFS {
                for c in 0..SH_COEFFS {
                    gram[a][c] += b[a] * b[c] * wu * dphi;
                }
            }
        }
    }
    let y00 = (gram[0][0] - 1.0).abs();
    let y00_cross = (1..SH_COEFFS).map(|k| gram[0][k].abs()).fold(0.0, f64::max);
    let mut ortho: f64 = 0.0;
    for (a, row) in gram.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            ortho = ortho.max((v - if a == c { 1.0 } else { 0.0 }).abs());
        }
    }
    let mut sh = [0.0; SH_LEN];
    sh[..3].copy_from_slice(&[0.3, -0.2, 0.7]);
    let rgb = sh_eval(&sh, &Vec3::new(0.3, -0.4, 0.8).normalize()).unwrap();
    let dc = [0.3, -0.2, 0.7].iter().zip(rgb).map(|(c, v)| (v - (SH_C0 * c + 0.5).max(0.0)).abs()).fold(0.0, f64::max);
    vec![
        Check::new("∫ Y00² dΩ − 1", y00, 1e-12),
        Check::new("∫ Y00·Y_k dΩ, k > 0", y00_cross, 1e-12),
        Check::new("SH basis orthonormality (16 coeffs)", ortho, 1e-12),
        Check::new("DC-only colour = C0·c + 0.5", dc, 1e-15),
    ]
}

pub fn math_oracles(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = HeadModel::procedural(&HeadModelConfig::default());
    let mut out = pdf_oracle(&mut rng);
    out.extend(covariance_oracle(&mut rng));
    out.push(lbs_oracle(&model, &mut rng));
    out.extend(deformation_oracle(&model, &mut rng));
    out.extend(sh_integration_oracle());
    out
}

/// Sobel map with every pixel's 3×3 replicate-border window built explicitly.
pub fn naive_sobel(img: &Image) -> Image {
    let (h, w) = (img.height, img.width);
    let lum = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        let p = &img.data[3 * (r * w + c)..3 * (r * w + c) + 3];
        0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
    };
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (mut sx, mut sy) = (0.0, 0.0);
            for i in 0..3 {
                for j in 0..3 {
                    let v = lum(r as isize + i as isize - 1, c as isize + j as isize - 1);
                    sx += kx[i][j] * v;
                    sy += ky[i][j] * v;
                }
            }
            gx[r * w + c] = sx;
            gy[r * w + c] = sy;
        }
    }
    let max_xy = gx.iter().chain(&gy).fold(0.0f64, |m, v| m.max(v.abs()));
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let max_mag = mag.iter().fold(0.0f64, |m, &v| m.max(v));
    let mut out = Image::new(h, w, 3);
    for p in 0..h * w {
        if max_xy > 1e-12 {
            out.data[3 * p] = gx[p] / max_xy;
            out.data[3 * p + 1] = gy[p] / max_xy;
        }
        if max_mag > 1e-12 {
            out.data[3 * p + 2] = mag[p] / max_mag;
        }
    }
    out
}

/// Number of random images whose Sobel map differs from the oracle in any bit.
pub fn sobel_mismatches(seed: u64, n: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .filter(|_| {
            let (h, w) = (rng.random_range(3..48), rng.random_range(3..48));
            let img = Image::from_data(h, w, 3, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap();
            let got = splathead::conditioning::sobel_gradient_map(&img).unwrap();
            got.data.iter().zip(&naive_sobel(&img).data).any(|(a, b)| a.to_bits() != b.to_bits())
        })
        .count()
}

/// Number of random bundles violating the mouth-mask contract after
/// construction: `M_id` zero inside the mask, `M_mouth` zero outside, other
/// values untouched, all finite.
pub fn mask_violations(seed: u64, n: usize) -> usize {
    use splathead::conditioning::{ConditioningBundle, UvBake};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = HeadModel::procedural(&HeadModelConfig::default());
    let chart = model.uv_chart(32);
    let texels = chart.n_texels();
    let random_image = |rng: &mut ChaCha8Rng| {
        Image::from_data(32, 32, 3, (0..texels * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    (0..n)
        .filter(|_| {
            let texture = random_image(&mut rng);
            let m_mouth = random_image(&mut rng);
            let valid: Vec<bool> = (0..texels).map(|_| rng.random_bool(0.7)).collect();
            let p = random_params(&model, &mut rng);
            let bake = UvBake { texture: texture.clone(), valid: valid.clone() };
            let b = ConditioningBundle::build(&bake, &p, m_mouth.clone(), &model, &chart).unwrap();
            let kept = (0..texels).all(|t| {
                let px = 3 * t..3 * t + 3;
                if chart.mouth[t] {
                    b.m_mouth.data[px.clone()] == m_mouth.data[px] && !b.id_valid[t]
                } else {
                    b.m_id.data[px.clone()] == texture.data[px] && b.id_valid[t] == valid[t]
                }
            });
            !(b.masks_hold() && kept)
        })
        .count()
}
