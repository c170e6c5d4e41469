//! 3D Gaussian primitive algebra: covariance construction, density,
//! spherical-harmonic colour and deformation of UV-space primitives onto the
//! skinned head surface.

use std::f64::consts::PI;

use crate::container::Container;
use crate::error::{ensure_dim, Error, Result};
use crate::head_model::{Mat3, SurfaceAnchors, Vec3};

/// Number of real SH basis functions up to degree three.
pub const SH_COEFFS: usize = 16;
/// SH coefficients per primitive (16 per colour channel).
pub const SH_LEN: usize = SH_COEFFS * 3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Offset added to the SH response before clamping to non-negative colour.
pub const SH_COLOR_OFFSET: f64 = 0.5;

/// Per-texel primitive parameters in canonical space.
///
/// SH coefficients are stored coefficient-major: `sh[3*k + channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub offset: Vec3,
    pub opacity: f64,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub scale: Vec3,
    pub sh: [f64; SH_LEN],
}

impl GaussianPrimitive {
    pub fn check(&self) -> bool {
        let qn = self.rotation.iter().map(|x| x * x).sum::<f64>().sqrt();
        (qn - 1.0).abs() < 1e-6
            && self.scale.iter().all(|&s| s > 0.0)
            && (0.0..=1.0).contains(&self.opacity)
            && self.offset.iter().chain(self.sh.iter()).all(|x| x.is_finite())
    }
}

/// A world-space Gaussian ready for projection.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldGaussian {
    pub position: Vec3,
    pub covariance: Mat3,
    pub opacity: f64,
    pub sh: [f64; SH_LEN],
}

/// Flat list of world-space Gaussians, with the UV texel each came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    pub gaussians: Vec<WorldGaussian>,
    pub texels: Vec<usize>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn push(&mut self, g: WorldGaussian, texel: usize) {
        self.gaussians.push(g);
        self.texels.push(texel);
    }

    /// Container layout: `positions [N,3]`, `covariances [N,3,3]`,
    /// `opacities [N]`, `sh [N,16,3]`, `texels [N]`, all f32 except texels (u32).
    pub fn to_container(&self) -> Result<Container> {
        let n = self.len();
        let mut c = Container::new("gaussian_set");
        c.put_f32(
            "positions",
            &[n, 3],
            self.gaussians
                .iter()
                .flat_map(|g| g.position.iter().map(|&x| x as f32).collect::<Vec<_>>())
                .collect(),
        )?;
        c.put_f32(
            "covariances",
            &[n, 3, 3],
            self.gaussians
                .iter()
                .flat_map(|g| {
                    let m = g.covariance;
                    (0..9).map(move |i| m[(i / 3, i % 3)] as f32)
                })
                .collect(),
        )?;
        c.put_f32(
            "opacities",
            &[n],
            self.gaussians.iter().map(|g| g.opacity as f32).collect(),
        )?;
        c.put_f32(
            "sh",
            &[n, SH_COEFFS, 3],
            self.gaussians
                .iter()
                .flat_map(|g| g.sh.iter().map(|&x| x as f32).collect::<Vec<_>>())
                .collect(),
        )?;
        c.put_u32("texels", &[n], self.texels.iter().map(|&t| t as u32).collect())?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_format("gaussian_set")?;
        let (ps, pos) = c.get_f64("positions")?;
        let n = ps[0];
        let (_, cov) = c.get_f64("covariances")?;
        let (_, op) = c.get_f64("opacities")?;
        let (_, sh) = c.get_f64("sh")?;
        let (_, texels) = c.get_u32("texels")?;
        ensure_dim("covariances", n * 9, cov.len())?;
        ensure_dim("opacities", n, op.len())?;
        ensure_dim("sh", n * SH_LEN, sh.len())?;
        ensure_dim("texels", n, texels.len())?;
        let mut set = GaussianSet::default();
        for i in 0..n {
            let mut s = [0.0; SH_LEN];
            s.copy_from_slice(&sh[i * SH_LEN..(i + 1) * SH_LEN]);
            set.push(
                WorldGaussian {
                    position: Vec3::new(pos[3 * i], pos[3 * i + 1], pos[3 * i + 2]),
                    covariance: Mat3::from_row_slice(&cov[9 * i..9 * i + 9]),
                    opacity: op[i],
                    sh: s,
                },
                texels[i] as usize,
            );
        }
        Ok(set)
    }
}

/// Rotation matrix of a (not necessarily normalized) quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Mat3 {
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Vector-Jacobian product of [`quat_to_matrix`] at a unit quaternion.
pub fn quat_to_matrix_vjp(q: &[f64; 4], d_r: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let dw = Mat3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0);
    let dx = Mat3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x);
    let dy = Mat3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y);
    let dz = Mat3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0);
    [
        2.0 * dw.component_mul(d_r).sum(),
        2.0 * dx.component_mul(d_r).sum(),
        2.0 * dy.component_mul(d_r).sum(),
        2.0 * dz.component_mul(d_r).sum(),
    ]
}

/// `Σ = R(ω)·diag(s²)·R(ω)ᵀ`.
pub fn covariance_from(rotation: &[f64; 4], scale: &Vec3) -> Result<Mat3> {
    if rotation.iter().chain(scale.iter()).any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite rotation or scale".into()));
    }
    let qn = rotation.iter().map(|x| x * x).sum::<f64>().sqrt();
    if qn < 1e-12 {
        return Err(Error::InvalidInput("zero-norm quaternion".into()));
    }
    Ok(covariance_unchecked(rotation, scale))
}

fn covariance_unchecked(rotation: &[f64; 4], scale: &Vec3) -> Mat3 {
    let r = quat_to_matrix(rotation);
    let m = r * Mat3::from_diagonal(scale);
    m * m.transpose()
}

/// Backward of [`covariance_from`]: gradients of a unit quaternion and scales
/// given `∂L/∂Σ` (all nine entries treated as independent).
pub fn covariance_vjp(rotation: &[f64; 4], scale: &Vec3, d_sigma: &Mat3) -> ([f64; 4], Vec3) {
    let r = quat_to_matrix(rotation);
    let g = d_sigma + d_sigma.transpose();
    let s2 = Mat3::from_diagonal(&scale.component_mul(scale));
    let d_r = g * r * s2;
    let rgr = r.transpose() * d_sigma * r;
    let d_s = Vec3::new(
        2.0 * scale.x * rgr[(0, 0)],
        2.0 * scale.y * rgr[(1, 1)],
        2.0 * scale.z * rgr[(2, 2)],
    );
    (quat_to_matrix_vjp(rotation, &d_r), d_s)
}

/// Multivariate normal density with mean `mean` and covariance `cov`.
pub fn gaussian_pdf(x: &Vec3, mean: &Vec3, cov: &Mat3) -> Result<f64> {
    let eig = cov.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) || max / min > 1e12 {
        let cond = if min > 0.0 { max / min } else { f64::INFINITY };
        return Err(Error::SingularCovariance(cond));
    }
    let inv = cov
        .try_inverse()
        .ok_or(Error::SingularCovariance(f64::INFINITY))?;
    let d = x - mean;
    let m = d.dot(&(inv * d));
    let det = cov.determinant();
    Ok((-0.5 * m).exp() / ((2.0 * PI).powf(1.5) * det.sqrt()))
}

/// Real SH basis (degree ≤ 3) at a unit direction, splatting sign convention.
pub fn sh_basis(d: &Vec3) -> [f64; SH_COEFFS] {
    sh_basis_with_jacobian(d).0
}

/// SH basis values and their partial derivatives w.r.t. the direction
/// components (evaluated as polynomials in x, y, z).
pub fn sh_basis_with_jacobian(d: &Vec3) -> ([f64; SH_COEFFS], [[f64; 3]; SH_COEFFS]) {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let mut b = [0.0; SH_COEFFS];
    let mut j = [[0.0; 3]; SH_COEFFS];
    b[0] = SH_C0;
    b[1] = -SH_C1 * y;
    j[1] = [0.0, -SH_C1, 0.0];
    b[2] = SH_C1 * z;
    j[2] = [0.0, 0.0, SH_C1];
    b[3] = -SH_C1 * x;
    j[3] = [-SH_C1, 0.0, 0.0];
    b[4] = SH_C2[0] * x * y;
    j[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
    b[5] = SH_C2[1] * y * z;
    j[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
    b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    j[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
    b[7] = SH_C2[3] * x * z;
    j[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
    b[8] = SH_C2[4] * (xx - yy);
    j[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
    b[9] = SH_C3[0] * y * (3.0 * xx - yy);
    j[9] = [SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
    b[10] = SH_C3[1] * x * y * z;
    j[10] = [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y];
    b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    j[11] = [
        SH_C3[2] * (-2.0 * x * y),
        SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
        SH_C3[2] * 8.0 * y * z,
    ];
    b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    j[12] = [
        SH_C3[3] * (-6.0 * x * z),
        SH_C3[3] * (-6.0 * y * z),
        SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
    ];
    b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    j[13] = [
        SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
        SH_C3[4] * (-2.0 * x * y),
        SH_C3[4] * 8.0 * x * z,
    ];
    b[14] = SH_C3[5] * z * (xx - yy);
    j[14] = [SH_C3[5] * 2.0 * x * z, SH_C3[5] * -2.0 * y * z, SH_C3[5] * (xx - yy)];
    b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
    j[15] = [SH_C3[6] * (3.0 * xx - 3.0 * yy), SH_C3[6] * -6.0 * x * y, 0.0];
    (b, j)
}

/// Raw SH response per channel (before offset and clamp).
pub fn sh_response(sh: &[f64; SH_LEN], basis: &[f64; SH_COEFFS]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (k, b) in basis.iter().enumerate() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += b * sh[3 * k + c];
        }
    }
    out
}

/// View-dependent colour `max(0, SH(dir)·c + 0.5)` per channel.
pub fn sh_eval(sh: &[f64; SH_LEN], view_dir: &Vec3) -> Result<[f64; 3]> {
    let n = view_dir.norm();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::InvalidInput("zero-length view direction".into()));
    }
    let raw = sh_response(sh, &sh_basis(&(view_dir / n)));
    Ok(raw.map(|v| (v + SH_COLOR_OFFSET).max(0.0)))
}

/// How the skinning transform acts on covariances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceTransport {
    /// Rotation factor of the blended affine's polar decomposition.
    #[default]
    Polar,
    /// The full blended affine.
    FullAffine,
}

/// Rotation factor of the polar decomposition `A = R·P` (Newton iteration).
pub fn polar_rotation(a: &Mat3) -> Mat3 {
    let mut r = *a;
    for _ in 0..30 {
        let Some(inv) = r.try_inverse() else {
            break;
        };
        let next = (r + inv.transpose()) * 0.5;
        let delta = (next - r).amax();
        r = next;
        if delta < 1e-15 {
            break;
        }
    }
    r
}

/// The transform applied to one texel's primitive.
#[derive(Clone, Debug)]
pub struct TexelTransport {
    pub texel: usize,
    pub anchor: Vec3,
    pub linear: Mat3,
    pub translation: Vec3,
    pub cov_map: Mat3,
}

/// Per-texel transports for every valid texel of the anchors.
pub fn texel_transports(anchors: &SurfaceAnchors, mode: CovarianceTransport) -> Vec<TexelTransport> {
    (0..anchors.valid.len())
        .filter(|&t| anchors.valid[t])
        .map(|t| {
            let a = anchors.linear[t];
            TexelTransport {
                texel: t,
                anchor: anchors.canonical[t],
                linear: a,
                translation: anchors.translation[t],
                cov_map: match mode {
                    CovarianceTransport::Polar => polar_rotation(&a),
                    CovarianceTransport::FullAffine => a,
                },
            }
        })
        .collect()
}

/// Places each valid texel's primitive on the posed surface:
/// `X = A·(anchor + Δx) + t`, `Σ = M·Σ_local·Mᵀ` with `M` the covariance map.
pub fn deform_gaussians(
    prims: &[GaussianPrimitive],
    anchors: &SurfaceAnchors,
    mode: CovarianceTransport,
) -> Result<GaussianSet> {
    ensure_dim("primitive map texels", anchors.valid.len(), prims.len())?;
    Ok(deform_with(prims, &texel_transports(anchors, mode)))
}

pub fn deform_with(prims: &[GaussianPrimitive], transports: &[TexelTransport]) -> GaussianSet {
    let mut set = GaussianSet::default();
    for tr in transports {
        let p = &prims[tr.texel];
        let local = covariance_unchecked(&p.rotation, &p.scale);
        set.push(
            WorldGaussian {
                position: tr.linear * (tr.anchor + p.offset) + tr.translation,
                covariance: tr.cov_map * local * tr.cov_map.transpose(),
                opacity: p.opacity,
                sh: p.sh,
            },
            tr.texel,
        );
    }
    set
}

/// Gradient w.r.t. one world Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldGaussianGrad {
    pub position: Vec3,
    pub covariance: Mat3,
    pub opacity: f64,
    pub sh: [f64; SH_LEN],
}

impl Default for WorldGaussianGrad {
    fn default() -> Self {
        WorldGaussianGrad {
            position: Vec3::zeros(),
            covariance: Mat3::zeros(),
            opacity: 0.0,
            sh: [0.0; SH_LEN],
        }
    }
}

/// Gradient w.r.t. one canonical primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveGrad {
    pub offset: Vec3,
    pub opacity: f64,
    pub rotation: [f64; 4],
    pub scale: Vec3,
    pub sh: [f64; SH_LEN],
}

impl Default for PrimitiveGrad {
    fn default() -> Self {
        PrimitiveGrad {
            offset: Vec3::zeros(),
            opacity: 0.0,
            rotation: [0.0; 4],
            scale: Vec3::zeros(),
            sh: [0.0; SH_LEN],
        }
    }
}

/// Backward of [`deform_with`]; returns one gradient per texel of `prims`.
pub fn deform_backward(
    prims: &[GaussianPrimitive],
    transports: &[TexelTransport],
    grads: &[WorldGaussianGrad],
) -> Vec<PrimitiveGrad> {
    let mut out = vec![PrimitiveGrad::default(); prims.len()];
    for (tr, g) in transports.iter().zip(grads) {
        let p = &prims[tr.texel];
        let o = &mut out[tr.texel];
        o.offset = tr.linear.transpose() * g.position;
        o.opacity = g.opacity;
        o.sh = g.sh;
        let d_local = tr.cov_map.transpose() * g.covariance * tr.cov_map;
        let (dq, ds) = covariance_vjp(&p.rotation, &p.scale, &d_local);
        o.rotation = dq;
        o.scale = ds;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn canonical(q: [f64; 4]) -> [f64; 4] {
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let s = if q[0] < 0.0 { -1.0 } else { 1.0 };
        q.map(|x| s * x / n)
    }

    #[test]
    fn covariance_identity_rotation() {
        let s = covariance_from(&[1.0, 0.0, 0.0, 0.0], &Vec3::new(1.0, 2.0, 3.0)).unwrap();
        assert_eq!(s, Mat3::from_diagonal(&Vec3::new(1.0, 4.0, 9.0)));
    }

    #[test]
    fn covariance_quarter_turn_about_z() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let s = covariance_from(&[h, 0.0, 0.0, h], &Vec3::new(1.0, 2.0, 1.0)).unwrap();
        // oracle: explicit rotation matrix of +90° about z
        let r = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let expected = r * Mat3::from_diagonal(&Vec3::new(1.0, 4.0, 1.0)) * r.transpose();
        assert!((s - expected).amax() < 1e-12);
        assert!((s - Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0))).amax() < 1e-12);
    }

    #[test]
    fn covariance_rejects_non_finite() {
        assert!(covariance_from(&[f64::NAN, 0.0, 0.0, 0.0], &Vec3::new(1.0, 1.0, 1.0)).is_err());
        assert!(covariance_from(&[1.0, 0.0, 0.0, 0.0], &Vec3::new(1.0, f64::INFINITY, 1.0)).is_err());
    }

    fn quat_strategy() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(-1.0f64..1.0).prop_filter("nonzero", |q| {
            q.iter().map(|x| x * x).sum::<f64>() > 1e-3
        })
    }

    proptest! {
        #[test]
        fn covariance_eigenvalues_are_squared_scales(
            q in quat_strategy(),
            s in prop::array::uniform3(0.01f64..2.0),
        ) {
            let q = canonical(q);
            let scale = Vec3::new(s[0], s[1], s[2]);
            let sigma = covariance_from(&q, &scale).unwrap();
            prop_assert!((sigma - sigma.transpose()).amax() < 1e-12);
            let mut eig: Vec<f64> = sigma.symmetric_eigen().eigenvalues.iter().copied().collect();
            eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut sq: Vec<f64> = s.iter().map(|x| x * x).collect();
            sq.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (a, b) in eig.iter().zip(&sq) {
                prop_assert!((a - b).abs() < 1e-8);
            }
            prop_assert!(eig[0] >= -1e-9);
            let det = sigma.determinant();
            let expected = (s[0] * s[1] * s[2]).powi(2);
            prop_assert!(((det - expected) / expected).abs() < 1e-8);
        }

        #[test]
        fn pdf_is_rotation_invariant(
            q in quat_strategy(),
            s in prop::array::uniform3(0.2f64..2.0),
            d in prop::array::uniform3(-1.0f64..1.0),
            rot in quat_strategy(),
        ) {
            let sigma = covariance_from(&q, &Vec3::new(s[0], s[1], s[2])).unwrap();
            let r = quat_to_matrix(&rot);
            let dv = Vec3::new(d[0], d[1], d[2]);
            let mu = Vec3::new(0.3, -0.2, 0.1);
            let p1 = gaussian_pdf(&(mu + dv), &mu, &sigma).unwrap();
            let p2 = gaussian_pdf(&(mu + r * dv), &mu, &(r * sigma * r.transpose())).unwrap();
            prop_assert!((p1 - p2).abs() <= 1e-10 * p1.max(1e-300));
        }
    }

    #[test]
    fn pdf_at_mean_with_identity() {
        let p = gaussian_pdf(&Vec3::zeros(), &Vec3::zeros(), &Mat3::identity()).unwrap();
        assert!((p - (2.0 * PI).powf(-1.5)).abs() < 1e-15);
        assert!((p - 0.063_493_6).abs() < 1e-7);
    }

    #[test]
    fn pdf_hand_evaluated() {
        let cov = Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0));
        let p = gaussian_pdf(&Vec3::new(2.0, 0.0, 0.0), &Vec3::zeros(), &cov).unwrap();
        let expected = (-0.5f64).exp() / ((2.0 * PI).powf(1.5) * 2.0);
        assert!((p - expected).abs() < 1e-15);
    }

    #[test]
    fn pdf_integrates_to_one() {
        let q = canonical([0.9, 0.2, -0.3, 0.1]);
        let s = Vec3::new(0.5, 1.0, 0.7);
        let cov = covariance_from(&q, &s).unwrap();
        let half = 6.0 * 1.0;
        let n = 96;
        let h = 2.0 * half / n as f64;
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let x = Vec3::new(
                        -half + (i as f64 + 0.5) * h,
                        -half + (j as f64 + 0.5) * h,
                        -half + (k as f64 + 0.5) * h,
                    );
                    sum += gaussian_pdf(&x, &Vec3::zeros(), &cov).unwrap();
                }
            }
        }
        assert!((sum * h * h * h - 1.0).abs() < 1e-3);
    }

    #[test]
    fn pdf_rejects_singular() {
        let cov = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 0.0));
        assert!(matches!(
            gaussian_pdf(&Vec3::zeros(), &Vec3::zeros(), &cov),
            Err(Error::SingularCovariance(_))
        ));
    }

    #[test]
    fn sh_dc_only_is_direction_independent() {
        let mut c = [0.0; SH_LEN];
        c[0] = 0.7;
        c[1] = -0.2;
        c[2] = 1.1;
        let a = sh_eval(&c, &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        let b = sh_eval(&c, &Vec3::new(1.0, -2.0, 0.5)).unwrap();
        assert_eq!(a, b);
        assert!((a[0] - (0.7 * SH_C0 + 0.5)).abs() < 1e-15);
        assert!(sh_eval(&c, &Vec3::zeros()).is_err());
    }

    #[test]
    fn y00_matches_sphere_integration() {
        // Y00 is the constant whose square integrates to one over the sphere
        let n = 400;
        let mut area = 0.0;
        for i in 0..n {
            let theta = (i as f64 + 0.5) * PI / n as f64;
            for _ in 0..(2 * n) {
                area += theta.sin() * (PI / n as f64) * (PI / n as f64);
            }
        }
        let y00 = 1.0 / area.sqrt();
        assert!((y00 - SH_C0).abs() < 1e-5);
        assert!((SH_C0 - 0.282_094_8).abs() < 1e-7);
    }

    #[test]
    fn sh_basis_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 1_000_000;
        let mut gram = [[0.0f64; SH_COEFFS]; SH_COEFFS];
        for _ in 0..n {
            let z: f64 = rng.random_range(-1.0..1.0);
            let phi: f64 = rng.random_range(0.0..2.0 * PI);
            let r = (1.0 - z * z).sqrt();
            let b = sh_basis(&Vec3::new(r * phi.cos(), r * phi.sin(), z));
            for i in 0..SH_COEFFS {
                for j in i..SH_COEFFS {
                    gram[i][j] += b[i] * b[j];
                }
            }
        }
        let scale = 4.0 * PI / n as f64;
        for i in 0..SH_COEFFS {
            for j in i..SH_COEFFS {
                let v = gram[i][j] * scale;
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((v - expected).abs() < 2e-2, "<Y{i},Y{j}> = {v}");
            }
        }
    }

    #[test]
    fn sh_jacobian_matches_finite_differences() {
        let d = Vec3::new(0.3, -0.5, 0.8);
        let (_, j) = sh_basis_with_jacobian(&d);
        let h = 1e-6;
        for axis in 0..3 {
            let mut dp = d;
            let mut dm = d;
            dp[axis] += h;
            dm[axis] -= h;
            let (bp, _) = sh_basis_with_jacobian(&dp);
            let (bm, _) = sh_basis_with_jacobian(&dm);
            for k in 0..SH_COEFFS {
                let fd = (bp[k] - bm[k]) / (2.0 * h);
                assert!((fd - j[k][axis]).abs() < 1e-7, "basis {k} axis {axis}");
            }
        }
    }

    #[test]
    fn covariance_vjp_matches_finite_differences() {
        let q = canonical([0.8, 0.3, -0.4, 0.2]);
        let s = Vec3::new(0.3, 0.7, 1.1);
        let w = Mat3::new(0.3, -1.0, 0.5, 0.2, 0.9, -0.4, 1.3, 0.1, -0.7);
        let f = |q: &[f64; 4], s: &Vec3| covariance_unchecked(q, s).component_mul(&w).sum();
        let (dq, ds) = covariance_vjp(&q, &s, &w);
        let h = 1e-6;
        for k in 0..3 {
            let mut sp = s;
            let mut sm = s;
            sp[k] += h;
            sm[k] -= h;
            let fd = (f(&q, &sp) - f(&q, &sm)) / (2.0 * h);
            assert!((fd - ds[k]).abs() < 1e-7);
        }
        // the matrix map normalizes, so compare along tangent directions
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fd = (f(&qp, &s) - f(&qm, &s)) / (2.0 * h);
            let qk = q[k];
            let radial: f64 = dq.iter().zip(&q).map(|(a, b)| a * b).sum();
            let tangential = dq[k] - radial * qk;
            assert!((fd - tangential).abs() < 1e-6, "component {k}: {fd} vs {tangential}");
        }
    }

    #[test]
    fn polar_rotation_of_rotation_is_itself() {
        let r = quat_to_matrix(&canonical([0.7, 0.1, 0.5, -0.2]));
        assert!((polar_rotation(&r) - r).amax() < 1e-14);
        let a = r * Mat3::from_diagonal(&Vec3::new(1.1, 0.9, 1.0));
        let p = polar_rotation(&a);
        assert!((p * p.transpose() - Mat3::identity()).amax() < 1e-12);
    }

    #[test]
    fn gaussian_set_container_roundtrip() {
        let mut set = GaussianSet::default();
        let mut sh = [0.0; SH_LEN];
        sh[4] = 0.25;
        set.push(
            WorldGaussian {
                position: Vec3::new(0.5, -1.0, 2.0),
                covariance: Mat3::from_diagonal(&Vec3::new(0.25, 1.0, 4.0)),
                opacity: 0.5,
                sh,
            },
            42,
        );
        let back = GaussianSet::from_container(&set.to_container().unwrap()).unwrap();
        assert_eq!(back, set);
    }
}
