//! Procedural low-poly head asset.
//!
//! The surface is a deformed ellipsoid parameterized by azimuth φ (0 at the
//! face, +z) and polar angle θ (0 at the crown, y up). The UV chart is the
//! (column, row) grid of that parameterization. A band of rows inserted at
//! the mouth line folds inward behind the lips to form the mouth interior:
//! hidden when the jaw is closed, exposed when it opens.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HeadModel, Vec3, JOINT_HEAD, JOINT_JAW, JOINT_NECK, JOINT_ROOT};

/// Nominal polar angle of the lip line.
pub const MOUTH_LINE_THETA: f64 = 0.64 * PI;

const THETA_MAX: f64 = 0.85 * PI;
const RADII: [f64; 3] = [0.075, 0.105, 0.092];
const MOUTH_HALF_WIDTH: f64 = 0.45;
const MOUTH_DEPTH: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadModelConfig {
    /// Vertex columns around the head (first and last coincide at the back).
    pub n_around: usize,
    /// Regular surface rows from crown to neck.
    pub n_rows: usize,
    /// Rows folded into the mouth interior.
    pub n_interior: usize,
    pub n_shape: usize,
    pub n_expr: usize,
    pub pose_blendshapes: bool,
    /// Unused UV border on every side.
    pub uv_margin: f64,
    pub seed: u64,
}

impl Default for HeadModelConfig {
    fn default() -> Self {
        HeadModelConfig {
            n_around: 48,
            n_rows: 28,
            n_interior: 3,
            n_shape: 16,
            n_expr: 16,
            pose_blendshapes: true,
            uv_margin: 0.03,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum RowKind {
    Regular,
    UpperLip,
    Interior(f64),
    LowerLip,
}

struct Row {
    theta: f64,
    kind: RowKind,
}

fn gauss(dphi: f64, dtheta: f64, s_phi: f64, s_theta: f64) -> f64 {
    (-0.5 * ((dphi / s_phi).powi(2) + (dtheta / s_theta).powi(2))).exp()
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn ellipsoid(phi: f64, theta: f64) -> Vec3 {
    Vec3::new(
        RADII[0] * theta.sin() * phi.sin(),
        RADII[1] * theta.cos(),
        RADII[2] * theta.sin() * phi.cos(),
    )
}

fn ellipsoid_normal(p: &Vec3) -> Vec3 {
    let n = Vec3::new(
        p.x / (RADII[0] * RADII[0]),
        p.y / (RADII[1] * RADII[1]),
        p.z / (RADII[2] * RADII[2]),
    );
    let len = n.norm();
    if len < 1e-12 {
        Vec3::y()
    } else {
        n / len
    }
}

/// Facial relief along the surface normal.
fn relief(phi: f64, theta: f64, theta_m: f64) -> f64 {
    let front = phi.cos().max(0.0);
    let mut d = 0.022 * gauss(phi, theta - 0.52 * PI, 0.12, 0.07);
    d += 0.010 * gauss(phi, theta - 0.46 * PI, 0.08, 0.05);
    for side in [-1.0, 1.0] {
        d -= 0.008 * gauss(phi - side * 0.38, theta - 0.43 * PI, 0.12, 0.04);
        d += 0.004 * gauss(phi - side * 0.36, theta - 0.38 * PI, 0.18, 0.025);
    }
    d += 0.006 * gauss(phi, theta - theta_m, 0.28, 0.05);
    d += 0.008 * gauss(phi, theta - 0.72 * PI, 0.22, 0.05);
    d * front
}

fn surface(phi: f64, theta: f64, theta_m: f64) -> (Vec3, Vec3) {
    let base = ellipsoid(phi, theta);
    let n = ellipsoid_normal(&base);
    (base + n * relief(phi, theta, theta_m), n)
}

fn mouth_window(phi: f64) -> f64 {
    if phi.abs() >= MOUTH_HALF_WIDTH {
        0.0
    } else {
        (0.5 * PI * phi / MOUTH_HALF_WIDTH).cos().powi(2)
    }
}

pub(super) fn build(cfg: &HeadModelConfig) -> HeadModel {
    assert!(cfg.n_around >= 8 && cfg.n_rows >= 8, "head mesh too coarse");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let reg_theta = |r: usize| THETA_MAX * r as f64 / (cfg.n_rows - 1) as f64;
    let r_m = ((MOUTH_LINE_THETA / THETA_MAX) * (cfg.n_rows - 1) as f64).round() as usize;
    let theta_m = reg_theta(r_m);

    let mut rows = Vec::new();
    for r in 0..cfg.n_rows {
        if r == r_m {
            rows.push(Row { theta: theta_m, kind: RowKind::UpperLip });
            for i in 1..=cfg.n_interior {
                let tau = i as f64 / (cfg.n_interior + 1) as f64;
                rows.push(Row { theta: theta_m, kind: RowKind::Interior(tau) });
            }
            rows.push(Row { theta: theta_m, kind: RowKind::LowerLip });
        } else {
            rows.push(Row { theta: reg_theta(r), kind: RowKind::Regular });
        }
    }
    let n_v = rows.len();
    let n_u = cfg.n_around;
    let phis: Vec<f64> = (0..n_u)
        .map(|c| -PI + 2.0 * PI * c as f64 / (n_u - 1) as f64)
        .collect();

    // per-vertex parameterization data
    let nv = n_u * n_v;
    let mut template = Vec::with_capacity(nv);
    let mut normals = Vec::with_capacity(nv);
    let mut params = Vec::with_capacity(nv); // (phi, theta, kind)
    let mut uvs = Vec::with_capacity(nv);
    let m = cfg.uv_margin;
    for (ri, row) in rows.iter().enumerate() {
        for (ci, &phi) in phis.iter().enumerate() {
            let (p0, n) = surface(phi, row.theta, theta_m);
            let p = match row.kind {
                RowKind::Interior(tau) => {
                    let depth = MOUTH_DEPTH * mouth_window(phi);
                    p0 - n * depth * (PI * tau).sin()
                        + Vec3::y() * 0.35 * depth * (2.0 * PI * tau).sin()
                }
                _ => p0,
            };
            template.push(p);
            normals.push(n);
            params.push((phi, row.theta, row.kind));
            uvs.push([
                m + (1.0 - 2.0 * m) * ci as f64 / (n_u - 1) as f64,
                m + (1.0 - 2.0 * m) * ri as f64 / (n_v - 1) as f64,
            ]);
        }
    }

    let mut faces = Vec::new();
    let mut mouth_faces = Vec::new();
    for ri in 0..n_v - 1 {
        let in_band = matches!(rows[ri].kind, RowKind::UpperLip | RowKind::Interior(_));
        for ci in 0..n_u - 1 {
            let a = (ri * n_u + ci) as u32;
            let b = a + 1;
            let c = a + n_u as u32;
            let d = c + 1;
            let phi_c = 0.5 * (phis[ci] + phis[ci + 1]);
            let mouth = in_band && phi_c.abs() < MOUTH_HALF_WIDTH;
            faces.push([a, c, b]);
            faces.push([b, c, d]);
            mouth_faces.push(mouth);
            mouth_faces.push(mouth);
        }
    }

    // skinning
    let nj = 4;
    let parents = vec![None, Some(JOINT_ROOT), Some(JOINT_NECK), Some(JOINT_HEAD)];
    let mut skinning_weights = vec![0.0; nv * nj];
    for (v, &(phi, theta, kind)) in params.iter().enumerate() {
        let b = smoothstep(0.68 * PI, THETA_MAX, theta);
        let neck = 0.7 * b;
        let root = 0.3 * b * b;
        let lateral = 1.0 - smoothstep(0.9, 1.5, phi.abs());
        let jawness = match kind {
            RowKind::UpperLip => 0.0,
            RowKind::Interior(tau) => smoothstep(0.35, 0.65, tau) * lateral,
            RowKind::LowerLip => lateral,
            RowKind::Regular if theta > theta_m => lateral,
            RowKind::Regular => 0.0,
        };
        let rest = 1.0 - neck - root;
        let w = &mut skinning_weights[v * nj..(v + 1) * nj];
        w[JOINT_ROOT] = root;
        w[JOINT_NECK] = neck;
        w[JOINT_HEAD] = rest * (1.0 - jawness);
        w[JOINT_JAW] = rest * jawness;
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
    }

    // joint regressor: ring centroids and a bilateral hinge pair
    let regular_row = |theta: f64| {
        rows.iter()
            .enumerate()
            .filter(|(_, r)| r.kind == RowKind::Regular)
            .min_by(|a, b| {
                (a.1.theta - theta)
                    .abs()
                    .partial_cmp(&(b.1.theta - theta).abs())
                    .unwrap()
            })
            .map(|(i, _)| i)
            .unwrap()
    };
    let mut joint_regressor = vec![0.0; nj * nv];
    let ring = |reg: &mut [f64], row: usize| {
        for ci in 0..n_u - 1 {
            reg[row * n_u + ci] = 1.0 / (n_u - 1) as f64;
        }
    };
    ring(&mut joint_regressor[JOINT_ROOT * nv..(JOINT_ROOT + 1) * nv], n_v - 1);
    ring(
        &mut joint_regressor[JOINT_NECK * nv..(JOINT_NECK + 1) * nv],
        regular_row(0.76 * PI),
    );
    ring(
        &mut joint_regressor[JOINT_HEAD * nv..(JOINT_HEAD + 1) * nv],
        regular_row(0.58 * PI),
    );
    {
        let row = regular_row(theta_m - 0.06 * PI);
        let nearest_col = |target: f64| {
            (0..n_u - 1)
                .min_by(|&a, &b| {
                    (phis[a] - target)
                        .abs()
                        .partial_cmp(&(phis[b] - target).abs())
                        .unwrap()
                })
                .unwrap()
        };
        let reg = &mut joint_regressor[JOINT_JAW * nv..(JOINT_JAW + 1) * nv];
        for target in [-0.5 * PI, 0.5 * PI] {
            reg[row * n_u + nearest_col(target)] += 0.5;
        }
    }

    // bases, evaluated at each vertex's surface parameter
    let field_point = |v: usize| -> (f64, f64, Vec3, Vec3) {
        let (phi, theta, _) = params[v];
        (phi, theta, template[v], normals[v])
    };
    let lower_face = |theta: f64| smoothstep(theta_m - 0.05 * PI, theta_m + 0.05 * PI, theta);

    let mut shape_basis = vec![0.0; nv * 3 * cfg.n_shape];
    let mut random_fields: Vec<Vec<(f64, f64, f64, f64)>> = Vec::new();
    for _ in 0..cfg.n_shape {
        random_fields.push(
            (0..6)
                .map(|_| {
                    (
                        rng.random_range(1..4) as f64,
                        rng.random_range(1..4) as f64,
                        rng.random_range(0.0..2.0 * PI),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect(),
        );
    }
    for v in 0..nv {
        let (phi, theta, p, n) = field_point(v);
        for k in 0..cfg.n_shape {
            let d = match k {
                0 => Vec3::new(p.x * 0.06, 0.0, 0.0),
                1 => Vec3::new(0.0, p.y * 0.06, 0.0),
                2 => Vec3::new(0.0, 0.0, p.z * 0.06),
                3 => n * 0.006 * gauss(phi, theta - 0.5 * PI, 0.14, 0.09) * phi.cos().max(0.0),
                4 => Vec3::new(p.x * 0.10 * lower_face(theta), 0.0, 0.0),
                _ => {
                    let s: f64 = random_fields[k]
                        .iter()
                        .map(|&(a, b, ph, c)| c * (a * phi + ph).cos() * (b * theta).sin())
                        .sum();
                    n * 0.0025 * s
                }
            };
            for c in 0..3 {
                shape_basis[(3 * v + c) * cfg.n_shape + k] = d[c];
            }
        }
    }

    let mut expr_basis = vec![0.0; nv * 3 * cfg.n_expr];
    let bumps: Vec<(f64, f64, f64)> = (0..cfg.n_expr)
        .map(|_| {
            (
                rng.random_range(-1.0..1.0),
                rng.random_range(0.35 * PI..0.75 * PI),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    for v in 0..nv {
        let (phi, theta, _, n) = field_point(v);
        let sym = |f: &dyn Fn(f64) -> Vec3| f(-1.0) + f(1.0);
        for k in 0..cfg.n_expr {
            let d = match k {
                0 => sym(&|s| Vec3::y() * 0.006 * gauss(phi - s * 0.35, theta - 0.38 * PI, 0.2, 0.05)),
                1 => sym(&|s| {
                    Vec3::new(s * 0.002, 0.005, -0.002) * gauss(phi - s * 0.3, theta - theta_m, 0.15, 0.05)
                }),
                2 => Vec3::new(-0.004 * phi.sin(), 0.0, 0.005) * gauss(phi, theta - theta_m, 0.3, 0.05),
                3 => sym(&|s| n * 0.005 * gauss(phi - s * 0.6, theta - 0.58 * PI, 0.2, 0.07)),
                4 => sym(&|s| Vec3::new(s * 0.004, 0.0, 0.0) * gauss(phi - s * 0.3, theta - theta_m, 0.15, 0.05)),
                5 => sym(&|s| -Vec3::y() * 0.003 * gauss(phi - s * 0.38, theta - 0.41 * PI, 0.12, 0.02)),
                6 => sym(&|s| Vec3::new(-s * 0.003, 0.0, 0.0) * gauss(phi - s * 0.2, theta - 0.38 * PI, 0.1, 0.04)),
                7 => Vec3::y() * 0.003 * gauss(phi, theta - (theta_m - 0.03 * PI), 0.25, 0.03),
                _ => {
                    let (c_phi, c_theta, sign) = bumps[k];
                    n * 0.003 * sign.signum() * gauss(phi - c_phi, theta - c_theta, 0.25, 0.08)
                }
            };
            let d = d * phi.cos().max(0.0).sqrt();
            for c in 0..3 {
                expr_basis[(3 * v + c) * cfg.n_expr + k] = d[c];
            }
        }
    }

    let n_pf = 9 * (nj - 1);
    let pose_basis = if cfg.pose_blendshapes {
        let mut pb = vec![0.0; nv * 3 * n_pf];
        let coeffs: Vec<(f64, f64, f64)> = (0..n_pf)
            .map(|_| {
                (
                    rng.random_range(1..3) as f64,
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        for v in 0..nv {
            let (phi, theta, _, n) = field_point(v);
            let jaw_region = lower_face(theta) * phi.cos().max(0.0);
            for f in 0..n_pf {
                let (a, ph, c) = coeffs[f];
                let joint = 1 + f / 9;
                let amp = if joint == JOINT_JAW { 0.004 * jaw_region } else { 0.0008 };
                let d = n * amp * c * (a * phi + ph).cos() * theta.sin();
                for ch in 0..3 {
                    pb[(3 * v + ch) * n_pf + f] = d[ch];
                }
            }
        }
        pb
    } else {
        Vec::new()
    };

    let model = HeadModel {
        template,
        shape_basis,
        expr_basis,
        pose_basis,
        n_shape: cfg.n_shape,
        n_expr: cfg.n_expr,
        skinning_weights,
        joint_regressor,
        parents,
        faces,
        uvs,
        mouth_faces,
    };
    debug_assert!(model.validate().is_ok());
    model
}
