//! Procedural multi-view, multi-expression head dataset: seeded subjects
//! (shape, skin albedo, mouth-interior texture, expression tracks), a fixed
//! camera rig and ground-truth Gaussian renders with exact trackings.

mod dataset;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head_model::{FlameParams, HeadModel, HeadModelConfig, UvChart, Vec3, JOINT_JAW, JOINT_NECK};
use crate::image::Image;
use crate::render::{render, Camera, RenderSettings};
use crate::splat::{deform_gaussians, CovarianceTransport, GaussianPrimitive, GaussianSet, SH_C0, SH_COLOR_OFFSET, SH_LEN};

pub use dataset::{
    frame_file, generate_dataset, CameraEntry, CameraRole, DatasetManifest, LoadedDataset, LoadedSequence, LoadedSubject,
    SequenceEntry, SubjectEntry, Split, MANIFEST_FILE,
};

/// Bounds of generated expression coefficients.
pub const EXPRESSION_RANGE: f64 = 1.2;
/// Jaw opening range (rotation about x, radians).
pub const JAW_RANGE: (f64, f64) = (0.0, 0.3);
/// Bound of the per-axis neck rotation in generated tracks (radians).
pub const NECK_RANGE: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub train_subjects: usize,
    pub test_subjects: usize,
    /// Training cameras; one extra held-out camera is always added.
    pub cameras: usize,
    pub sequences: usize,
    pub frames: usize,
    pub image_size: usize,
    pub uv_resolution: usize,
    /// Isotropic ground-truth scale as a multiple of the texel spacing.
    pub gt_scale_factor: f64,
    pub gt_opacity: f64,
    pub camera_distance: f64,
    pub fov_y: f64,
    /// Yaw of the outer training cameras (radians).
    pub camera_yaw: f64,
    pub head: HeadModelConfig,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            train_subjects: 12,
            test_subjects: 4,
            cameras: 3,
            sequences: 2,
            frames: 60,
            image_size: 128,
            uv_resolution: 64,
            gt_scale_factor: 0.6,
            gt_opacity: 0.99,
            camera_distance: 0.55,
            fov_y: 0.45,
            camera_yaw: 0.6,
            head: HeadModelConfig::default(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic data: {m}")));
        if self.train_subjects + self.test_subjects == 0 || self.sequences == 0 || self.frames == 0 {
            return bad("need at least one subject, sequence and frame");
        }
        if self.cameras == 0 {
            return bad("need at least one training camera");
        }
        if self.image_size < 16 || self.uv_resolution == 0 || self.uv_resolution % 64 != 0 {
            return bad("image size must be ≥ 16 and the UV resolution a multiple of 64");
        }
        if !(self.gt_scale_factor > 0.0 && self.gt_opacity > 0.0 && self.gt_opacity < 1.0) {
            return bad("ground-truth scale must be positive and opacity in (0, 1)");
        }
        if !(self.camera_distance > 0.2 && self.fov_y > 0.0 && self.fov_y < PI) {
            return bad("camera distance or field of view out of range");
        }
        Ok(())
    }

    /// Seed of subject `i` (training subjects first).
    pub fn subject_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1)
    }

    pub fn n_subjects(&self) -> usize {
        self.train_subjects + self.test_subjects
    }
}

/// Per-frame expression, jaw and neck trajectory of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionTrack {
    pub expression: Vec<Vec<f64>>,
    pub jaw: Vec<f64>,
    pub neck: Vec<Vec3>,
}

impl ExpressionTrack {
    pub fn len(&self) -> usize {
        self.jaw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jaw.is_empty()
    }

    /// Head parameters of frame `f` for a subject with shape `shape`.
    pub fn params(&self, model: &HeadModel, shape: &[f64], f: usize) -> FlameParams {
        let mut p = FlameParams::neutral(model);
        p.shape = shape.to_vec();
        p.expression = self.expression[f].clone();
        p.pose[JOINT_JAW] = Vec3::new(self.jaw[f], 0.0, 0.0);
        p.pose[JOINT_NECK] = self.neck[f];
        p
    }

    pub fn within_bounds(&self) -> bool {
        self.expression.iter().flatten().all(|v| v.abs() <= EXPRESSION_RANGE)
            && self.jaw.iter().all(|j| (JAW_RANGE.0..=JAW_RANGE.1).contains(j))
            && self.neck.iter().all(|n| n.iter().all(|v| v.abs() <= NECK_RANGE))
    }
}

/// One procedural subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSubject {
    pub seed: u64,
    pub shape: Vec<f64>,
    /// Skin albedo over the whole chart (RGB in [0, 1]).
    pub albedo: Image,
    /// High-frequency mouth-interior texture (meaningful on mouth texels).
    pub mouth: Image,
    pub tracks: Vec<ExpressionTrack>,
}

/// Smooth skin albedo evaluated at each texel's template surface point (so
/// it is continuous across UV seams): a base tone, a few long waves and soft
/// blobs.
fn albedo_texture(points: &[Option<Vec3>], res: usize, rng: &mut ChaCha8Rng) -> Image {
    let base = [rng.random_range(0.55..0.85), rng.random_range(0.38..0.62), rng.random_range(0.28..0.52)];
    let waves: Vec<([f64; 3], Vec3, f64)> = (0..4)
        .map(|_| {
            let amp = std::array::from_fn(|_| rng.random_range(-0.035..0.035));
            let dir = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
            (amp, dir * rng.random_range(2.0..4.0), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let blobs: Vec<(Vec3, f64, [f64; 3])> = (0..6)
        .map(|_| {
            let centre = Vec3::new(rng.random_range(-0.08..0.08), rng.random_range(-0.1..0.1), rng.random_range(0.0..0.1));
            let amp = std::array::from_fn(|_| rng.random_range(-0.06..0.06));
            (centre, rng.random_range(0.05..0.08), amp)
        })
        .collect();
    let mut img = Image::new(res, res, 3);
    for (t, p) in points.iter().enumerate() {
        let Some(p) = p else {
            img.data[3 * t..3 * t + 3].copy_from_slice(&base);
            continue;
        };
        for ch in 0..3 {
            let mut x = base[ch];
            for (amp, k, ph) in &waves {
                x += amp[ch] * (k.dot(p) + ph).sin();
            }
            for (cen, w, amp) in &blobs {
                x += amp[ch] * (-0.5 * (p - cen).norm_squared() / (w * w)).exp();
            }
            img.data[3 * t + ch] = x.clamp(0.05, 0.95);
        }
    }
    img
}

/// Oriented stripes between two random colours, with a subject-specific
/// frequency and phase.
fn mouth_texture(res: usize, rng: &mut ChaCha8Rng) -> Image {
    let a = [rng.random_range(0.45..0.7), rng.random_range(0.08..0.25), rng.random_range(0.08..0.22)];
    let b = [rng.random_range(0.8..0.98), rng.random_range(0.75..0.95), rng.random_range(0.7..0.9)];
    let freq = rng.random_range(0.9..2.0);
    let angle = rng.random_range(0.0..PI);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut img = Image::new(res, res, 3);
    for r in 0..res {
        for c in 0..res {
            let s = 0.5 + 0.5 * (freq * (c as f64 * ca + r as f64 * sa) + phase).sin();
            for ch in 0..3 {
                img.set(r, c, ch, a[ch] + (b[ch] - a[ch]) * s);
            }
        }
    }
    img
}

fn expression_track(model: &HeadModel, frames: usize, rng: &mut ChaCha8Rng) -> ExpressionTrack {
    let t = |f: usize| f as f64 / frames.max(1) as f64;
    let comp: Vec<(f64, f64, f64)> = (0..model.n_expr)
        .map(|_| (rng.random_range(0.0..EXPRESSION_RANGE), rng.random_range(0.5..2.5), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let (jf, jp) = (rng.random_range(1.0..3.0), rng.random_range(0.0..2.0 * PI));
    let neck: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(0.0..NECK_RANGE), rng.random_range(0.3..1.5), rng.random_range(0.0..2.0 * PI)))
        .collect();
    ExpressionTrack {
        expression: (0..frames)
            .map(|f| comp.iter().map(|(a, w, p)| a * (2.0 * PI * w * t(f) + p).sin()).collect())
            .collect(),
        jaw: (0..frames)
            .map(|f| {
                let s = (2.0 * PI * jf * t(f) + jp).sin();
                (JAW_RANGE.1 * s.max(0.0)).clamp(JAW_RANGE.0, JAW_RANGE.1)
            })
            .collect(),
        neck: (0..frames)
            .map(|f| Vec3::from_fn(|i, _| neck[i].0 * (2.0 * PI * neck[i].1 * t(f) + neck[i].2).sin()))
            .collect(),
    }
}

/// Deterministic subject from `seed`.
pub fn make_subject(seed: u64, model: &HeadModel, chart: &UvChart, config: &SyntheticConfig) -> SyntheticSubject {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = (0..model.n_shape).map(|_| rng.random_range(-1.0..1.0)).collect();
    let albedo = albedo_texture(&chart.interpolate(model, &model.template), chart.resolution, &mut rng);
    let mouth = mouth_texture(chart.resolution, &mut rng);
    let tracks = (0..config.sequences).map(|_| expression_track(model, config.frames, &mut rng)).collect();
    SyntheticSubject { seed, shape, albedo, mouth, tracks }
}

impl SyntheticSubject {
    /// Albedo outside the mouth region and the mouth texture inside it.
    pub fn texture(&self, chart: &UvChart) -> Image {
        let mut t = self.albedo.clone();
        for (i, &m) in chart.mouth.iter().enumerate() {
            if m {
                t.data[3 * i..3 * i + 3].copy_from_slice(&self.mouth.data[3 * i..3 * i + 3]);
            }
        }
        t
    }

    pub fn neutral_params(&self, model: &HeadModel) -> FlameParams {
        let mut p = FlameParams::neutral(model);
        p.shape = self.shape.clone();
        p
    }
}

/// Normalized cross-correlation of two RGB textures over the texels in
/// `mask`, each channel centred on its own mean.
pub fn texture_ncc(a: &Image, b: &Image, mask: &[bool]) -> f64 {
    let texels: Vec<usize> = (0..mask.len()).filter(|&t| mask[t]).collect();
    let n = texels.len() as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for ch in 0..3 {
        let mx = texels.iter().map(|&t| a.data[3 * t + ch]).sum::<f64>() / n;
        let my = texels.iter().map(|&t| b.data[3 * t + ch]).sum::<f64>() / n;
        for &t in &texels {
            let (x, y) = (a.data[3 * t + ch] - mx, b.data[3 * t + ch] - my);
            sxy += x * y;
            sxx += x * x;
            syy += y * y;
        }
    }
    sxy / (sxx * syy).sqrt().max(1e-300)
}

/// Ground-truth canonical primitives: one per texel at the surface anchor
/// (`Δx = 0`), identity rotation, isotropic `scale`, DC colour from `texture`.
pub fn gt_primitives(texture: &Image, scale: f64, opacity: f64) -> Vec<GaussianPrimitive> {
    (0..texture.height * texture.width)
        .map(|t| {
            let mut sh = [0.0; SH_LEN];
            for ch in 0..3 {
                sh[ch] = (texture.data[3 * t + ch] - SH_COLOR_OFFSET) / SH_C0;
            }
            GaussianPrimitive {
                offset: Vec3::zeros(),
                opacity,
                rotation: [1.0, 0.0, 0.0, 0.0],
                scale: Vec3::repeat(scale),
                sh,
            }
        })
        .collect()
}

/// The camera rig: `n_train` cameras on a horizontal arc facing the head,
/// followed by one held-out camera between them and slightly above.
pub fn camera_rig(config: &SyntheticConfig) -> Result<Vec<(Camera, CameraRole)>> {
    let d = config.camera_distance;
    let s = config.image_size;
    let cam = |yaw: f64, pitch: f64| {
        let eye = Vec3::new(d * yaw.sin() * pitch.cos(), d * pitch.sin(), d * yaw.cos() * pitch.cos());
        Camera::look_at(eye, Vec3::zeros(), Vec3::y(), config.fov_y, s, s)
    };
    let n = config.cameras;
    let mut rig = Vec::with_capacity(n + 1);
    for i in 0..n {
        // frontal first, then alternating right/left
        let k = i.div_ceil(2) as f64;
        let side = if i % 2 == 1 { 1.0 } else { -1.0 };
        let yaw = if i == 0 { 0.0 } else { side * config.camera_yaw * k / (n / 2).max(1) as f64 };
        rig.push((cam(yaw, 0.05)?, CameraRole::Train));
    }
    rig.push((cam(0.5 * config.camera_yaw, 0.2)?, CameraRole::HeldOut));
    Ok(rig)
}

/// The shared assets every generated sample refers to.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub config: SyntheticConfig,
    pub model: HeadModel,
    pub chart: UvChart,
    pub gt_scale: f64,
    pub settings: RenderSettings,
}

impl SyntheticWorld {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        config.validate()?;
        let model = HeadModel::procedural(&config.head);
        model.validate()?;
        let chart = model.uv_chart(config.uv_resolution);
        let gt_scale = config.gt_scale_factor * chart.texel_spacing(&model);
        Ok(SyntheticWorld { config, model, chart, gt_scale, settings: RenderSettings::default() })
    }

    pub fn subject(&self, index: usize) -> SyntheticSubject {
        make_subject(self.config.subject_seed(index), &self.model, &self.chart, &self.config)
    }

    pub fn gt_primitives(&self, subject: &SyntheticSubject) -> Vec<GaussianPrimitive> {
        gt_primitives(&subject.texture(&self.chart), self.gt_scale, self.config.gt_opacity)
    }

    /// Posed ground-truth Gaussians for `params`.
    pub fn gt_gaussians(&self, prims: &[GaussianPrimitive], params: &FlameParams) -> Result<GaussianSet> {
        let anchors = self.model.uv_surface_anchors(params, &self.chart)?;
        deform_gaussians(prims, &anchors, CovarianceTransport::Polar)
    }

    /// Ground-truth frame, quantized to 8 bits as stored on disk.
    pub fn render_gt(&self, prims: &[GaussianPrimitive], params: &FlameParams, cam: &Camera) -> Result<Image> {
        let set = self.gt_gaussians(prims, params)?;
        Ok(render(&set, cam, &self.settings)?.image.quantized())
    }
}
