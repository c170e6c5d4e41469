use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::chain::SplatChain;
use super::color::ColorAffine;
use super::train::Prior;
use crate::conditioning::{identity_texture, mouth_gradient_map, ConditioningBundle, View};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::generator::{expression_input, identity_input, Generator, FINAL_LAYER, LEVELS};
use crate::head_model::{FlameParams, HeadModel, UvChart};
use crate::image::Image;
use crate::losses::{anchor_loss, ImageCritics, LossComponents, LossWeights};
use crate::nn::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use crate::render::Camera;

pub const ENROLLMENT_FORMAT: &str = "splathead_enrollment";

/// Pyramid levels optimised in the first stage (the three coarsest; level 0
/// is the finest).
pub const COARSE_LEVELS: [usize; 3] = [3, 4, 5];
pub const FINE_LEVELS: [usize; 3] = [0, 1, 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnrollConfig {
    pub iterations: usize,
    /// Share of iterations spent on the coarse levels before switching to
    /// the fine levels plus the final layer.
    pub stage1_fraction: f64,
    pub feature_lr: f64,
    pub final_layer_lr: f64,
    pub color_lr: f64,
    /// Co-optimise a colour transform in the second stage.
    pub color_affine: bool,
    pub weights: LossWeights,
}

impl Default for EnrollConfig {
    fn default() -> Self {
        EnrollConfig {
            iterations: 300,
            stage1_fraction: 0.6,
            feature_lr: 1e-2,
            final_layer_lr: 1e-4,
            color_lr: 1e-3,
            color_affine: false,
            weights: LossWeights::default(),
        }
    }
}

impl EnrollConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !(0.0..=1.0).contains(&self.stage1_fraction) {
            return Err(Error::Config("stage1_fraction must lie in [0, 1]".into()));
        }
        if !pos(self.feature_lr) || !pos(self.final_layer_lr) || !pos(self.color_lr) {
            return Err(Error::Config("enrollment learning rates must be positive".into()));
        }
        self.weights.validate()
    }

    pub fn stage1_iterations(&self) -> usize {
        (self.stage1_fraction * self.iterations as f64).round() as usize
    }
}

/// One captured image with its tracking and camera.
#[derive(Clone, Debug)]
pub struct EnrollView {
    pub image: Image,
    pub params: FlameParams,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnrollLog {
    pub iteration: usize,
    pub stage: u8,
    pub loss: f64,
    pub best_loss: f64,
    pub components: LossComponents,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of every input image's 8-bit pixels.
    pub image_hashes: Vec<String>,
    pub iterations: usize,
    pub config: EnrollConfig,
    /// Loss of the initial (prior) decode.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_components: LossComponents,
    /// Mean |raw − raw_prior| of the final decode over all views.
    pub drift: f64,
    /// Digest of every prior weight outside the final layer.
    pub frozen_digest: String,
}

/// Optimised identity pyramid `F*`, fine-tuned final layer and colour
/// transform.
#[derive(Clone, Debug)]
pub struct EnrollmentResult {
    pub features: Vec<Tensor<f32>>,
    pub final_layer: [Tensor<f32>; 2],
    pub color: ColorAffine,
    pub provenance: Provenance,
    pub log: Vec<EnrollLog>,
}

/// Digest over every generator weight except the final layer.
pub fn frozen_digest(g: &Generator<f32>) -> String {
    let mut h = Sha256::new();
    for (name, d) in g.digests() {
        if !name.starts_with(FINAL_LAYER) {
            h.update(name.as_bytes());
            h.update(d.as_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn image_hash(img: &Image) -> String {
    hex::encode(Sha256::digest(img.to_u8()))
}

impl EnrollmentResult {
    /// The prior's generator with the enrolled final layer.
    pub fn generator(&self, prior: &Prior) -> Generator<f32> {
        let mut g = prior.generator.clone();
        let [w, b] = g.final_layer();
        *g.store.get_mut(w) = self.final_layer[0].clone();
        *g.store.get_mut(b) = self.final_layer[1].clone();
        g
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(ENROLLMENT_FORMAT);
        c.set_meta("provenance", serde_json::to_string(&self.provenance)?);
        c.set_meta("color", serde_json::to_string(&self.color)?);
        for (l, f) in self.features.iter().enumerate() {
            c.put_f32(&format!("features.{l}"), &f.shape, f.data.clone())?;
        }
        c.put_f32("final.w", &self.final_layer[0].shape, self.final_layer[0].data.clone())?;
        c.put_f32("final.b", &self.final_layer[1].shape, self.final_layer[1].data.clone())?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_format(ENROLLMENT_FORMAT)?;
        let tensor = |name: &str| -> Result<Tensor<f32>> {
            let (s, d) = c.get_f32(name)?;
            if s.len() != 4 {
                return Err(Error::Shape(format!("{name}: expected a rank-4 tensor")));
            }
            Tensor::from_vec([s[0], s[1], s[2], s[3]], d)
        };
        Ok(EnrollmentResult {
            features: (0..LEVELS).map(|l| tensor(&format!("features.{l}"))).collect::<Result<_>>()?,
            final_layer: [tensor("final.w")?, tensor("final.b")?],
            color: serde_json::from_str(c.meta("color")?)?,
            provenance: serde_json::from_str(c.meta("provenance")?)?,
            log: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Conditioning bundle of a captured (or driving) frame: identity bake,
/// expression offsets from its tracking and, when the prior uses it, the
/// mouth gradient map seen from `camera`.
pub fn frame_bundle(
    identity: &crate::conditioning::UvBake,
    frame: Option<&Image>,
    params: &FlameParams,
    camera: &Camera,
    mouth: bool,
    model: &HeadModel,
    chart: &UvChart,
) -> Result<ConditioningBundle> {
    let m_mouth = match frame.filter(|_| mouth) {
        Some(img) => mouth_gradient_map(img, params, camera, model, chart)?,
        None => Image::new(chart.resolution, chart.resolution, 3),
    };
    ConditioningBundle::build(identity, params, m_mouth, model, chart)
}

/// Few-shot enrollment: two-stage optimisation of the identity pyramid (and,
/// in the second stage, the final decoder layer and optional colour
/// transform) against 1–3 captured images, anchored to the prior decode.
pub fn enroll(
    prior: &Prior,
    views: &[EnrollView],
    model: &HeadModel,
    chart: &UvChart,
    config: &EnrollConfig,
) -> Result<EnrollmentResult> {
    config.validate()?;
    if views.is_empty() {
        return Err(Error::InvalidInput("enrollment needs at least one image".into()));
    }
    let mut generator = prior.generator.clone();
    let before = frozen_digest(&generator);
    let mouth = prior.config.mouth_conditioning;
    let bake_views: Vec<View> =
        views.iter().map(|v| View { image: &v.image, params: &v.params, camera: &v.camera }).collect();
    let identity = identity_texture(&bake_views, model, chart)?;
    let bundles = views
        .iter()
        .map(|v| frame_bundle(&identity, Some(&v.image), &v.params, &v.camera, mouth, model, chart))
        .collect::<Result<Vec<_>>>()?;

    // initial pyramid and per-view expression pyramids (frozen encoders)
    generator.set_trainable(|_| false);
    let mut g = Graph::<f32>::new();
    let x = g.input(identity_input(&bundles[0]));
    let f_vars = generator.encode_identity(&mut g, x)?;
    let mut features = ParamStore::<f32>::new();
    for (l, &v) in f_vars.iter().enumerate() {
        features.add(format!("f.{l}"), g.value(v).clone());
    }
    let mut exp_pyramids = Vec::with_capacity(views.len());
    for b in &bundles {
        let e = g.input(expression_input(b, generator.config.offset_scale));
        let vars = generator.encode_expression(&mut g, e)?;
        exp_pyramids.push(vars.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>());
    }
    drop(g);

    let chain = SplatChain::new(model, chart, generator.config.activation);
    let perceptual = prior.perceptual();
    let critics = ImageCritics { perceptual: Some(&perceptual), discriminator: None };
    let mut weights = config.weights;
    weights.gan = 0.0;

    let decode = |generator: &Generator<f32>, features: &ParamStore<f32>, active: &[usize]| -> Result<_> {
        let mut g = Graph::<f32>::new();
        let f: Vec<Var> = (0..LEVELS)
            .map(|l| {
                let t = features.get(l).clone();
                if active.contains(&l) {
                    g.leaf(t)
                } else {
                    g.input(t)
                }
            })
            .collect();
        let mut raws = Vec::with_capacity(exp_pyramids.len());
        for pyr in &exp_pyramids {
            let e: Vec<Var> = pyr.iter().map(|t| g.input(t.clone())).collect();
            raws.push(generator.decode(&mut g, &f, &e)?);
        }
        Ok((g, f, raws))
    };

    let (g0, _, raws0) = decode(&generator, &features, &[])?;
    let anchors: Vec<Vec<f32>> = raws0.iter().map(|&r| g0.value(r).data.clone()).collect();
    drop(g0);

    let mut color = ColorAffine::identity();
    let mut color_store = ParamStore::<f64>::new();
    color_store.add("color", Tensor::from_vec([1, 12, 1, 1], color.free().to_vec())?);
    let mut color_adam = Adam::new(&color_store, AdamConfig::default());
    let mut feat_adam = Adam::new(&features, AdamConfig::default());
    let mut final_adam = Adam::new(&generator.store, AdamConfig::default());
    let stage1 = config.stage1_iterations();
    let k = 1.0 / views.len() as f64;

    let mut log = Vec::with_capacity(config.iterations);
    let mut best = f64::INFINITY;
    let mut initial_loss = None;
    let mut last = (f64::NAN, LossComponents::default(), 0.0);
    for it in 0..=config.iterations {
        let evaluate_only = it == config.iterations;
        let stage = if it < stage1 { 1 } else { 2 };
        let active: &[usize] = if evaluate_only {
            &[]
        } else if stage == 1 {
            &COARSE_LEVELS
        } else {
            &FINE_LEVELS
        };
        let tune_final = stage == 2 && !evaluate_only;
        generator.set_trainable(|n| tune_final && n.starts_with(FINAL_LAYER));
        let use_color = config.color_affine && stage == 2;
        let (g, f, raws) = decode(&generator, &features, active)?;
        let mut comp = LossComponents::default();
        let mut seeds = Vec::with_capacity(views.len());
        let mut d_color = [[0.0; 4]; 3];
        for ((v, &r), anchor) in views.iter().zip(&raws).zip(&anchors) {
            let raw = &g.value(r).data;
            let out = chain.loss_step(raw, &v.params, &v.camera, &v.image, &weights, &critics, use_color.then_some(&color))?;
            let (greg, d_anchor) = anchor_loss(raw, anchor);
            let mut c = out.components;
            c.greg = greg;
            comp.add(&c);
            let seed: Vec<f32> = out
                .d_raw
                .iter()
                .zip(&d_anchor)
                .map(|(a, b)| ((*a as f64 + weights.greg * *b as f64) * k) as f32)
                .collect();
            seeds.push((r, seed));
            if let Some(dc) = out.d_color {
                for i in 0..3 {
                    for j in 0..4 {
                        d_color[i][j] += dc[i][j] * k;
                    }
                }
            }
        }
        comp.scale(k);
        let loss = comp.inversion_total(&weights);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: it, last_good: None });
        }
        initial_loss.get_or_insert(loss);
        best = best.min(loss);
        if evaluate_only {
            last = (loss, comp, comp.greg);
            break;
        }
        log.push(EnrollLog { iteration: it + 1, stage, loss, best_loss: best, components: comp });
        let grads = g.backward(&seeds);
        let fg: Vec<Option<Vec<f32>>> =
            f.iter().map(|&v| grads.get(v).map(|d| d.to_vec())).collect();
        feat_adam.step(&mut features, &fg, config.feature_lr);
        if tune_final {
            let pg = grads.params(&g, generator.store.len());
            final_adam.step(&mut generator.store, &pg, config.final_layer_lr);
        }
        if use_color {
            let dc: Vec<f64> = d_color.iter().flatten().copied().collect();
            color_adam.step(&mut color_store, &[Some(dc)], config.color_lr);
            color.set_free(&color_store.get(0).data);
        }
    }

    let after = frozen_digest(&generator);
    if after != before {
        return Err(Error::InvalidInput("enrollment modified frozen prior weights".into()));
    }
    let [w, b] = generator.final_layer();
    let (final_loss, final_components, drift) = last;
    Ok(EnrollmentResult {
        features: (0..LEVELS).map(|l| features.get(l).clone()).collect(),
        final_layer: [generator.store.get(w).clone(), generator.store.get(b).clone()],
        color,
        provenance: Provenance {
            image_hashes: views.iter().map(|v| image_hash(&v.image)).collect(),
            iterations: config.iterations,
            config: config.clone(),
            initial_loss: initial_loss.unwrap_or(final_loss),
            final_loss,
            final_components,
            drift,
            frozen_digest: after,
        },
        log,
    })
}
