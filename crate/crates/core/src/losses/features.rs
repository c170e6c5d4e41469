use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Levels produced by a [`FeatureNet`] (and heads of the discriminator).
pub const FEATURE_LEVELS: usize = 5;
const FEATURE_WIDTHS: [usize; FEATURE_LEVELS] = [16, 32, 64, 64, 64];
const HEAD_WIDTH: usize = 32;
const SLOPE: f64 = 0.2;
/// Images enter feature networks shifted from [0, 1] to [−0.5, 0.5].
pub const INPUT_SHIFT: f64 = -0.5;

/// Batch of HWC images as an NCHW tensor, plus `shift` on every value.
pub fn images_to_tensor<T: Real>(imgs: &[&Image], shift: f64) -> Result<Tensor<T>> {
    let first = imgs.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(imgs.len() * h * w * c);
    for img in imgs {
        if !img.same_shape(first) {
            return Err(Error::Shape("image batch with mixed shapes".into()));
        }
        for ch in 0..c {
            data.extend((0..h * w).map(|p| T::of(img.data[p * c + ch] + shift)));
        }
    }
    Tensor::from_vec([imgs.len(), c, h, w], data)
}

/// Batch item `n` of an NCHW gradient as an HWC image.
pub fn tensor_item_to_image<T: Real>(t: &[T], shape: [usize; 4], n: usize) -> Image {
    let [_, c, h, w] = shape;
    let item = &t[n * c * h * w..(n + 1) * c * h * w];
    let mut img = Image::new(h, w, c);
    for ch in 0..c {
        for p in 0..h * w {
            img.data[p * c + ch] = item[ch * h * w + p].f64();
        }
    }
    img
}

/// Fixed convolutional feature pyramid. The default weights are random
/// (He-normal from a recorded seed); pretrained weights can be loaded from a
/// container with the same parameter names.
#[derive(Clone, Debug)]
pub struct FeatureNet<T> {
    pub store: ParamStore<T>,
    pub seed: u64,
    layers: Vec<(ParamId, ParamId, usize)>,
}

impl<T: Real> FeatureNet<T> {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + SLOPE * SLOPE)).sqrt();
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut c = 3;
        for (l, &w) in FEATURE_WIDTHS.iter().enumerate() {
            let (wi, bi) = store.add_conv(&format!("feat.{l}"), w, c, 3, gain, &mut rng);
            layers.push((wi, bi, if l == 0 { 1 } else { 2 }));
            c = w;
        }
        FeatureNet { store, seed, layers }
    }

    /// Replaces the weights with ones stored under `prefix`.
    pub fn load_weights(&mut self, c: &Container, prefix: &str) -> Result<()> {
        self.store.read(c, prefix)
    }

    /// Feature maps at the five levels (full, ½, ¼, ⅛, 1/16 resolution).
    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Vec<Var> {
        let mut h = x;
        let mut out = Vec::with_capacity(FEATURE_LEVELS);
        for &(w, b, stride) in &self.layers {
            let (wv, bv) = (g.param(&self.store, w, false), g.param(&self.store, b, false));
            let y = g.conv(h, wv, Some(bv), stride, 1);
            h = g.leaky_relu(y, SLOPE);
            out.push(h);
        }
        out
    }

    pub fn widths() -> [usize; FEATURE_LEVELS] {
        FEATURE_WIDTHS
    }
}

/// Perceptual distance: summed per-level mean absolute feature difference.
#[derive(Clone, Debug)]
pub struct Perceptual<T> {
    pub net: FeatureNet<T>,
}

impl<T: Real> Perceptual<T> {
    pub fn new(net: FeatureNet<T>) -> Self {
        Perceptual { net }
    }

    /// Features of fixed target images (no gradient).
    pub fn target_features(&self, targets: &[&Image]) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let x = g.input(images_to_tensor(targets, INPUT_SHIFT)?);
        let f = self.net.features(&mut g, x);
        Ok(f.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Adds the perceptual loss of `x` (an already shifted image batch)
    /// against precomputed target features.
    pub fn loss(&self, g: &mut Graph<T>, x: Var, targets: &[Tensor<T>]) -> Var {
        let f = self.net.features(g, x);
        let terms: Vec<(Var, f64)> = f.iter().zip(targets).map(|(&v, t)| (g.l1(v, &t.data), 1.0)).collect();
        g.weighted_sum(&terms)
    }

    /// Perceptual distance between two image batches.
    pub fn distance(&self, a: &[&Image], b: &[&Image]) -> Result<f64> {
        let targets = self.target_features(b)?;
        let mut g = Graph::new();
        let x = g.input(images_to_tensor(a, INPUT_SHIFT)?);
        let l = self.loss(&mut g, x, &targets);
        Ok(g.scalar(l).f64())
    }
}

/// Multi-head discriminator: a frozen feature backbone with one small
/// trainable convolutional head per feature level.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub backbone: FeatureNet<T>,
    pub heads: ParamStore<T>,
    ids: Vec<[ParamId; 4]>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(backbone: FeatureNet<T>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + SLOPE * SLOPE)).sqrt();
        let mut heads = ParamStore::new();
        let ids = FEATURE_WIDTHS
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                let (w1, b1) = heads.add_conv(&format!("head.{l}.conv"), HEAD_WIDTH, c, 3, gain, &mut rng);
                let (w2, b2) = heads.add_conv(&format!("head.{l}.out"), 1, HEAD_WIDTH, 1, 1.0, &mut rng);
                [w1, b1, w2, b2]
            })
            .collect();
        Discriminator { backbone, heads, ids }
    }

    /// One logit map per head for a shifted image batch.
    pub fn logits(&self, g: &mut Graph<T>, x: Var, train_heads: bool) -> Vec<Var> {
        let f = self.backbone.features(g, x);
        f.iter()
            .zip(&self.ids)
            .map(|(&h, ids)| {
                let p: Vec<Var> = ids.iter().map(|&i| g.param(&self.heads, i, train_heads)).collect();
                let y = g.conv(h, p[0], Some(p[1]), 1, 1);
                let y = g.leaky_relu(y, SLOPE);
                g.conv(y, p[2], Some(p[3]), 1, 0)
            })
            .collect()
    }

    /// Non-saturating generator loss `Σ_heads mean softplus(−D(fake))`
    /// with frozen heads.
    pub fn generator_loss(&self, g: &mut Graph<T>, fake: Var) -> Var {
        let logits = self.logits(g, fake, false);
        let terms: Vec<(Var, f64)> = logits.iter().map(|&l| (g.softplus_mean(l, -1.0), 1.0)).collect();
        g.weighted_sum(&terms)
    }

    /// `Σ_heads ½[mean softplus(−D(real)) + mean softplus(D(fake))]` with
    /// trainable heads; both inputs are constants.
    pub fn discriminator_loss(&self, g: &mut Graph<T>, real: Var, fake: Var) -> Var {
        let lr = self.logits(g, real, true);
        let lf = self.logits(g, fake, true);
        let mut terms = Vec::with_capacity(2 * FEATURE_LEVELS);
        for (&r, &f) in lr.iter().zip(&lf) {
            terms.push((g.softplus_mean(r, -1.0), 0.5));
            terms.push((g.softplus_mean(f, 1.0), 0.5));
        }
        g.weighted_sum(&terms)
    }
}
