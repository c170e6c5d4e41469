//! Training and inversion objectives: photometric terms (L1, perceptual,
//! SSIM), primitive regularisers, the multi-head adversarial loss and the
//! inversion anchor.

mod features;
mod ssim;
#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Graph, Real};
use crate::splat::{GaussianPrimitive, PrimitiveGrad};

pub use features::{
    images_to_tensor, tensor_item_to_image, Discriminator, FeatureNet, Perceptual, FEATURE_LEVELS, INPUT_SHIFT,
};
pub use ssim::{ssim, ssim_with_grad, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub pos: f64,
    pub scal: f64,
    pub l1: f64,
    pub vgg: f64,
    pub ssim: f64,
    pub gan: f64,
    pub greg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { pos: 1.0, scal: 0.1, l1: 5.0, vgg: 0.1, ssim: 0.2, gan: 0.01, greg: 5.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.pos, self.scal, self.l1, self.vgg, self.ssim, self.gan, self.greg];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")))
        }
    }

    /// Every weight multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        LossWeights {
            pos: self.pos * k,
            scal: self.scal * k,
            l1: self.l1 * k,
            vgg: self.vgg * k,
            ssim: self.ssim * k,
            gan: self.gan * k,
            greg: self.greg * k,
        }
    }
}

/// Unweighted loss components. `dssim` is `1 − SSIM`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l1: f64,
    pub vgg: f64,
    pub dssim: f64,
    pub pos: f64,
    pub scal: f64,
    pub gan_g: f64,
    pub greg: f64,
}

impl LossComponents {
    pub fn photometric(&self, w: &LossWeights) -> f64 {
        w.l1 * self.l1 + w.vgg * self.vgg + w.ssim * self.dssim
    }

    /// `L_photo + λ_pos·L_pos + λ_scal·L_scal + λ_gan·L_gan`.
    pub fn training_total(&self, w: &LossWeights) -> f64 {
        self.photometric(w) + w.pos * self.pos + w.scal * self.scal + w.gan * self.gan_g
    }

    /// `L_photo + λ_pos·L_pos + λ_scal·L_scal + λ_GReg·L_GReg`.
    pub fn inversion_total(&self, w: &LossWeights) -> f64 {
        self.photometric(w) + w.pos * self.pos + w.scal * self.scal + w.greg * self.greg
    }

    /// Component-wise sum (for batch averaging).
    pub fn add(&mut self, o: &LossComponents) {
        self.l1 += o.l1;
        self.vgg += o.vgg;
        self.dssim += o.dssim;
        self.pos += o.pos;
        self.scal += o.scal;
        self.gan_g += o.gan_g;
        self.greg += o.greg;
    }

    pub fn scale(&mut self, k: f64) {
        for v in [
            &mut self.l1,
            &mut self.vgg,
            &mut self.dssim,
            &mut self.pos,
            &mut self.scal,
            &mut self.gan_g,
            &mut self.greg,
        ] {
            *v *= k;
        }
    }

    /// Named components, in a fixed order, for structured logs.
    pub fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("l1", self.l1),
            ("vgg", self.vgg),
            ("dssim", self.dssim),
            ("pos", self.pos),
            ("scal", self.scal),
            ("gan_g", self.gan_g),
            ("greg", self.greg),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, v)| v.is_finite())
    }
}

/// `mean |a − b|` and its gradient with respect to `a`.
pub fn l1_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    if !a.same_shape(b) {
        return Err(Error::Shape("l1: image shapes differ".into()));
    }
    let n = a.data.len() as f64;
    let mut g = Image::new(a.height, a.width, a.channels);
    let mut s = 0.0;
    for ((x, y), d) in a.data.iter().zip(&b.data).zip(g.data.iter_mut()) {
        s += (x - y).abs();
        *d = if x > y {
            1.0 / n
        } else if x < y {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((s / n, g))
}

/// Optional learned/fixed networks entering the image-space loss.
pub struct ImageCritics<'a, T> {
    pub perceptual: Option<&'a Perceptual<T>>,
    /// Discriminator for the generator's adversarial term; `None` disables it.
    pub discriminator: Option<&'a Discriminator<T>>,
}

impl<T> Default for ImageCritics<'_, T> {
    fn default() -> Self {
        ImageCritics { perceptual: None, discriminator: None }
    }
}

/// Photometric (and optionally adversarial) loss of one render against its
/// target. Returns the unweighted components and the gradient of
/// `λ_L1·L1 + λ_VGG·L_VGG + λ_SSIM·(1−SSIM) + λ_gan·L_gan` w.r.t. the render.
pub fn image_loss<T: Real>(
    render: &Image,
    target: &Image,
    w: &LossWeights,
    critics: &ImageCritics<T>,
) -> Result<(LossComponents, Image)> {
    let (l1, gl1) = l1_with_grad(render, target)?;
    let (s, gs) = ssim_with_grad(render, target)?;
    let mut comp = LossComponents { l1, dssim: 1.0 - s, ..Default::default() };
    let mut grad = Image::new(render.height, render.width, render.channels);
    for ((g, a), b) in grad.data.iter_mut().zip(&gl1.data).zip(&gs.data) {
        *g = w.l1 * a - w.ssim * b;
    }
    let use_vgg = critics.perceptual.filter(|_| w.vgg > 0.0);
    let use_gan = critics.discriminator.filter(|_| w.gan > 0.0);
    if use_vgg.is_some() || use_gan.is_some() {
        let mut g = Graph::<T>::new();
        let x = g.leaf(images_to_tensor(&[render], INPUT_SHIFT)?);
        let mut terms = Vec::new();
        let mut vgg_var = None;
        let mut gan_var = None;
        if let Some(p) = use_vgg {
            let targets = p.target_features(&[target])?;
            let v = p.loss(&mut g, x, &targets);
            terms.push((v, w.vgg));
            vgg_var = Some(v);
        }
        if let Some(d) = use_gan {
            let v = d.generator_loss(&mut g, x);
            terms.push((v, w.gan));
            gan_var = Some(v);
        }
        let total = g.weighted_sum(&terms);
        let grads = g.backward(&[(total, vec![T::ONE])]);
        if let Some(v) = vgg_var {
            comp.vgg = g.scalar(v).f64();
        }
        if let Some(v) = gan_var {
            comp.gan_g = g.scalar(v).f64();
        }
        let gx = grads.get(x).expect("image gradient");
        let gimg = tensor_item_to_image(gx, g.value(x).shape, 0);
        for (a, b) in grad.data.iter_mut().zip(&gimg.data) {
            *a += b;
        }
    } else if let Some(p) = critics.perceptual {
        // weight zero: still report the component
        comp.vgg = p.distance(&[render], &[target])?;
    }
    Ok((comp, grad))
}

/// `L_pos = mean |Δx|` and `L_scal = mean |s − s_neutral|` over valid texels
/// and coordinates.
pub fn primitive_regularizers(prims: &[GaussianPrimitive], valid: &[bool], neutral_scale: f64) -> (f64, f64) {
    let mut pos = 0.0;
    let mut scal = 0.0;
    let mut n = 0usize;
    for (p, _) in prims.iter().zip(valid).filter(|(_, v)| **v) {
        pos += p.offset.iter().map(|v| v.abs()).sum::<f64>();
        scal += p.scale.iter().map(|s| (s - neutral_scale).abs()).sum::<f64>();
        n += 3;
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    (pos / n as f64, scal / n as f64)
}

/// Adds `w_pos·∂L_pos + w_scal·∂L_scal` to per-texel gradients.
pub fn regularizer_backward(
    prims: &[GaussianPrimitive],
    valid: &[bool],
    neutral_scale: f64,
    w_pos: f64,
    w_scal: f64,
    grads: &mut [PrimitiveGrad],
) {
    let n = 3 * valid.iter().filter(|v| **v).count();
    if n == 0 {
        return;
    }
    let sgn = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let k = 1.0 / n as f64;
    for ((p, g), _) in prims.iter().zip(grads.iter_mut()).zip(valid).filter(|(_, v)| **v) {
        for i in 0..3 {
            g.offset[i] += w_pos * k * sgn(p.offset[i]);
            g.scale[i] += w_scal * k * sgn(p.scale[i] - neutral_scale);
        }
    }
}

/// Inversion anchor `mean |raw − raw_anchor|` and its gradient w.r.t. `raw`.
pub fn anchor_loss<T: Real>(raw: &[T], anchor: &[T]) -> (f64, Vec<T>) {
    assert_eq!(raw.len(), anchor.len(), "anchor map size");
    let n = raw.len() as f64;
    let k = T::of(1.0 / n);
    let mut s = 0.0;
    let g = raw
        .iter()
        .zip(anchor)
        .map(|(&a, &b)| {
            s += (a - b).abs().f64();
            if a > b {
                k
            } else if a < b {
                -k
            } else {
                T::ZERO
            }
        })
        .collect();
    (s / n, g)
}
