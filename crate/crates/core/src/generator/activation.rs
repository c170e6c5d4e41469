use serde::{Deserialize, Serialize};

use super::{CHANNELS, CH_OFFSET, CH_OPACITY, CH_ROTATION, CH_SCALE, CH_SH};
use crate::error::{Error, Result};
use crate::head_model::{HeadModel, UvChart, Vec3};
use crate::nn::Real;
use crate::splat::{GaussianPrimitive, PrimitiveGrad, SH_LEN};

/// Quaternions shorter than this fall back to identity.
pub const QUAT_EPS: f64 = 1e-8;

/// Output activation ranges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationConfig {
    /// `Δx = pos_range · tanh(raw)`.
    pub pos_range: f64,
    /// `s = s_min + s_range · logistic(raw)`.
    pub s_min: f64,
    pub s_range: f64,
}

impl ActivationConfig {
    /// `pos_range` = 2× mean mesh edge, `s_range` = 2× texel spacing.
    pub fn for_model(model: &HeadModel, chart: &UvChart) -> Self {
        ActivationConfig {
            pos_range: 2.0 * model.mean_edge_length(),
            s_min: 1e-4,
            s_range: 2.0 * chart.texel_spacing(model),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.pos_range) && ok(self.s_min) && ok(self.s_range) {
            Ok(())
        } else {
            Err(Error::Config(format!("activation ranges must be positive: {self:?}")))
        }
    }

    /// Scale produced by a zero raw value.
    pub fn neutral_scale(&self) -> f64 {
        self.s_min + 0.5 * self.s_range
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Turns one raw `[59, texels]` map (channel-major) into per-texel primitives.
pub fn activate_and_split<T: Real>(raw: &[T], cfg: &ActivationConfig) -> Vec<GaussianPrimitive> {
    assert_eq!(raw.len() % CHANNELS, 0, "raw map must have {CHANNELS} channels");
    let n = raw.len() / CHANNELS;
    let at = |ch: usize, t: usize| raw[ch * n + t].f64();
    (0..n)
        .map(|t| {
            let offset = Vec3::from_fn(|i, _| cfg.pos_range * at(CH_OFFSET + i, t).tanh());
            let q = [0, 1, 2, 3].map(|i| at(CH_ROTATION + i, t));
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let rotation = if norm < QUAT_EPS || !norm.is_finite() {
                [1.0, 0.0, 0.0, 0.0]
            } else {
                let s = if q[0] < 0.0 { -1.0 / norm } else { 1.0 / norm };
                q.map(|v| v * s)
            };
            let scale = Vec3::from_fn(|i, _| cfg.s_min + cfg.s_range * logistic(at(CH_SCALE + i, t)));
            let mut sh = [0.0; SH_LEN];
            for (k, v) in sh.iter_mut().enumerate() {
                *v = at(CH_SH + k, t);
            }
            GaussianPrimitive { offset, opacity: logistic(at(CH_OPACITY, t)), rotation, scale, sh }
        })
        .collect()
}

/// Backward of [`activate_and_split`]: gradient w.r.t. the raw map.
pub fn activation_backward<T: Real>(raw: &[T], grads: &[PrimitiveGrad], cfg: &ActivationConfig) -> Vec<T> {
    let n = raw.len() / CHANNELS;
    assert_eq!(grads.len(), n, "one gradient per texel");
    let at = |ch: usize, t: usize| raw[ch * n + t].f64();
    let mut out = vec![T::ZERO; raw.len()];
    for (t, g) in grads.iter().enumerate() {
        let mut set = |ch: usize, v: f64| out[ch * n + t] = T::of(v);
        for i in 0..3 {
            let th = at(CH_OFFSET + i, t).tanh();
            set(CH_OFFSET + i, g.offset[i] * cfg.pos_range * (1.0 - th * th));
            let s = logistic(at(CH_SCALE + i, t));
            set(CH_SCALE + i, g.scale[i] * cfg.s_range * s * (1.0 - s));
        }
        let a = logistic(at(CH_OPACITY, t));
        set(CH_OPACITY, g.opacity * a * (1.0 - a));
        let q = [0, 1, 2, 3].map(|i| at(CH_ROTATION + i, t));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= QUAT_EPS && norm.is_finite() {
            // ω = σ·q/|q| with σ = ±1 fixed by the sign of q_w
            let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
            let u = q.map(|v| v / norm);
            let dot: f64 = (0..4).map(|i| u[i] * g.rotation[i]).sum();
            for i in 0..4 {
                set(CH_ROTATION + i, sign * (g.rotation[i] - u[i] * dot) / norm);
            }
        }
        for k in 0..SH_LEN {
            set(CH_SH + k, g.sh[k]);
        }
    }
    out
}
