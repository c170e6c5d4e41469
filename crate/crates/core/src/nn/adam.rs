use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::container::Container;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with per-parameter step counters, so parameters that only start
/// receiving gradients later get a correct bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    steps: Vec<u64>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let m: Vec<Vec<T>> = (0..store.len()).map(|i| vec![T::ZERO; store.get(i).len()]).collect();
        Adam { config, v: m.clone(), m, steps: vec![0; store.len()] }
    }

    /// One update of every parameter that has a gradient, with learning
    /// rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            self.steps[id] += 1;
            let t = self.steps[id] as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let step = T::of(lr / c1);
            let inv_c2 = T::of(1.0 / c2);
            let eps = T::of(self.config.eps);
            let (tb1, tb2) = (T::of(b1), T::of(b2));
            let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
            let p = &mut store.get_mut(id).data;
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for j in 0..p.len() {
                m[j] = tb1 * m[j] + ob1 * g[j];
                v[j] = tb2 * v[j] + ob2 * g[j] * g[j];
                p[j] -= step * m[j] / ((v[j] * inv_c2).sqrt() + eps);
            }
        }
    }

    pub fn write(&self, c: &mut Container, prefix: &str) -> Result<()> {
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            T::put(c, &format!("{prefix}m.{i}"), &[m.len()], m)?;
            T::put(c, &format!("{prefix}v.{i}"), &[v.len()], v)?;
        }
        let steps: Vec<u32> = self.steps.iter().map(|&s| s as u32).collect();
        c.put_u32(&format!("{prefix}steps"), &[steps.len()], steps)
    }

    pub fn read(&mut self, c: &Container, prefix: &str) -> Result<()> {
        for i in 0..self.m.len() {
            let (_, m) = T::get(c, &format!("{prefix}m.{i}"))?;
            let (_, v) = T::get(c, &format!("{prefix}v.{i}"))?;
            if m.len() != self.m[i].len() || v.len() != self.v[i].len() {
                return Err(Error::Shape(format!("optimizer state {i} has the wrong size")));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        let (_, steps) = c.get_u32(&format!("{prefix}steps"))?;
        if steps.len() != self.steps.len() {
            return Err(Error::Shape("optimizer step counters".into()));
        }
        self.steps = steps.into_iter().map(u64::from).collect();
        Ok(())
    }
}
