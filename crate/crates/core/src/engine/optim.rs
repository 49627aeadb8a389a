use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelParameters;
use crate::tensor::Gradients;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    Cosine,
    Constant,
}

/// Per-step learning rate: linear warmup, then cosine decay to `min_lr`
/// (or constant).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_epochs: usize,
    pub min_lr: f64,
    pub decay: DecayKind,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 1e-3,
            warmup_epochs: 1,
            min_lr: 1e-5,
            decay: DecayKind::Cosine,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite()) || !(self.min_lr >= 0.0 && self.min_lr <= self.base) {
            return Err(Error::invalid(format!(
                "learning rate must satisfy 0 <= min_lr <= base, got {}/{}",
                self.min_lr, self.base
            )));
        }
        Ok(())
    }

    /// Rate for 0-based `step` of a run lasting `epochs` epochs.
    pub fn at(&self, step: usize, steps_per_epoch: usize, epochs: usize) -> f64 {
        let warm = self.warmup_epochs.min(epochs.saturating_sub(1)) * steps_per_epoch;
        let total = epochs * steps_per_epoch;
        if step < warm {
            return self.base * (step + 1) as f64 / warm as f64;
        }
        match self.decay {
            DecayKind::Constant => self.base,
            DecayKind::Cosine => {
                let span = total.saturating_sub(warm).max(1) as f64;
                let t = ((step - warm) as f64 / span).min(1.0);
                self.min_lr + 0.5 * (self.base - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Adam with decoupled weight decay. Decay applies to linear weights
/// (names ending in `.w`), not to biases, norms or embeddings. Moments and step
/// counts are tracked per parameter so a re-initialized head starts fresh.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: ModelParameters,
    pub v: ModelParameters,
    pub steps: BTreeMap<String, u64>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: ModelParameters::new(),
            v: ModelParameters::new(),
            steps: BTreeMap::new(),
        }
    }

    /// Forgets the state of every parameter whose name starts with `prefix`.
    pub fn reset(&mut self, prefix: &str) {
        self.m.retain(|k| !k.starts_with(prefix));
        self.v.retain(|k| !k.starts_with(prefix));
        self.steps.retain(|k, _| !k.starts_with(prefix));
    }

    /// Updates every parameter that has a gradient and passes `trainable`.
    pub fn step(
        &mut self,
        params: &mut ModelParameters,
        grads: &Gradients<f32>,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let mut grads: Vec<_> = grads.params().filter(|(n, _)| trainable(n)).collect();
        grads.sort_by(|a, b| a.0.cmp(b.0));
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
            if g.data.len() != p.data.len() {
                return Err(Error::shape(format!("gradient shape for {name}")));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            let shape = p.shape.clone();
            let n = p.data.len();
            if self.m.get(name).is_none() {
                self.m.insert(name, shape.clone(), vec![0.0; n])?;
                self.v.insert(name, shape.clone(), vec![0.0; n])?;
            }
            let t = self.steps.entry(name.to_string()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            let decay = if name.ends_with(".w") { self.weight_decay } else { 0.0 };
            let m = &mut self.m.get_mut(name).expect("inserted above").data;
            let v = &mut self.v.get_mut(name).expect("inserted above").data;
            for i in 0..n {
                let gi = g.data[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let x = p.data[i] as f64;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps) + decay * x;
                p.data[i] = (x - lr * update) as f32;
            }
        }
        Ok(())
    }
}
