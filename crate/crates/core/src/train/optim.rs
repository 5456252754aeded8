use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub epochs: usize,
    /// Cosine period in epochs.
    pub t_max: f64,
    pub batch_size: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lr: 3e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 50,
            epochs: 30,
            t_max: 30.0,
            batch_size: 16,
        }
    }
}

impl Hyperparams {
    /// The full-scale schedule: lr 1e-3, 100 epochs, 500 warmup steps. The
    /// toy default raises lr to make up for the shorter schedule.
    pub fn paper_scale() -> Self {
        Hyperparams { lr: 1e-3, warmup_steps: 500, epochs: 100, t_max: 100.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr", self.lr), ("eps", self.eps), ("t_max", self.t_max)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.warmup_steps == 0 {
            return Err(Error::invalid("warmup_steps must be at least 1"));
        }
        Ok(())
    }
}

/// Linear warmup over the first `warmup_steps` steps, then cosine annealing
/// by epoch: `lr·½(1 + cos(π·epoch/t_max))`.
pub fn lr_at(step: u64, epoch: f64, hp: &Hyperparams) -> f64 {
    if step < hp.warmup_steps {
        hp.lr * (step + 1) as f64 / hp.warmup_steps as f64
    } else {
        hp.lr * 0.5 * (1.0 + (PI * epoch / hp.t_max).cos())
    }
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One decoupled-weight-decay Adam update in place; `t` is the 1-based step.
pub fn adamw_step(p: &mut [f64], g: &[f64], moments: &mut Moments, t: u64, lr: f64, hp: &Hyperparams) {
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    for i in 0..p.len() {
        let m = hp.beta1 * moments.m[i] + (1.0 - hp.beta1) * g[i];
        let v = hp.beta2 * moments.v[i] + (1.0 - hp.beta2) * g[i] * g[i];
        moments.m[i] = m;
        moments.v[i] = v;
        let update = (m / c1) / ((v / c2).sqrt() + hp.eps);
        p[i] = p[i] - lr * update - lr * hp.weight_decay * p[i];
    }
}

/// AdamW over a detector's trainable parameters; frozen parameters never
/// get moment state.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies `grads` (by parameter name) to `model`. Every trainable
    /// parameter is updated, with a zero gradient when absent; gradients for
    /// frozen parameters are rejected.
    pub fn apply(
        &mut self,
        model: &mut Detector,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        hp: &Hyperparams,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = model.params().get(name)?;
            if !p.requires_grad() {
                return Err(Error::invalid(format!("gradient supplied for frozen parameter '{name}'")));
            }
            if g.shape() != p.shape() {
                return Err(Error::shape(format!("gradient {:?} for '{name}' of shape {:?}", g.shape(), p.shape())));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in '{name}' at entry {i}")));
            }
        }
        self.step += 1;
        let trainable: Vec<(String, Tensor)> = model
            .params()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        for (name, p) in trainable {
            let zeros;
            let g = match grads.get(&name) {
                Some(g) => g.data(),
                None => {
                    zeros = vec![0.0; p.numel()];
                    &zeros
                }
            };
            let moments = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; p.numel()], v: vec![0.0; p.numel()] });
            let mut data = p.data().to_vec();
            adamw_step(&mut data, g, moments, self.step, lr, hp);
            model.set_param(&name, Tensor::new(p.shape(), data)?)?;
        }
        Ok(())
    }
}
