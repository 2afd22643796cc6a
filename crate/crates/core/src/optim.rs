//! AdamW and the linear warmup/decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Preset;
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let paper = Self {
            peak_lr: 2e-5,
            batch_size: 16,
            epochs: 4,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        };
        match preset {
            Preset::Paper => paper,
            // From-scratch weights need a far larger step than fine-tuning.
            Preset::Test => Self {
                peak_lr: 1e-3,
                epochs: 25,
                ..paper
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("train.warmup_fraction", "must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.betas", "must be in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be positive"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.steps_per_epoch(samples) * self.epochs
    }
}

/// `round(fraction·total)`, capped so at least one decay step remains.
pub fn warmup_steps(total_steps: usize, fraction: f64) -> usize {
    let w = (fraction * total_steps as f64).round() as usize;
    w.min(total_steps.saturating_sub(1))
}

/// Linear 0 → peak over `[0, warmup]`, then peak → 0 over `[warmup, total]`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} is past the last step {total_steps}"
        )));
    }
    let w = warmup_steps(total_steps, cfg.warmup_fraction);
    let peak = cfg.peak_lr;
    Ok(if step < w {
        peak * (step as f64 / w as f64)
    } else {
        // The fraction is formed first so that it is exactly 1 at the peak.
        peak * ((total_steps - step) as f64 / (total_steps - w) as f64)
    })
}

/// Adam moments for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    step: u64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![F::zero(); p.value.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Decoupled decay `θ −= lr·wd·θ`, then the bias-corrected Adam step on
    /// the accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64, cfg: &TrainConfig) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::shape("adamw", &[store.len()], &[self.m.len()]));
        }
        for (i, (_, p)) in store.iter().enumerate() {
            if p.value.len() != self.m[i].len() {
                return Err(Error::shape("adamw", p.value.shape(), &[self.m[i].len()]));
            }
            if !p.grad.all_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lit = F::lit;
        let (b1f, b2f, eps) = (lit(b1), lit(b2), lit(cfg.eps));
        let decay = lit(1.0 - lr * cfg.weight_decay);
        let (step_size, c2f) = (lit(lr / c1), lit(c2));
        for ((param, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = param.grad.data().to_vec();
            for (((x, g), m), v) in param.value.data_mut().iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                *x = *x * decay;
                *m = b1f * *m + (F::one() - b1f) * g;
                *v = b2f * *v + (F::one() - b2f) * g * g;
                let denom = (*v / c2f).sqrt() + eps;
                *x = *x - step_size * *m / denom;
            }
        }
        Ok(())
    }
}
