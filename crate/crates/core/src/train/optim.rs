//! Adam with a step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::Param;
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.7,
            decay_every: 80,
        }
    }
}

impl AdamConfig {
    /// Learning rate after `epochs_done` completed epochs.
    pub fn lr_at(&self, epochs_done: usize) -> f64 {
        let steps = epochs_done.checked_div(self.decay_every).unwrap_or(0);
        self.lr * self.decay.powi(steps as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            bail!(Config, "optimizer needs lr > 0 and betas in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.decay > 0.0) {
            bail!(Config, "optimizer needs eps > 0 and decay > 0");
        }
        Ok(())
    }
}

/// Moments and step count, one pair of moment arrays per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Vec<Float>>,
    pub v: Vec<Vec<Float>>,
}

impl OptimState {
    pub fn new(params: &[Param]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update at learning rate `lr`.
pub fn adam_step(
    params: &mut [Param],
    grads: &[Vec<Float>],
    state: &mut OptimState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        bail!(
            Contract,
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        );
    }
    for (p, g) in params.iter().zip(grads) {
        if g.len() != p.value.numel() {
            bail!(
                Dimension,
                "gradient of `{}` has {} values for {}",
                p.name,
                g.len(),
                p.value.numel()
            );
        }
        if g.iter().any(|v| !v.is_finite()) {
            bail!(Divergence, "non-finite gradient in `{}`", p.name);
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &g), m), v) in p.value.values_mut().iter_mut().zip(g).zip(m).zip(v) {
            let g = g as f64;
            *m = (b1 * *m as f64 + (1.0 - b1) * g) as Float;
            *v = (b2 * *v as f64 + (1.0 - b2) * g * g) as Float;
            let mh = *m as f64 / c1;
            let vh = *v as f64 / c2;
            *w -= (lr * mh / (vh.sqrt() + cfg.eps)) as Float;
        }
    }
    Ok(())
}
