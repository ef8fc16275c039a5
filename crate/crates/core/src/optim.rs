//! AdamW with decoupled weight decay and per-group learning rates.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::pipeline::{ParamGroup, ParamMut};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr_head: f64,
    pub lr_adapter: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_head: 1e-3,
            lr_adapter: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Head => self.lr_head,
            ParamGroup::Adapter => self.lr_adapter,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update on every parameter. Parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [ParamMut<'_>]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for p in params.iter_mut() {
            let n = p.tensor.len();
            let grad = p.tensor.take_grad().unwrap_or_else(|| vec![0.0; n]);
            let mom = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            if mom.m.len() != n || grad.len() != n {
                return Err(Error::shape("adamw_step", p.tensor.shape(), &[mom.m.len()]));
            }
            adamw_update(
                p.tensor.data_mut(),
                &grad,
                mom,
                c.lr(p.group),
                c.weight_decay,
                c.beta1,
                c.beta2,
                c.eps,
                bc1,
                bc2,
            );
        }
        Ok(())
    }
}

/// Decoupled decay `θ ← θ·(1 − lr·wd)` followed by the bias-corrected Adam step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    mom: &mut Moments,
    lr: f64,
    wd: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    let decay = 1.0 - lr * wd;
    for i in 0..param.len() {
        let g = grad[i];
        param[i] *= decay;
        mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g;
        mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g * g;
        let m_hat = mom.m[i] / bc1;
        let v_hat = mom.v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [ParamMut<'_>], max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && total > max_norm {
        let scale = max_norm / total;
        for p in params.iter_mut() {
            if let Some(g) = p.tensor.take_grad() {
                let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                p.tensor.accumulate_grad(&scaled);
            }
        }
    }
    total
}
