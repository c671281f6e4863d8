//! Adam / AdamW with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Weight decay added to the gradient before the moment update.
    Adam,
    /// Decoupled weight decay applied directly to the parameters.
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Global gradient-norm threshold; `None` disables clipping.
    pub clip: Option<f32>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip: Some(1.0),
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f32) -> f64 {
    let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm as f64 && norm > 0.0 {
        let factor = (max_norm as f64 / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            config,
            first: params.tensors().iter().map(zeros).collect(),
            second: params.tensors().iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.config.lr = lr;
    }

    /// One update of every parameter in `params` from `grads` (same order).
    pub fn step(&mut self, params: &mut ParamStore, mut grads: Vec<Tensor>) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidInput(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (name, g) in params.names().iter().zip(&grads) {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        if let Some(clip) = self.config.clip {
            clip_global_norm(&mut grads, clip);
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - (c.beta1 as f64).powi(t);
        let bc2 = 1.0 - (c.beta2 as f64).powi(t);
        let step_size = (c.lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;

        for (i, g) in grads.iter().enumerate() {
            let p = params.tensors_mut()[i].data_mut();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for j in 0..p.len() {
                let mut gj = g.data()[j];
                if c.kind == OptimizerKind::Adam && c.weight_decay != 0.0 {
                    gj += c.weight_decay * p[j];
                }
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let denom = v[j].sqrt() / bc2_sqrt + c.eps;
                if c.kind == OptimizerKind::AdamW && c.weight_decay != 0.0 {
                    p[j] -= c.lr * c.weight_decay * p[j];
                }
                p[j] -= step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine annealing to zero.
pub fn warmup_cosine(step: usize, warmup: usize, total: usize, max_lr: f32) -> f32 {
    if warmup > 0 && step < warmup {
        return max_lr * (step + 1) as f32 / warmup as f32;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f32 / span as f32).min(1.0);
    0.5 * max_lr * (1.0 + (std::f32::consts::PI * progress).cos())
}
