use serde::{Deserialize, Serialize};

use super::Param;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Cosine decay `lr · cos(7πk / 16K)` over the run.
    pub cosine: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.03,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            cosine: true,
        }
    }
}

pub fn cosine_lr(base: f64, iter: usize, total: usize) -> f64 {
    base * (7.0 * std::f64::consts::PI * iter as f64 / (16.0 * total as f64)).cos()
}

/// SGD with (Nesterov) momentum and decoupled-from-bias weight decay, PyTorch
/// update semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    pub momentum_buffers: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            momentum_buffers: Vec::new(),
        }
    }

    pub fn lr_at(&self, iter: usize, total: usize) -> f64 {
        if self.config.cosine {
            cosine_lr(self.config.lr, iter, total)
        } else {
            self.config.lr
        }
    }

    /// Applies one update to `params` (always passed in the same order) and
    /// clears their gradients.
    pub fn step(&mut self, params: Vec<&mut Param>, lr: f64) {
        if self.momentum_buffers.len() != params.len() {
            self.momentum_buffers = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        let lr = lr as f32;
        let mu = self.config.momentum as f32;
        let wd = self.config.weight_decay as f32;
        for (param, buf) in params.into_iter().zip(&mut self.momentum_buffers) {
            let decay = if param.decay { wd } else { 0.0 };
            for ((w, g), m) in param.value.iter_mut().zip(param.grad.iter_mut()).zip(buf.iter_mut()) {
                let d = *g + decay * *w;
                *m = mu * *m + d;
                let update = if self.config.nesterov { d + mu * *m } else { *m };
                *w -= lr * update;
                *g = 0.0;
            }
        }
    }
}
