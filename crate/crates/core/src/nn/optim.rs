use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nn::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    SgdMomentum {
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Apply weight decay to biases and normalization parameters too.
    #[serde(default)]
    pub decay_all: bool,
    /// Halve the learning rate every this many steps.
    #[serde(default)]
    pub halve_every: Option<usize>,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            method: OptimizerKind::SgdMomentum { momentum },
            learning_rate,
            weight_decay,
            decay_all: false,
            halve_every: None,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            method: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            learning_rate,
            weight_decay: 0.0,
            decay_all: false,
            halve_every: None,
        }
    }

    /// Learning rate used for the update with 0-based index `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.halve_every {
            Some(n) if n > 0 => self.learning_rate * 0.5f64.powi((step / n) as i32),
            _ => self.learning_rate,
        }
    }
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    step_count: usize,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .params()
            .iter()
            .map(|p| vec![0.0; p.value.numel()])
            .collect();
        let second = match config.method {
            OptimizerKind::Adam { .. } => zeros.clone(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        OptimizerState {
            config,
            step_count: 0,
            first: zeros,
            second,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// SGD: `v ← μv + (g + λθ)`, `θ ← θ − lr·v`.
    /// Adam: bias-corrected first/second moments.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(shape_err!(
                "optimizer holds {} buffers for {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            ));
        }
        for (p, g) in params.params().iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(shape_err!(
                    "gradient {:?} for parameter {} {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                ));
            }
        }
        let lr = self.config.lr_at(self.step_count);
        self.step_count += 1;
        let t = self.step_count as i32;
        let cfg = &self.config;
        for (i, (p, g)) in params.params_mut().iter_mut().zip(grads).enumerate() {
            let wd = if p.decay || cfg.decay_all {
                cfg.weight_decay
            } else {
                0.0
            };
            let theta = p.value.data_mut();
            match cfg.method {
                OptimizerKind::SgdMomentum { momentum } => {
                    for ((th, v), gi) in theta.iter_mut().zip(&mut self.first[i]).zip(g.data()) {
                        *v = momentum * *v + (gi + wd * *th);
                        *th -= lr * *v;
                    }
                }
                OptimizerKind::Adam {
                    beta1,
                    beta2,
                    epsilon,
                } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((th, m), v), gi) in theta
                        .iter_mut()
                        .zip(&mut self.first[i])
                        .zip(&mut self.second[i])
                        .zip(g.data())
                    {
                        let gi = gi + wd * *th;
                        *m = beta1 * *m + (1.0 - beta1) * gi;
                        *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                        *th -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
