//! SGD with momentum, Adam, and the cosine-annealed learning rate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::backbone::{Grads, ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    #[serde(default)]
    pub weight_decay: f64,
    /// SGD momentum.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_momentum() -> f64 {
    0.9
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

impl OptimizerConfig {
    /// SGD, momentum 0.9, weight decay 1e-4.
    pub fn sgd() -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            weight_decay: 1e-4,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    /// Adam with the conventional (0.9, 0.999, 1e-8) and no weight decay.
    pub fn adam() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            weight_decay: 0.0,
            ..Self::sgd()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Configuration(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state. Frozen parameters (`trainable = false`) are skipped
/// entirely, weight decay included.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: i32,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.data.len()]).collect();
        Self {
            config,
            first: zeros(),
            second: if config.kind == OptimizerKind::Adam {
                zeros()
            } else {
                Vec::new()
            },
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        self.steps += 1;
        let lr = T::of(lr);
        let wd = T::of(self.config.weight_decay);
        let c = &self.config;
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let g = &grads.bufs[i];
            match c.kind {
                OptimizerKind::SgdMomentum => {
                    let mu = T::of(c.momentum);
                    for ((w, &gi), buf) in p.data.iter_mut().zip(g).zip(self.first[i].iter_mut()) {
                        let d = gi + wd * *w;
                        *buf = mu * *buf + d;
                        *w -= lr * *buf;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
                    let bc1 = T::one() - b1.powi(self.steps);
                    let bc2 = T::one() - b2.powi(self.steps);
                    let eps = T::of(c.eps);
                    for (((w, &gi), m), v) in p
                        .data
                        .iter_mut()
                        .zip(g)
                        .zip(self.first[i].iter_mut())
                        .zip(self.second[i].iter_mut())
                    {
                        let d = gi + wd * *w;
                        *m = b1 * *m + (T::one() - b1) * d;
                        *v = b2 * *v + (T::one() - b2) * d * d;
                        *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Cosine annealing from `base_lr` to exactly 0 over `total_steps`, with no
/// warm-up and no restarts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineAnnealing {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl CosineAnnealing {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return 0.0;
        }
        self.base_lr * 0.5 * (1.0 + (PI * step as f64 / self.total_steps as f64).cos())
    }
}
