use serde::{Deserialize, Serialize};

use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl LrSchedule {
    /// Learning rate at `step` of `total` (0-based).
    pub fn at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    /// Plain gradient descent; `momentum = 0` is the default.
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd { momentum: 0.0 }
    }
}

/// Optimizer state for one ordered list of tensors.
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            if matches!(self.cfg, OptimizerConfig::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        self.steps += 1;
        match self.cfg {
            OptimizerConfig::Sgd { momentum: 0.0 } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.data.iter_mut().zip(&g.data) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerConfig::Sgd { momentum } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((w, d), vi) in p.data.iter_mut().zip(&g.data).zip(v.iter_mut()) {
                        *vi = momentum * *vi + d;
                        *w -= lr * *vi;
                    }
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((w, d), mi), vi) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * d;
                        *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(LrSchedule::Cosine.at(0.1, 0, 10), 0.1);
        assert!(LrSchedule::Cosine.at(0.1, 10, 10).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.at(0.1, 7, 10), 0.1);
    }

    #[test]
    fn optimizers_descend_a_quadratic() {
        for cfg in [
            OptimizerConfig::Sgd { momentum: 0.0 },
            OptimizerConfig::Sgd { momentum: 0.9 },
            OptimizerConfig::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        ] {
            let mut w = Tensor {
                shape: vec![2],
                data: vec![3.0, -2.0],
            };
            let mut opt = Optimizer::new(cfg);
            for _ in 0..500 {
                let g = Tensor {
                    shape: vec![2],
                    data: w.data.iter().map(|x| 2.0 * x).collect(),
                };
                opt.step(&mut [&mut w], &[&g], 0.05);
            }
            assert!(w.data.iter().all(|x| x.abs() < 1e-2), "{cfg:?}: {:?}", w.data);
        }
    }
}
