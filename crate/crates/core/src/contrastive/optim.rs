use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
    /// SGD momentum.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            weight_decay: 1e-6,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            weight_decay: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam or SGD with momentum over a fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub struct Optimizer<F: Element> {
    pub config: OptimizerConfig,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
    steps: u64,
}

impl<F: Element> Optimizer<F> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<F>], grads: &[&Tensor<F>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid("optimizer: parameter and gradient counts differ"));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![F::zero(); p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::invalid("optimizer: parameter list changed between steps"));
        }
        self.steps += 1;
        let c = &self.config;
        let (lr, wd) = (F::c(c.lr), F::c(c.weight_decay));
        let (b1, b2) = (F::c(c.beta1), F::c(c.beta2));
        let bc1 = F::c(1.0 - c.beta1.powi(self.steps as i32));
        let bc2 = F::c(1.0 - c.beta2.powi(self.steps as i32));
        let (eps, mom) = (F::c(c.eps), F::c(c.momentum));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer", p.shape(), g.shape()));
            }
            let data = p.data_mut()?;
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (x, &gj)) in data.iter_mut().zip(g.data()).enumerate() {
                let grad = gj + wd * *x;
                match c.kind {
                    OptimizerKind::Adam => {
                        m[j] = b1 * m[j] + (F::one() - b1) * grad;
                        v[j] = b2 * v[j] + (F::one() - b2) * grad * grad;
                        *x -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                    }
                    OptimizerKind::Sgd => {
                        m[j] = mom * m[j] + grad;
                        *x -= lr * m[j];
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut x = Tensor::<f64>::from_vec(vec![3.0, -2.0]);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1));
        for _ in 0..500 {
            let g = x.scale(2.0);
            opt.step(&mut [&mut x], &[&g]).unwrap();
        }
        assert!(x.data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn sgd_step_is_lr_times_gradient() {
        let mut x = Tensor::<f64>::from_vec(vec![1.0]);
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.5,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(cfg);
        opt.step(&mut [&mut x], &[&Tensor::from_vec(vec![0.4])]).unwrap();
        assert_eq!(x.data(), &[0.8]);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut x = Tensor::<f32>::from_vec(vec![0.1, 0.2]);
        let before = x.to_vec();
        let mut opt = Optimizer::new(OptimizerConfig {
            lr: 0.0,
            ..OptimizerConfig::default()
        });
        opt.step(&mut [&mut x], &[&Tensor::from_vec(vec![5.0, -3.0])]).unwrap();
        assert_eq!(x.to_vec(), before);
    }
}
