//! Learning-rate schedule and first-order optimizers.

use serde::{Deserialize, Serialize};

use crate::error::{DialError, Result};
use crate::nn::ParamSet;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// `base_lr * (1 - step / max_steps)^power`.
pub fn poly_lr(step: usize, max_steps: usize, base_lr: f64, power: f64) -> Result<f64> {
    if max_steps == 0 {
        return Err(DialError::invalid("poly schedule needs max_steps > 0"));
    }
    if step > max_steps {
        return Err(DialError::invalid(format!("step {step} beyond max_steps {max_steps}")));
    }
    Ok(base_lr * (1.0 - step as f64 / max_steps as f64).powf(power))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::sgd()
    }
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 2.5e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
        }
    }

    pub fn adam() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            weight_decay: 0.0,
            ..Self::sgd()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(DialError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state for one parameter set.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig, params: &ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Optimizer {
            cfg,
            first: zeros(),
            second: if cfg.kind == OptimizerKind::Adam { zeros() } else { Vec::new() },
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// One update at learning rate `lr`. Parameters stay untouched on error.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(DialError::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(DialError::invalid(format!(
                    "gradient shape {:?} for {name} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(DialError::NumericFailure(format!("non-finite gradient for {name}")));
            }
        }
        self.steps += 1;
        let lr: T = lit(lr);
        let wd: T = lit(self.cfg.weight_decay);
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                let mu: T = lit(self.cfg.momentum);
                for ((p, g), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.first) {
                    for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *v = mu * *v + g + wd * *p;
                        *p -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2): (T, T) = (lit(self.cfg.beta1), lit(self.cfg.beta2));
                let eps: T = lit(self.cfg.epsilon);
                let t = self.steps as i32;
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                let tensors = params.tensors_mut().iter_mut().zip(grads);
                for ((p, g), (m, v)) in tensors.zip(self.first.iter_mut().zip(&mut self.second)) {
                    let cells = p.data_mut().iter_mut().zip(g.data());
                    for ((p, &g), (m, v)) in cells.zip(m.data_mut().iter_mut().zip(v.data_mut())) {
                        let g = g + wd * *p;
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
