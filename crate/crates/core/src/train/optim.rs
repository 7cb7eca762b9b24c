use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD momentum.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(
                "optimizer.lr",
                format!("must be finite and nonnegative, got {}", self.lr),
            ));
        }
        for (k, v) in [
            ("optimizer.momentum", self.momentum),
            ("optimizer.beta1", self.beta1),
            ("optimizer.beta2", self.beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(k, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(
                "optimizer.weight_decay",
                "must be nonnegative",
            ));
        }
        Ok(())
    }
}

/// Adam (bias-corrected) or SGD with heavy-ball momentum, both with L2
/// weight decay folded into the gradient. θ parameters step with the
/// learning rate times `theta_lr_multiplier`.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    theta_lr_multiplier: f64,
    step: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, theta_lr_multiplier: f64) -> Self {
        Optimizer {
            config,
            theta_lr_multiplier,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` belongs to the i-th stored parameter;
    /// `None` leaves it untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.first.resize(store.len(), None);
        self.second.resize(store.len(), None);
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = store.param_mut(id);
            if !p.trainable {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} for `{}` {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            let lr = if p.group == ParamGroup::Theta {
                c.lr * self.theta_lr_multiplier
            } else {
                c.lr
            };
            let n = g.len();
            let m = self.first[i].get_or_insert_with(|| vec![0.0; n]);
            match c.kind {
                OptimizerKind::Sgd => {
                    for ((x, &gi), b) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                    {
                        let gi = gi + c.weight_decay * *x;
                        *b = if t == 1 { gi } else { c.momentum * *b + gi };
                        *x -= lr * *b;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.second[i].get_or_insert_with(|| vec![0.0; n]);
                    for (((x, &gi), mi), vi) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        let gi = gi + c.weight_decay * *x;
                        *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                        *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                        *x -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
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
    fn sgd_first_steps_closed_form() {
        // f(x) = x²/2, grad = x
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(1.0), ParamGroup::Head);
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.1,
            momentum: 0.5,
            ..Default::default()
        };
        let mut opt = Optimizer::new(cfg, 1.0);
        opt.step(&mut store, &[Some(Tensor::scalar(1.0))]).unwrap();
        assert_eq!(store.value(id).data()[0], 0.9);
        opt.step(&mut store, &[Some(Tensor::scalar(0.9))]).unwrap();
        // buf = 0.5·1 + 0.9 = 1.4
        assert!((store.value(id).data()[0] - (0.9 - 0.14)).abs() < 1e-15);
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut store = ParamStore::new();
        let id = store.add("t", Tensor::scalar(0.3), ParamGroup::Theta);
        store.set_trainable(id, false);
        let mut opt = Optimizer::new(OptimizerConfig::default(), 5.0);
        opt.step(&mut store, &[Some(Tensor::scalar(1.0))]).unwrap();
        assert_eq!(store.value(id).data()[0], 0.3);
    }
}
