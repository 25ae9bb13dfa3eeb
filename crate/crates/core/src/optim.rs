//! First-order optimizers over flat parameter vectors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adagrad,
    Rmsprop,
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::Adam,
        OptimizerKind::Adagrad,
        OptimizerKind::Sgd,
        OptimizerKind::Rmsprop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Rmsprop => "rmsprop",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adagrad" => Ok(OptimizerKind::Adagrad),
            "rmsprop" => Ok(OptimizerKind::Rmsprop),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(domain_err!(
                "unknown optimizer '{other}' (expected sgd, adagrad, rmsprop or adam)"
            )),
        }
    }
}

/// Fixed hyperparameters beyond the learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHyper {
    pub beta1: f64,
    pub beta2: f64,
    /// RMSprop decay of the squared-gradient average.
    pub rho: f64,
    pub eps: f64,
}

impl OptimizerHyper {
    pub fn defaults(kind: OptimizerKind) -> Self {
        let eps = match kind {
            OptimizerKind::Adagrad => 1e-10,
            _ => 1e-8,
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            rho: 0.99,
            eps,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    hyper: OptimizerHyper,
    step_count: u64,
    n_params: usize,
    /// Adam first moment.
    first: Vec<f64>,
    /// Adam/RMSprop second moment, Adagrad squared-gradient sum.
    second: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Result<Self> {
        Self::with_hyper(kind, lr, OptimizerHyper::defaults(kind), n_params)
    }

    pub fn with_hyper(
        kind: OptimizerKind,
        lr: f64,
        hyper: OptimizerHyper,
        n_params: usize,
    ) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(domain_err!("learning rate must be positive, got {lr}"));
        }
        let first = if kind == OptimizerKind::Adam {
            vec![0.0; n_params]
        } else {
            Vec::new()
        };
        let second = if kind == OptimizerKind::Sgd {
            Vec::new()
        } else {
            vec![0.0; n_params]
        };
        Ok(Self {
            kind,
            lr,
            hyper,
            step_count: 0,
            first,
            second,
            n_params,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn hyper(&self) -> OptimizerHyper {
        self.hyper
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update in place. On error nothing is modified.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.n_params {
            return Err(shape_err!(
                "optimizer for {} parameters got {} parameters and {} gradients",
                self.n_params,
                params.len(),
                grads.len()
            ));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "gradient entry {i} is {}",
                grads[i]
            )));
        }
        self.step_count += 1;
        let lr = self.lr;
        let h = self.hyper;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adagrad => {
                for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.second) {
                    *s += g * g;
                    *p -= lr * g / (s.sqrt() + h.eps);
                }
            }
            OptimizerKind::Rmsprop => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.second) {
                    *v = h.rho * *v + (1.0 - h.rho) * g * g;
                    *p -= lr * g / (v.sqrt() + h.eps);
                }
            }
            OptimizerKind::Adam => {
                let t = self.step_count as i32;
                let c1 = 1.0 - h.beta1.powi(t);
                let c2 = 1.0 - h.beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    *m = h.beta1 * *m + (1.0 - h.beta1) * g;
                    *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + h.eps);
                }
            }
        }
        Ok(())
    }
}
