//! First-order optimizers over flat parameter vectors, following the
//! PyTorch update conventions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}

/// SGD with heavy-ball momentum: `buf ← m·buf + g`, `θ ← θ − η·buf`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub buffer: Vec<f64>,
}

impl Sgd {
    pub fn new(dim: usize, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            buffer: vec![0.0; dim],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_len(self.buffer.len(), params.len())?;
        check_len(params.len(), grads.len())?;
        for ((p, b), &g) in params.iter_mut().zip(&mut self.buffer).zip(grads) {
            *b = self.momentum * *b + g;
            *p -= self.lr * *b;
        }
        Ok(())
    }
}

/// RMSprop: `v ← ρ·v + (1 − ρ)·g²`, `θ ← θ − η·g / (√v + ε)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    pub square_avg: Vec<f64>,
}

impl RmsProp {
    pub fn new(dim: usize, lr: f64, decay: f64, eps: f64) -> Self {
        Self {
            lr,
            decay,
            eps,
            square_avg: vec![0.0; dim],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_len(self.square_avg.len(), params.len())?;
        check_len(params.len(), grads.len())?;
        for ((p, v), &g) in params.iter_mut().zip(&mut self.square_avg).zip(grads) {
            *v = self.decay * *v + (1.0 - self.decay) * g * g;
            *p -= self.lr * g / (v.sqrt() + self.eps);
        }
        Ok(())
    }
}
