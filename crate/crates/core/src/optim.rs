//! Adam and a reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::Param;

pub const DEFAULT_LR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments shaped like `params`, with `beta1=0.9, beta2=0.999,
    /// eps=1e-8`.
    pub fn new(params: &[&Param], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn for_sizes(sizes: &[usize], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected update over `(value, grad)` pairs. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step_slices(&mut self, tensors: &mut [(&mut [f64], &[f64])]) -> Result<()> {
        if tensors.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                tensors.len()
            )));
        }
        for (i, (value, grad)) in tensors.iter().enumerate() {
            if value.len() != self.m[i].len() || grad.len() != value.len() {
                return Err(Error::Shape(format!("optimizer tensor {i} changed size")));
            }
            if let Some(j) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at tensor {i} entry {j}; step rejected"
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (value, grad)) in tensors.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                value[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Applies one update to model parameters using their accumulated gradients.
    pub fn step(&mut self, params: Vec<&mut Param>) -> Result<()> {
        let mut pairs: Vec<(&mut [f64], &[f64])> = params
            .into_iter()
            .map(|p| {
                let Param { value, grad, .. } = p;
                (value.as_mut_slice(), grad.as_slice())
            })
            .collect();
        self.step_slices(&mut pairs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauPolicy {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
    pub best: Option<f64>,
    pub epochs_since_improvement: usize,
}

impl Default for PlateauPolicy {
    fn default() -> Self {
        PlateauPolicy::new(3, 1e-4, 1e-6)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauDecision {
    pub lr: f64,
    pub reduced: bool,
    pub improved: bool,
}

impl PlateauPolicy {
    pub fn new(patience: usize, min_delta: f64, min_lr: f64) -> Self {
        PlateauPolicy {
            factor: 0.1,
            patience,
            min_delta,
            min_lr,
            best: None,
            epochs_since_improvement: 0,
        }
    }

    /// Feeds one epoch's validation loss. After `patience` consecutive epochs
    /// without an improvement of at least `min_delta`, the rate drops to
    /// `max(lr * factor, min_lr)` and the counter restarts.
    pub fn update(&mut self, val_loss: f64, lr: f64) -> Result<PlateauDecision> {
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("validation loss {val_loss}")));
        }
        let improved = match self.best {
            None => true,
            Some(best) => val_loss < best - self.min_delta,
        };
        if improved {
            self.best = Some(val_loss);
            self.epochs_since_improvement = 0;
            return Ok(PlateauDecision {
                lr,
                reduced: false,
                improved,
            });
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement >= self.patience {
            self.epochs_since_improvement = 0;
            let next = (lr * self.factor).max(self.min_lr);
            return Ok(PlateauDecision {
                lr: next,
                reduced: next < lr,
                improved,
            });
        }
        Ok(PlateauDecision {
            lr,
            reduced: false,
            improved,
        })
    }
}
