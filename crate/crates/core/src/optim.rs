//! AdamW with decoupled weight decay, cosine learning-rate annealing and
//! patience-based early stopping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates and step counter for a named parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One AdamW update of every parameter that has a gradient:
    ///
    /// ```text
    /// θ ← θ (1 − lr·wd)
    /// m ← β₁ m + (1 − β₁) g,   v ← β₂ v + (1 − β₂) g²
    /// θ ← θ − lr · m̂ / (√v̂ + ε),   m̂ = m / (1 − β₁ᵗ),  v̂ = v / (1 − β₂ᵗ)
    /// ```
    ///
    /// All gradients are validated before any parameter is touched.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter `{name}`")));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("validated above");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((theta, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *theta *= 1.0 - lr * weight_decay;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *theta -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(base_lr: f64, min_lr: f64, total_steps: u64) -> Result<Self> {
        if !(0.0 <= min_lr && min_lr <= base_lr) || total_steps == 0 {
            return Err(Error::Config(format!(
                "schedule needs 0 ≤ min_lr ≤ base_lr and total_steps ≥ 1 (got {min_lr}, {base_lr}, {total_steps})"
            )));
        }
        Ok(Self {
            base_lr,
            min_lr,
            total_steps,
        })
    }

    /// `min + ½(base − min)(1 + cos(π·step/total))`.
    pub fn lr(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Config(format!(
                "step {step} beyond schedule length {}",
                self.total_steps
            )));
        }
        let frac = step as f64 / self.total_steps as f64;
        Ok(self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * frac).cos()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Maximize,
    Minimize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Tracks the best epoch; stops once `patience` consecutive epochs fail to
/// strictly improve on it.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub mode: Mode,
    best: Option<f64>,
    best_epoch: usize,
    epochs_since_improvement: usize,
    epochs_seen: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, mode: Mode) -> Self {
        Self {
            patience,
            mode,
            best: None,
            best_epoch: 0,
            epochs_since_improvement: 0,
            epochs_seen: 0,
        }
    }

    /// Records the metric of the next epoch (epochs are numbered from 1).
    pub fn update(&mut self, metric: f64) -> StopDecision {
        self.epochs_seen += 1;
        let improved = match (self.best, self.mode) {
            (None, _) => true,
            (Some(b), Mode::Maximize) => metric > b,
            (Some(b), Mode::Minimize) => metric < b,
        };
        if improved {
            self.best = Some(metric);
            self.best_epoch = self.epochs_seen;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        if self.epochs_since_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    /// Whether the last call to [`update`](Self::update) set a new best.
    pub fn last_improved(&self) -> bool {
        self.epochs_seen > 0 && self.epochs_since_improvement == 0
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.epochs_since_improvement
    }
}
