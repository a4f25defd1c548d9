//! Training objective: per-branch cross-entropy plus a temperature-scaled
//! KL consistency term from the low-dimensional branch to the
//! high-dimensional one.

use serde::{Deserialize, Serialize};

use super::{BranchVars, LossParts};
use crate::autodiff::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight `λ` of the consistency term.
    pub lambda: f64,
    /// Softmax temperature `T`.
    pub temperature: f64,
    /// Treat branch-2 logits as a fixed target in the consistency term.
    pub detach_teacher: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            temperature: 3.0,
            detach_teacher: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

fn eval_scalar(build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let out = build(&mut tape)?;
    Ok(tape.value(out).item())
}

/// Row-wise `softmax(y / T)`.
pub fn softmax_with_temperature(y: &Tensor, t: f64) -> Result<Tensor> {
    if !(t > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {t}")));
    }
    let mut tape = Tape::new();
    let x = tape.constant(y.clone());
    let s = tape.softmax_rows(x, t)?;
    Ok(tape.value(s).clone())
}

/// Mean cross-entropy of `logits` against integer labels.
pub fn ce_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    eval_scalar(|tape| {
        let x = tape.constant(logits.clone());
        Ok(tape.cross_entropy(x, labels)?)
    })
}

/// `T² · mean_b KL(σ(y₂/T) ‖ σ(y₁/T))` for student `y1` and teacher `y2`.
pub fn kl_consistency(y1: &Tensor, y2: &Tensor, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {t}")));
    }
    eval_scalar(|tape| {
        let s = tape.constant(y1.clone());
        let q = tape.constant(y2.clone());
        Ok(tape.kl_consistency(s, q, t)?)
    })
}

/// `CE(y₁) + CE(y₂) + λ·KL` for one batch.
pub fn total_loss(y1: &Tensor, y2: &Tensor, labels: &[usize], weights: LossWeights) -> Result<f64> {
    weights.validate()?;
    Ok(ce_loss(y1, labels)? + ce_loss(y2, labels)? + weights.lambda * kl_consistency(y1, y2, weights.temperature)?)
}

/// Records the full objective over the recorded branches. A single branch
/// gives plain cross-entropy.
pub(crate) fn record_objective(
    tape: &mut Tape,
    branches: &[BranchVars],
    labels: &[usize],
    weights: LossWeights,
) -> Result<(Var, LossParts)> {
    weights.validate()?;
    let ce1 = tape.cross_entropy(branches[0].logits, labels)?;
    let mut parts = LossParts {
        ce1: tape.value(ce1).item(),
        ..LossParts::default()
    };
    let mut loss = ce1;
    if let Some(b2) = branches.get(1) {
        let ce2 = tape.cross_entropy(b2.logits, labels)?;
        let teacher = if weights.detach_teacher {
            tape.stop_gradient(b2.logits)?
        } else {
            b2.logits
        };
        let kl = tape.kl_consistency(branches[0].logits, teacher, weights.temperature)?;
        let weighted = tape.scale(kl, weights.lambda)?;
        parts.ce2 = tape.value(ce2).item();
        parts.kl = tape.value(kl).item();
        loss = tape.add(loss, ce2)?;
        loss = tape.add(loss, weighted)?;
    }
    parts.total = tape.value(loss).item();
    if !parts.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {parts:?}")));
    }
    Ok((loss, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_reference() {
        let s = softmax_with_temperature(&m(1, 3, &[1.0, 2.0, 3.0]), 3.0).unwrap();
        let expected = [0.230_237_216_348_190_5, 0.321_321_919_852_768_78, 0.448_440_863_799_040_73];
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(softmax_with_temperature(&m(1, 3, &[1.0, 2.0, 3.0]), 0.0).is_err());
    }

    #[test]
    fn softmax_is_shift_invariant_and_stable() {
        let a = softmax_with_temperature(&m(1, 3, &[1000.0, 1001.0, 1002.0]), 1.0).unwrap();
        let b = softmax_with_temperature(&m(1, 3, &[0.0, 1.0, 2.0]), 1.0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn ce_reference() {
        let logits = m(3, 3, &[2.0, 0.5, -1.0, 0.1, 0.2, 0.3, -0.5, 1.5, 0.0]);
        let ce = ce_loss(&logits, &[0, 2, 1]).unwrap();
        assert!((ce - 0.516_536_619_038_515_9).abs() < 1e-14);
    }

    #[test]
    fn ce_of_uniform_logits_is_log_k() {
        let ce = ce_loss(&Tensor::zeros(&[4, 5]), &[0, 1, 2, 4]).unwrap();
        assert!((ce - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ce_rejects_bad_label() {
        assert!(ce_loss(&Tensor::zeros(&[1, 3]), &[3]).is_err());
    }

    #[test]
    fn kl_zero_for_identical_logits() {
        let y = m(2, 3, &[0.3, -1.0, 2.0, 4.0, 0.0, 0.1]);
        assert!(kl_consistency(&y, &y, 3.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn kl_reference_and_nonnegative() {
        let y1 = m(2, 3, &[1.0, 0.0, -1.0, 0.5, 0.5, 2.0]);
        let y2 = m(2, 3, &[0.0, 2.0, 0.0, -1.0, 1.0, 0.0]);
        let kl = kl_consistency(&y1, &y2, 3.0).unwrap();
        assert!((kl - 0.730_029_496_758_448_2).abs() < 1e-14, "{kl}");
        assert!(kl_consistency(&y2, &y1, 3.0).unwrap() > 0.0);
        // Teacher (0.75, 0.25) against a uniform student at T = 1.
        let t = m(1, 2, &[3f64.ln(), 0.0]);
        let s = m(1, 2, &[0.0, 0.0]);
        assert!((kl_consistency(&s, &t, 1.0).unwrap() - 0.130_812_035_941_136_96).abs() < 1e-15);
    }

    #[test]
    fn total_adds_the_terms() {
        let y1 = m(2, 3, &[1.0, 0.0, -1.0, 0.5, 0.5, 2.0]);
        let y2 = m(2, 3, &[0.0, 2.0, 0.0, -1.0, 1.0, 0.0]);
        let labels = [0, 2];
        let w = LossWeights::default();
        let expected = ce_loss(&y1, &labels).unwrap() + ce_loss(&y2, &labels).unwrap() + 0.2 * kl_consistency(&y1, &y2, 3.0).unwrap();
        assert_eq!(total_loss(&y1, &y2, &labels, w).unwrap(), expected);
    }
}
