use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{evaluate_scores, MetricsReport};
use crate::autodiff::{Tape, Tensor, UnaryOp};
use crate::data::BatchIterator;
use crate::model::softmax_with_temperature;
use crate::optim::{AdamWConfig, OptimizerState};
use crate::rng::SplitMix64;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Linear,
    /// Two layers: `linear → ReLU → linear`.
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTarget {
    Class,
    Domain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub target: ProbeTarget,
    pub epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    pub batch_size: usize,
    /// Held-out fraction of the probe's own stratified split.
    pub holdout: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self::new(ProbeKind::Linear, ProbeTarget::Domain)
    }
}

impl ProbeConfig {
    /// Defaults per kind: the linear probe runs 100 epochs at lr 1e−2, the
    /// MLP 50 epochs at lr 1e−3 with 64 hidden units.
    pub fn new(kind: ProbeKind, target: ProbeTarget) -> Self {
        let (epochs, lr) = match kind {
            ProbeKind::Linear => (100, 1e-2),
            ProbeKind::Mlp => (50, 1e-3),
        };
        Self {
            kind,
            target,
            epochs,
            lr,
            hidden: 64,
            batch_size: 64,
            holdout: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || (self.kind == ProbeKind::Mlp && self.hidden == 0) {
            return Err(Error::Config("probe epochs, batch size and hidden width must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(Error::Config("probe lr must be positive and holdout in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Stratified train/held-out partition; every class with at least two
/// members lands in both parts.
fn stratified_holdout(targets: &[usize], k: usize, holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = SplitMix64::stream(seed, 0x9e0b);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..k {
        let mut members: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] == c).collect();
        rng.shuffle(&mut members);
        let n = members.len();
        let mut n_test = (n as f64 * holdout).round() as usize;
        if n >= 2 {
            n_test = n_test.clamp(1, n - 1);
        }
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn uniform(rng: &mut SplitMix64, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.uniform(-bound, bound)).collect())
}

fn rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * x.cols());
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::from_parts(vec![idx.len(), x.cols()], data)
}

fn probe_logits(tape: &mut Tape, params: &BTreeMap<String, Tensor>, x: &Tensor, kind: ProbeKind, trainable: bool) -> Result<(crate::autodiff::Var, BTreeMap<String, crate::autodiff::Var>)> {
    let vars: BTreeMap<String, _> = params.iter().map(|(n, t)| (n.clone(), tape.leaf(t.clone(), trainable))).collect();
    let xv = tape.constant(x.clone());
    let out = match kind {
        ProbeKind::Linear => tape.linear(xv, vars["w"], Some(vars["b"]))?,
        ProbeKind::Mlp => {
            let h = tape.linear(xv, vars["w1"], Some(vars["b1"]))?;
            let h = tape.unary(h, UnaryOp::Relu)?;
            tape.linear(h, vars["w2"], Some(vars["b2"]))?
        }
    };
    Ok((out, vars))
}

/// Fits a probe on frozen `embeddings` (rows) to `targets` using a
/// stratified split of its own, and reports accuracy and macro AUC on the
/// held-out part. Features are standardised with statistics of the
/// training part.
pub fn run_probe(embeddings: &Tensor, targets: &[usize], cfg: ProbeConfig, seed: u64) -> Result<MetricsReport> {
    cfg.validate()?;
    if embeddings.rank() != 2 || embeddings.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "probe input {:?} for {} targets",
            embeddings.shape(),
            targets.len()
        )));
    }
    let k = targets.iter().max().map_or(0, |m| m + 1);
    let distinct = (0..k).filter(|c| targets.contains(c)).count();
    if distinct < 2 {
        return Err(Error::Metric("probe targets take a single value".into()));
    }
    let (train_idx, test_idx) = stratified_holdout(targets, k, cfg.holdout, seed);
    let dim = embeddings.cols();

    let mut mean = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for &i in &train_idx {
        for (m, v) in mean.iter_mut().zip(embeddings.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train_idx.len() as f64);
    for &i in &train_idx {
        for ((s, m), v) in sd.iter_mut().zip(&mean).zip(embeddings.row(i)) {
            *s += (v - m) * (v - m);
        }
    }
    sd.iter_mut().for_each(|s| {
        *s = (*s / train_idx.len() as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    });
    let mut x = embeddings.clone();
    let cols = dim;
    for row in x.data_mut().chunks_mut(cols) {
        for ((v, m), s) in row.iter_mut().zip(&mean).zip(&sd) {
            *v = (*v - m) / s;
        }
    }

    let mut rng = SplitMix64::stream(seed, 0x9e0c);
    let mut params = BTreeMap::new();
    match cfg.kind {
        ProbeKind::Linear => {
            params.insert("w".to_string(), uniform(&mut rng, &[k, dim], dim));
            params.insert("b".to_string(), uniform(&mut rng, &[k], dim));
        }
        ProbeKind::Mlp => {
            params.insert("w1".to_string(), uniform(&mut rng, &[cfg.hidden, dim], dim));
            params.insert("b1".to_string(), uniform(&mut rng, &[cfg.hidden], dim));
            params.insert("w2".to_string(), uniform(&mut rng, &[k, cfg.hidden], cfg.hidden));
            params.insert("b2".to_string(), uniform(&mut rng, &[k], cfg.hidden));
        }
    }
    let mut opt = OptimizerState::new(AdamWConfig::default());
    let batches = BatchIterator::new(train_idx.clone(), cfg.batch_size, seed ^ 0x9e0d, false);
    for epoch in 0..cfg.epochs {
        for batch in batches.epoch(epoch as u64) {
            let xb = rows(&x, &batch);
            let yb: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let (logits, vars) = probe_logits(&mut tape, &params, &xb, cfg.kind, true)?;
            let loss = tape.cross_entropy(logits, &yb)?;
            let g = tape.backward(loss, &Tensor::scalar(1.0))?;
            let grads = vars.iter().map(|(n, v)| (n.clone(), g.wrt(*v))).collect();
            opt.step(&mut params, &grads, cfg.lr)?;
        }
    }

    let xt = rows(&x, &test_idx);
    let yt: Vec<usize> = test_idx.iter().map(|&i| targets[i]).collect();
    let mut tape = Tape::new();
    let (logits, _) = probe_logits(&mut tape, &params, &xt, cfg.kind, false)?;
    let loss = tape.cross_entropy(logits, &yt)?;
    let loss = tape.value(loss).item();
    let probs = softmax_with_temperature(tape.value(logits), 1.0)?;
    evaluate_scores(&probs, &yt, "probe-holdout", seed, Some(loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_is_stratified_and_disjoint() {
        let targets: Vec<usize> = (0..50).map(|i| i % 2).collect();
        let (tr, te) = stratified_holdout(&targets, 2, 0.2, 1);
        assert_eq!(tr.len(), 40);
        assert_eq!(te.len(), 10);
        assert_eq!(te.iter().filter(|&&i| targets[i] == 0).count(), 5);
        assert!(tr.iter().all(|i| !te.contains(i)));
    }

    #[test]
    fn one_hot_embeddings_are_perfectly_probed() {
        let n = 120;
        let targets: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let mut data = vec![0.0; n * 3];
        for (i, &t) in targets.iter().enumerate() {
            data[i * 3 + t] = 1.0;
        }
        let x = Tensor::matrix(n, 3, data).unwrap();
        let cfg = ProbeConfig::new(ProbeKind::Linear, ProbeTarget::Class);
        let r = run_probe(&x, &targets, cfg, 0).unwrap();
        assert_eq!(r.auc_macro, 1.0, "{r:?}");
    }

    #[test]
    fn single_class_targets_error() {
        let x = Tensor::zeros(&[4, 2]);
        assert!(run_probe(&x, &[1, 1, 1, 1], ProbeConfig::default(), 0).is_err());
    }
}
