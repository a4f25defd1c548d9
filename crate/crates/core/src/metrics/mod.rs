//! Evaluation metrics, frozen-embedding probes, local k-NN label entropy
//! in the ball, and 2D disk export.

mod entropy;
mod export;
mod probe;

pub use entropy::{entropy_report, knn_entropy, EntropyReport, DEFAULT_ENTROPY_K};
pub use export::{circle_path, export_disk_embeddings, CIRCLE_SAMPLES};
pub use probe::{run_probe, ProbeConfig, ProbeKind, ProbeTarget};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub seed: u64,
    pub accuracy: f64,
    pub auc_macro: f64,
    /// One-vs-rest AUC per class; `null` for classes without both
    /// positives and negatives.
    pub per_class_auc: Vec<Option<f64>>,
    pub loss: Option<f64>,
    pub num_samples: usize,
}

/// Fraction of positions where `preds` equals `labels`.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Metric(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::Metric("accuracy of an empty set".into()));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Binary AUC via the rank-sum statistic with average ranks for ties.
/// `None` when either class is empty.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest AUC of each score column.
pub fn auc_per_class(scores: &Tensor, labels: &[usize]) -> Result<Vec<Option<f64>>> {
    if scores.rank() != 2 || scores.rows() != labels.len() {
        return Err(Error::Metric(format!(
            "score matrix {:?} for {} labels",
            scores.shape(),
            labels.len()
        )));
    }
    let k = scores.cols();
    if k < 2 {
        return Err(Error::Metric("need at least two score columns".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Metric(format!("label {l} out of range for {k} score columns")));
    }
    Ok((0..k)
        .map(|c| {
            let col: Vec<f64> = (0..labels.len()).map(|i| scores.row(i)[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            auc_binary(&col, &pos)
        })
        .collect())
}

/// Macro one-vs-rest AUC. With two columns this is the AUC of the
/// positive-class (column 1) score. Classes lacking positives or negatives
/// are skipped with a warning.
pub fn auc_macro(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    let per_class = auc_per_class(scores, labels)?;
    if per_class.len() == 2 {
        return per_class[1].ok_or_else(|| Error::Metric("binary AUC needs both classes present".into()));
    }
    let mut sum = 0.0;
    let mut used = 0;
    for (c, auc) in per_class.iter().enumerate() {
        match auc {
            Some(a) => {
                sum += a;
                used += 1;
            }
            None => log::warn!("class {c} has no positives or no negatives; skipped in macro AUC"),
        }
    }
    if used == 0 {
        return Err(Error::Metric("no class has both positives and negatives".into()));
    }
    Ok(sum / used as f64)
}

/// Accuracy and AUCs of branch scores against labels.
pub fn evaluate_scores(scores: &Tensor, labels: &[usize], split: &str, seed: u64, loss: Option<f64>) -> Result<MetricsReport> {
    let preds = crate::model::predict(scores);
    Ok(MetricsReport {
        split: split.to_string(),
        seed,
        accuracy: accuracy(&preds, labels)?,
        auc_macro: auc_macro(scores, labels)?,
        per_class_auc: auc_per_class(scores, labels)?,
        loss,
        num_samples: labels.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs_auc(scores: &[f64], pos: &[bool]) -> f64 {
        let mut credit = 0.0;
        let mut n = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    n += 1.0;
                    credit += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        credit / n
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2, 0], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 1], &[0, 1, 2, 1]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn binary_auc_examples() {
        assert_eq!(auc_binary(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(auc_binary(&[0.5; 6], &[true, false, true, false, false, true]), Some(0.5));
        assert_eq!(auc_binary(&[0.1, 0.2], &[true, true]), None);
    }

    #[test]
    fn six_sample_three_class_matches_pair_counting() {
        let scores = Tensor::matrix(
            6,
            3,
            vec![
                0.7, 0.2, 0.1, 0.3, 0.3, 0.4, 0.2, 0.5, 0.3, 0.2, 0.5, 0.3, 0.1, 0.1, 0.8, 0.4, 0.4, 0.2,
            ],
        )
        .unwrap();
        let labels = [0, 2, 1, 0, 2, 1];
        let mut expected = 0.0;
        for c in 0..3 {
            let col: Vec<f64> = (0..6).map(|i| scores.row(i)[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            expected += pairs_auc(&col, &pos);
        }
        expected /= 3.0;
        assert!((auc_macro(&scores, &labels).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn binary_macro_uses_positive_column() {
        let scores = Tensor::matrix(4, 2, vec![0.0, 0.9, 0.0, 0.1, 0.0, 0.8, 0.0, 0.3]).unwrap();
        assert_eq!(auc_macro(&scores, &[1, 0, 1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn absent_classes_are_skipped() {
        let scores = Tensor::matrix(4, 3, vec![0.9, 0.1, 0.0, 0.2, 0.8, 0.0, 0.7, 0.3, 0.0, 0.1, 0.9, 0.0]).unwrap();
        assert_eq!(auc_macro(&scores, &[0, 1, 0, 1]).unwrap(), 1.0);
        assert!(auc_macro(&scores, &[0, 0, 0, 0]).is_err());
    }
}
