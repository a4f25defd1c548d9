//! Embedding datasets: in-memory representation, the on-disk container,
//! split plans, the synthetic generator and batch iteration.

mod batch;
mod format;
mod split;
mod synth;

pub use batch::BatchIterator;
pub use format::{load_dataset, read_manifest, save_dataset, Manifest, EMBEDDINGS_FILE, HEMB_MAGIC, HEMB_VERSION, LABELS_FILE, MANIFEST_FILE};
pub use split::{make_split, SplitPlan};
pub use synth::{synth_generate, SynthSpec};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic in {file}: expected \"HEMB\"")]
    BadMagic { file: String },
    #[error("unsupported {what} version {found}")]
    UnsupportedVersion { what: &'static str, found: u64 },
    #[error("row count mismatch in {field}: expected {expected}, found {found}")]
    RowCount {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite embedding value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("class labels are not contiguous from 0: {0}")]
    NonContiguousLabels(String),
    #[error("checksum mismatch for {file}")]
    ChecksumMismatch { file: String },
    #[error("labels.csv row {row}: {msg}")]
    Labels { row: usize, msg: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("dataset has no domain labels")]
    MissingDomains,
    #[error("domain {0} has no samples")]
    EmptyDomain(usize),
    #[error("no samples carry a split tag")]
    MissingSplits,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("embedding width {found} does not match expected {expected}")]
    Width { expected: usize, found: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Row-major embedding matrix with per-row labels and split tags.
///
/// Embeddings are kept as `f32`, the precision of the on-disk container, so
/// save/load is bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    embeddings: Vec<f32>,
    class_labels: Vec<usize>,
    domain_labels: Option<Vec<usize>>,
    splits: Vec<Option<Split>>,
    num_classes: usize,
}

impl EmbeddingDataset {
    pub fn new(
        dim: usize,
        embeddings: Vec<f32>,
        class_labels: Vec<usize>,
        domain_labels: Option<Vec<usize>>,
        splits: Vec<Option<Split>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(DataError::Width { expected: 1, found: 0 });
        }
        let rows = class_labels.len();
        if embeddings.len() != rows * dim {
            return Err(DataError::RowCount {
                field: "embeddings",
                expected: rows,
                found: embeddings.len() / dim,
            });
        }
        if let Some(d) = &domain_labels {
            if d.len() != rows {
                return Err(DataError::RowCount {
                    field: "domain",
                    expected: rows,
                    found: d.len(),
                });
            }
        }
        if splits.len() != rows {
            return Err(DataError::RowCount {
                field: "split",
                expected: rows,
                found: splits.len(),
            });
        }
        if let Some(i) = embeddings.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite {
                row: i / dim,
                col: i % dim,
            });
        }
        let num_classes = class_labels.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; num_classes];
        for &c in &class_labels {
            seen[c] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(DataError::NonContiguousLabels(format!(
                "class {missing} has no samples but class {} exists",
                num_classes - 1
            )));
        }
        Ok(Self {
            dim,
            embeddings,
            class_labels,
            domain_labels,
            splits,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.class_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `max(domain) + 1`, or `None` without domain labels.
    pub fn num_domains(&self) -> Option<usize> {
        self.domain_labels
            .as_ref()
            .map(|d| d.iter().max().map_or(0, |m| m + 1))
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn class_labels(&self) -> &[usize] {
        &self.class_labels
    }

    pub fn domain_labels(&self) -> Option<&[usize]> {
        self.domain_labels.as_deref()
    }

    pub fn splits(&self) -> &[Option<Split>] {
        &self.splits
    }

    pub fn with_splits(mut self, splits: Vec<Option<Split>>) -> Result<Self> {
        if splits.len() != self.len() {
            return Err(DataError::RowCount {
                field: "split",
                expected: self.len(),
                found: splits.len(),
            });
        }
        self.splits = splits;
        Ok(self)
    }

    /// Row indices tagged with `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == Some(split)).collect()
    }

    /// Row indices of an optional split (`None` selects every row).
    pub fn select(&self, split: Option<Split>) -> Vec<usize> {
        match split {
            Some(s) => self.indices(s),
            None => (0..self.len()).collect(),
        }
    }

    /// The selected rows as an `f64` matrix.
    pub fn matrix(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend(self.row(i).iter().map(|&v| v as f64));
        }
        Tensor::from_parts(vec![idx.len(), self.dim], data)
    }

    pub fn classes_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.class_labels[i]).collect()
    }

    pub fn domains_of(&self, idx: &[usize]) -> Option<Vec<usize>> {
        self.domain_labels
            .as_ref()
            .map(|d| idx.iter().map(|&i| d[i]).collect())
    }

    /// SHA-256 over the little-endian bytes of the embedding matrix.
    pub fn embeddings_checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.embeddings {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_names_offending_row() {
        let err = EmbeddingDataset::new(2, vec![0.0, 1.0, f32::NAN, 0.0], vec![0, 1], None, vec![None; 2]).unwrap_err();
        assert!(matches!(err, DataError::NonFinite { row: 1, col: 0 }));
        let err = EmbeddingDataset::new(1, vec![0.0, 1.0], vec![0, 2], None, vec![None; 2]).unwrap_err();
        assert!(matches!(err, DataError::NonContiguousLabels(_)));
        let err = EmbeddingDataset::new(1, vec![0.0, 1.0, 2.0], vec![0, 1], None, vec![None; 2]).unwrap_err();
        assert!(matches!(err, DataError::RowCount { field: "embeddings", .. }));
    }
}
