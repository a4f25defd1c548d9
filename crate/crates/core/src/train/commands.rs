use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{train, RunManifest, TrainConfig, TrainResult};
use crate::autodiff::Tensor;
use crate::data::{load_dataset, make_split, DataError, EmbeddingDataset, Split};
use crate::geometry::{BallPoint, Curvature};
use crate::metrics::{entropy_report, evaluate_scores, export_disk_embeddings, run_probe, EntropyReport, MetricsReport, ProbeConfig, ProbeTarget};
use crate::model::{ce_loss, load_checkpoint, softmax_with_temperature, write_checkpoint, Checkpoint, ModelParams};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EPOCHS_FILE: &str = "epochs.csv";

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub manifest: RunManifest,
    pub checkpoint_path: PathBuf,
    pub manifest_path: PathBuf,
}

/// Which embedding layer a probe reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeLayer {
    /// The input embeddings themselves.
    Backbone,
    /// Clipped Euclidean projection of a branch, before the exponential map.
    PreMap,
    /// Ball embeddings of a branch.
    PostMap,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeSource {
    Raw,
    Checkpoint(PathBuf),
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn load(path: &Path) -> Result<EmbeddingDataset> {
    Ok(load_dataset(path)?)
}

/// Accuracy, macro AUC (on softmax probabilities) and cross-entropy of the
/// branch-1 logits.
pub fn evaluate_params(params: &ModelParams, x: &Tensor, labels: &[usize], split: &str, seed: u64) -> Result<MetricsReport> {
    let logits = params.logits(x)?;
    let loss = ce_loss(&logits, labels)?;
    let probs = softmax_with_temperature(&logits, 1.0)?;
    evaluate_scores(&probs, labels, split, seed, Some(loss))
}

fn epochs_csv(manifest: &RunManifest) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in &manifest.epochs {
        w.serialize(e).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Trains on the dataset at `dataset_path` and writes the best checkpoint,
/// the run manifest and a per-epoch CSV into `out_dir`.
pub fn cmd_train(config: &TrainConfig, dataset_path: &Path, out_dir: &Path) -> Result<TrainOutput> {
    config.validate()?;
    let ds = load(dataset_path)?;
    let result = train(config, &ds, Some(&dataset_path.display().to_string()))?;
    save_run(result, config, out_dir)
}

/// Writes the checkpoint, manifest and per-epoch CSV of a finished run.
pub fn save_run(result: TrainResult, config: &TrainConfig, out_dir: &Path) -> Result<TrainOutput> {
    fs::create_dir_all(out_dir)?;
    let ckpt = Checkpoint {
        params: result.best,
        config: serde_json::to_value(config)?,
        epoch: result.manifest.best_epoch,
        optimizer: Some(result.optimizer),
    };
    let bytes = write_checkpoint(&ckpt)?;
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    write_atomic(&checkpoint_path, &bytes)?;
    let mut manifest = result.manifest;
    manifest.checkpoint_sha256 = Some(hex::encode(Sha256::digest(&bytes)));
    write_atomic(&out_dir.join(EPOCHS_FILE), &epochs_csv(&manifest)?)?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    write_atomic(&manifest_path, &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(TrainOutput {
        manifest,
        checkpoint_path,
        manifest_path,
    })
}

/// Loads a checkpoint together with the dataset re-split by the plan
/// recorded in the checkpoint.
fn checkpoint_and_data(checkpoint: &Path, dataset_path: &Path) -> Result<(Checkpoint, EmbeddingDataset)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = load(dataset_path)?;
    if ds.dim() != ckpt.params.spec.input_dim {
        return Err(DataError::Width {
            expected: ckpt.params.spec.input_dim,
            found: ds.dim(),
        }
        .into());
    }
    let config: TrainConfig = serde_json::from_value(ckpt.config.clone())?;
    let ds = make_split(&ds, config.split)?;
    Ok((ckpt, ds))
}

/// Branch-1 metrics of a checkpoint on one split (`None`: every row).
pub fn cmd_eval(checkpoint: &Path, dataset_path: &Path, split: Option<Split>) -> Result<MetricsReport> {
    let (ckpt, ds) = checkpoint_and_data(checkpoint, dataset_path)?;
    let idx = ds.select(split);
    if idx.is_empty() {
        return Err(Error::Config(format!("split {split:?} is empty")));
    }
    let seed = ckpt.config.get("seed").and_then(|s| s.as_u64()).unwrap_or(0);
    let name = split.map_or("all", Split::as_str);
    evaluate_params(&ckpt.params, &ds.matrix(&idx), &ds.classes_of(&idx), name, seed)
}

/// Embeddings of `layer` for the rows of `x`; `branch` is 1-based.
pub fn layer_features(params: Option<&ModelParams>, layer: ProbeLayer, branch: usize, x: &Tensor) -> Result<Tensor> {
    if layer == ProbeLayer::Backbone {
        return Ok(x.clone());
    }
    let params = params.ok_or_else(|| Error::Config("this probe layer needs a checkpoint".into()))?;
    let mut outs = params.forward(x)?;
    if branch == 0 || branch > outs.len() {
        return Err(Error::Config(format!("model has {} branch(es), asked for {branch}", outs.len())));
    }
    let out = outs.swap_remove(branch - 1);
    match layer {
        ProbeLayer::PreMap => Ok(out.h),
        _ => out
            .z
            .ok_or_else(|| Error::Config("the Euclidean head has no ball embeddings".into())),
    }
}

/// Fits a probe on frozen embeddings of the chosen layer.
pub fn cmd_probe(
    source: &ProbeSource,
    layer: ProbeLayer,
    branch: usize,
    dataset_path: &Path,
    split: Option<Split>,
    cfg: ProbeConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let (params, ds) = match source {
        ProbeSource::Raw => (None, load(dataset_path)?),
        ProbeSource::Checkpoint(p) => {
            let (ckpt, ds) = checkpoint_and_data(p, dataset_path)?;
            (Some(ckpt.params), ds)
        }
    };
    let idx = ds.select(split);
    let targets = match cfg.target {
        ProbeTarget::Class => ds.classes_of(&idx),
        ProbeTarget::Domain => ds.domains_of(&idx).ok_or(DataError::MissingDomains)?,
    };
    let features = layer_features(params.as_ref(), layer, branch, &ds.matrix(&idx))?;
    run_probe(&features, &targets, cfg, seed)
}

fn ball_points(z: &Tensor, c: f64) -> Result<Vec<BallPoint>> {
    let c = Curvature::new(c)?;
    (0..z.rows())
        .map(|i| Ok(BallPoint::new(z.row(i).to_vec(), c)?))
        .collect()
}

/// Local k-NN label entropy of a branch's ball embeddings.
pub fn cmd_entropy(checkpoint: &Path, dataset_path: &Path, split: Option<Split>, k: usize, branch: usize) -> Result<EntropyReport> {
    let (ckpt, ds) = checkpoint_and_data(checkpoint, dataset_path)?;
    let idx = ds.select(split);
    let z = layer_features(Some(&ckpt.params), ProbeLayer::PostMap, branch, &ds.matrix(&idx))?;
    let points = ball_points(&z, ckpt.params.spec.curvature)?;
    let domains = ds.domains_of(&idx);
    entropy_report(&points, &ds.classes_of(&idx), domains.as_deref(), k)
}

/// 2D disk export of a checkpoint's two-dimensional branch.
pub fn cmd_export_disk(checkpoint: &Path, dataset_path: &Path, split: Option<Split>, out_path: &Path) -> Result<usize> {
    let (ckpt, ds) = checkpoint_and_data(checkpoint, dataset_path)?;
    if let Some(dir) = out_path.parent() {
        fs::create_dir_all(dir)?;
    }
    export_disk_embeddings(&ckpt.params, &ds, split, out_path)
}
