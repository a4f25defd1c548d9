//! Training loop, run manifests, and the subcommand implementations behind
//! the command-line front end.

mod commands;
mod sweep;
mod toy;

pub use commands::{cmd_entropy, cmd_eval, cmd_export_disk, cmd_probe, cmd_train, evaluate_params, layer_features, save_run, ProbeLayer, ProbeSource, TrainOutput, CHECKPOINT_FILE, EPOCHS_FILE, MANIFEST_FILE};
pub use sweep::{cmd_sweep, write_sweep, SeedRun, SweepCell, SweepGrid, SweepTable};
pub use toy::{boundary_toy, write_boundary_toy, BoundaryToy, BoundaryToyConfig};

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::data::{make_split, BatchIterator, EmbeddingDataset, Split, SplitPlan};
use crate::metrics::MetricsReport;
use crate::model::{init_params, LossWeights, Method, ModelParams, ModelSpec};
use crate::optim::{AdamWConfig, EarlyStopper, Mode, OptimizerState, Schedule, StopDecision};
use crate::{Error, Result};

/// Metric tracked on the validation split for early stopping and model
/// selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValMetric {
    /// Accuracy, except AUC under leave-one-domain-out splits.
    Auto,
    Accuracy,
    Auc,
    Loss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub d1: usize,
    pub d2: usize,
    pub curvature: f64,
    pub clip_radius: f64,
    pub temperature: f64,
    pub lambda: f64,
    /// Stop gradients from the consistency term into branch 2.
    pub detach_teacher: bool,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub split: SplitPlan,
    pub val_metric: ValMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Hypcbc,
            d1: 128,
            d2: 2,
            curvature: 1.0,
            clip_radius: 1.0,
            temperature: 3.0,
            lambda: 0.2,
            detach_teacher: true,
            lr: 1e-4,
            min_lr: 0.0,
            weight_decay: 0.01,
            batch_size: 64,
            patience: 10,
            max_epochs: 100,
            seed: 0,
            split: SplitPlan::Stratified { seed: 0 },
            val_metric: ValMetric::Auto,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.lr {
            return Err(Error::Config(format!("need 0 ≤ min_lr ≤ lr and lr > 0 (lr {}, min_lr {})", self.lr, self.min_lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        self.loss_weights().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            temperature: self.temperature,
            detach_teacher: self.detach_teacher,
        }
    }

    pub fn model_spec(&self, input_dim: usize, num_classes: usize) -> ModelSpec {
        ModelSpec {
            method: self.method,
            input_dim,
            d1: self.d1,
            d2: self.d2,
            num_classes,
            curvature: self.curvature,
            clip_radius: self.clip_radius,
        }
    }

    fn resolved_val_metric(&self) -> ValMetric {
        match (self.val_metric, self.split) {
            (ValMetric::Auto, SplitPlan::Lodo { .. }) => ValMetric::Auc,
            (ValMetric::Auto, _) => ValMetric::Accuracy,
            (m, _) => m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    /// Batch-size-weighted mean of the training objective.
    pub train_loss: f64,
    pub train_ce1: f64,
    pub train_ce2: f64,
    pub train_kl: f64,
    pub val_accuracy: f64,
    pub val_auc: f64,
    pub val_loss: f64,
    pub val_metric: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub path: Option<String>,
    pub rows: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub num_domains: Option<usize>,
    pub embeddings_sha256: String,
    pub split_sizes: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub train: MetricsReport,
    pub val: MetricsReport,
    pub test: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started_unix: u64,
    pub finished_unix: u64,
}

/// Machine-readable record of a training run. Everything except
/// `timestamps` is a deterministic function of the config and the dataset
/// bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub build: String,
    pub config: TrainConfig,
    pub model: ModelSpec,
    pub dataset: DatasetInfo,
    pub val_metric: ValMetric,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub stopped_early: bool,
    pub final_metrics: FinalMetrics,
    pub checkpoint_sha256: Option<String>,
    pub timestamps: Timestamps,
}

/// Result of [`train`]: the selected parameters (f32-exact) and the
/// optimizer state at that epoch.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub best: ModelParams,
    pub optimizer: OptimizerState,
    pub manifest: RunManifest,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn build_id() -> String {
    match option_env!("HYPCBC_GIT_REV") {
        Some(rev) => format!("{}+{rev}", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn val_score(metric: ValMetric, r: &MetricsReport) -> f64 {
    match metric {
        ValMetric::Auc => r.auc_macro,
        ValMetric::Loss => r.loss.unwrap_or(f64::INFINITY),
        _ => r.accuracy,
    }
}

/// Applies the split plan and trains one model.
///
/// Each epoch runs shuffled mini-batches (forward, objective, backward,
/// AdamW step at the cosine-scheduled rate, projection of MLR offsets),
/// then scores the f32-rounded parameters on the validation split. The
/// best-scoring snapshot is kept; training stops after `patience` epochs
/// without strict improvement.
pub fn train(config: &TrainConfig, dataset: &EmbeddingDataset, dataset_path: Option<&str>) -> Result<TrainResult> {
    config.validate()?;
    let started = unix_now();
    let ds = make_split(dataset, config.split)?;
    let train_idx = ds.indices(Split::Train);
    let val_idx = ds.indices(Split::Val);
    let test_idx = ds.indices(Split::Test);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config("split plan leaves train or validation empty".into()));
    }
    let spec = config.model_spec(ds.dim(), ds.num_classes());
    let mut params = init_params(config.seed, spec)?;
    let weights = config.loss_weights();
    let metric = config.resolved_val_metric();
    let mode = if metric == ValMetric::Loss { Mode::Minimize } else { Mode::Maximize };

    let batches = BatchIterator::new(train_idx.clone(), config.batch_size, config.seed, false);
    let total_steps = (config.max_epochs * batches.batches_per_epoch()) as u64;
    let schedule = Schedule::new(config.lr, config.min_lr, total_steps)?;
    let mut opt = OptimizerState::new(AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let mut stopper = EarlyStopper::new(config.patience, mode);
    let x_val = ds.matrix(&val_idx);
    let y_val = ds.classes_of(&val_idx);

    let mut logs = Vec::new();
    let mut best = params.rounded_to_f32();
    let mut best_opt = opt.clone();
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        let lr_first = schedule.lr(opt.step)?;
        let (mut sum, mut ce1, mut ce2, mut kl, mut seen) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for (bi, batch) in batches.epoch(epoch as u64 - 1).iter().enumerate() {
            let xb = ds.matrix(batch);
            let yb = ds.classes_of(batch);
            let diagnose = |e: Error, params: &ModelParams| {
                let norms: Vec<String> = params.norms().iter().map(|(n, v)| format!("{n}={v:.4e}")).collect();
                Error::Numeric(format!("epoch {epoch}, batch {bi}: {e}; parameter norms: {}", norms.join(", ")))
            };
            let (parts, grads) = params.loss_and_grads(&xb, &yb, weights).map_err(|e| match e {
                Error::Numeric(_) | Error::Diff(_) | Error::Geometry(_) => diagnose(e, &params),
                other => other,
            })?;
            let lr = schedule.lr(opt.step)?;
            opt.step(&mut params.tensors, &grads, lr).map_err(|e| diagnose(e, &params))?;
            params.project_offsets();
            let w = batch.len() as f64;
            sum += parts.total * w;
            ce1 += parts.ce1 * w;
            ce2 += parts.ce2 * w;
            kl += parts.kl * w;
            seen += batch.len();
        }
        let snapshot = params.rounded_to_f32();
        let val = evaluate_params(&snapshot, &x_val, &y_val, "val", config.seed)?;
        let score = val_score(metric, &val);
        let decision = stopper.update(score);
        let improved = stopper.last_improved();
        if improved {
            best = snapshot;
            best_opt = opt.clone();
        }
        let n = seen as f64;
        logs.push(EpochLog {
            epoch,
            lr: lr_first,
            train_loss: sum / n,
            train_ce1: ce1 / n,
            train_ce2: ce2 / n,
            train_kl: kl / n,
            val_accuracy: val.accuracy,
            val_auc: val.auc_macro,
            val_loss: val.loss.unwrap_or(f64::NAN),
            val_metric: score,
            improved,
        });
        log::debug!("epoch {epoch}: loss {:.5} val {:.4}", sum / n, score);
        if decision == StopDecision::Stop {
            stopped_early = epoch < config.max_epochs;
            break;
        }
    }

    let eval_split = |idx: &[usize], name: &str| evaluate_params(&best, &ds.matrix(idx), &ds.classes_of(idx), name, config.seed);
    let final_metrics = FinalMetrics {
        train: eval_split(&train_idx, "train")?,
        val: eval_split(&val_idx, "val")?,
        test: if test_idx.is_empty() { None } else { Some(eval_split(&test_idx, "test")?) },
    };
    let manifest = RunManifest {
        tool: "hypcbc".into(),
        build: build_id(),
        config: config.clone(),
        model: spec,
        dataset: DatasetInfo {
            path: dataset_path.map(str::to_string),
            rows: ds.len(),
            dim: ds.dim(),
            num_classes: ds.num_classes(),
            num_domains: ds.num_domains(),
            embeddings_sha256: ds.embeddings_checksum(),
            split_sizes: [train_idx.len(), val_idx.len(), test_idx.len()],
        },
        val_metric: metric,
        epochs: logs,
        best_epoch: stopper.best_epoch(),
        best_val_metric: stopper.best().unwrap_or(f64::NAN),
        stopped_early,
        final_metrics,
        checkpoint_sha256: None,
        timestamps: Timestamps {
            started_unix: started,
            finished_unix: unix_now(),
        },
    };
    Ok(TrainResult {
        best,
        optimizer: best_opt,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};

    fn tiny() -> EmbeddingDataset {
        synth_generate(&SynthSpec {
            samples: 300,
            dim: 16,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    fn quick(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            d1: 16,
            max_epochs: 5,
            lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_match_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.d1, c.d2, c.batch_size, c.patience, c.max_epochs), (128, 2, 64, 10, 100));
        assert_eq!((c.curvature, c.clip_radius, c.temperature, c.lambda, c.lr), (1.0, 1.0, 3.0, 0.2, 1e-4));
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lamda": 0.1}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"lambda": 0.5, "method": "erm"}"#).unwrap();
        assert_eq!((c.lambda, c.method, c.d1), (0.5, Method::Erm, 128));
        assert!(TrainConfig { temperature: 0.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..c }.validate().is_err());
    }

    #[test]
    fn short_runs_are_deterministic() {
        let ds = tiny();
        for m in [Method::Erm, Method::Hyperm, Method::Hypcbc] {
            let a = train(&quick(m), &ds, None).unwrap();
            let b = train(&quick(m), &ds, None).unwrap();
            assert_eq!(a.best, b.best);
            let (mut ma, mut mb) = (a.manifest, b.manifest);
            ma.timestamps = mb.timestamps.clone();
            mb.timestamps = ma.timestamps.clone();
            assert_eq!(serde_json::to_string(&ma).unwrap(), serde_json::to_string(&mb).unwrap());
            assert!(ma.epochs.len() <= 5);
        }
    }

    #[test]
    fn recorded_val_metric_matches_reevaluation() {
        let ds = tiny();
        let cfg = quick(Method::Hypcbc);
        let r = train(&cfg, &ds, None).unwrap();
        let split = make_split(&ds, cfg.split).unwrap();
        let idx = split.indices(Split::Val);
        let val = evaluate_params(&r.best, &split.matrix(&idx), &split.classes_of(&idx), "val", 0).unwrap();
        assert_eq!(val.accuracy, r.manifest.best_val_metric);
    }

    #[test]
    fn lodo_uses_auc() {
        let cfg = TrainConfig {
            split: SplitPlan::Lodo { domain: 0, seed: 0 },
            ..quick(Method::Hyperm)
        };
        assert_eq!(cfg.resolved_val_metric(), ValMetric::Auc);
        let ds = tiny();
        let held_out = ds.domain_labels().unwrap().iter().filter(|&&d| d == 0).count();
        let r = train(&cfg, &ds, None).unwrap();
        assert_eq!(r.manifest.final_metrics.test.as_ref().unwrap().num_samples, held_out);
    }
}
