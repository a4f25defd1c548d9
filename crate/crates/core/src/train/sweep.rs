use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::commands::{save_run, write_atomic};
use super::{train, TrainConfig};
use crate::data::EmbeddingDataset;
use crate::{Error, Result};

/// Cross-product grid over `TrainConfig` fields, each cell run once per
/// seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub axes: BTreeMap<String, Vec<Value>>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            axes: BTreeMap::new(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    /// Branch-1 macro AUC on the test split (validation when there is no
    /// test split).
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Mean training objective per epoch.
    pub loss_trace: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub id: String,
    pub params: BTreeMap<String, Value>,
    pub runs: Vec<SeedRun>,
    pub mean_auc: Option<f64>,
    /// Population standard deviation over successful seeds.
    pub std_auc: Option<f64>,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub base: TrainConfig,
    pub grid: SweepGrid,
    pub cells: Vec<SweepCell>,
}

/// Mean and population standard deviation, summed in input order.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

impl SweepTable {
    /// Population standard deviation of the per-cell mean AUCs.
    pub fn across_cell_std(&self) -> Option<f64> {
        let means: Vec<f64> = self.cells.iter().filter_map(|c| c.mean_auc).collect();
        mean_std(&means).map(|(_, s)| s)
    }

    /// Mean over cells of the across-seed AUC standard deviation.
    pub fn mean_seed_std(&self) -> Option<f64> {
        let stds: Vec<f64> = self.cells.iter().filter_map(|c| c.std_auc).collect();
        mean_std(&stds).map(|(m, _)| m)
    }
}

fn cells(grid: &SweepGrid) -> Vec<BTreeMap<String, Value>> {
    let mut out = vec![BTreeMap::new()];
    for (key, values) in &grid.axes {
        out = out
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.insert(key.clone(), v.clone());
                    c
                })
            })
            .collect();
    }
    out
}

fn cell_id(params: &BTreeMap<String, Value>) -> String {
    if params.is_empty() {
        return "base".into();
    }
    params.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
}

fn cell_config(base: &TrainConfig, params: &BTreeMap<String, Value>) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(base)?;
    let obj = value.as_object_mut().expect("config serialises to an object");
    for (k, v) in params {
        obj.insert(k.replace('-', "_"), v.clone());
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("sweep cell {}: {e}", cell_id(params))))
}

/// Runs every (cell, seed) pair, in parallel, and aggregates per cell.
/// A failing run is recorded in its cell and does not stop the sweep. When
/// `out_dir` is given each run writes its artefacts to
/// `out_dir/cell-<i>/seed-<s>`.
pub fn cmd_sweep(grid: &SweepGrid, base: &TrainConfig, dataset: &EmbeddingDataset, out_dir: Option<&Path>) -> Result<SweepTable> {
    if grid.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    if grid.axes.values().any(Vec::is_empty) {
        return Err(Error::Config("every sweep axis needs at least one value".into()));
    }
    let cell_params = cells(grid);
    let configs = cell_params.iter().map(|p| cell_config(base, p)).collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, u64)> = (0..configs.len()).flat_map(|c| grid.seeds.iter().map(move |&s| (c, s))).collect();
    let runs: Vec<SeedRun> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let cfg = TrainConfig {
                seed,
                ..configs[c].clone()
            };
            let outcome = train(&cfg, dataset, None).and_then(|r| {
                let run = SeedRun {
                    seed,
                    auc: None,
                    accuracy: None,
                    best_epoch: Some(r.manifest.best_epoch),
                    loss_trace: r.manifest.epochs.iter().map(|e| e.train_loss).collect(),
                    error: None,
                };
                let report = r.manifest.final_metrics.test.clone().unwrap_or_else(|| r.manifest.final_metrics.val.clone());
                if let Some(dir) = out_dir {
                    save_run(r, &cfg, &dir.join(format!("cell-{c:03}")).join(format!("seed-{seed}")))?;
                }
                Ok(SeedRun {
                    auc: Some(report.auc_macro),
                    accuracy: Some(report.accuracy),
                    ..run
                })
            });
            outcome.unwrap_or_else(|e| {
                log::warn!("sweep cell {c} seed {seed} failed: {e}");
                SeedRun {
                    seed,
                    auc: None,
                    accuracy: None,
                    best_epoch: None,
                    loss_trace: Vec::new(),
                    error: Some(e.to_string()),
                }
            })
        })
        .collect();

    let per_seed = grid.seeds.len();
    let cells = cell_params
        .into_iter()
        .zip(runs.chunks(per_seed))
        .map(|(params, runs)| {
            let aucs: Vec<f64> = runs.iter().filter_map(|r| r.auc).collect();
            let accs: Vec<f64> = runs.iter().filter_map(|r| r.accuracy).collect();
            let auc = mean_std(&aucs);
            let acc = mean_std(&accs);
            SweepCell {
                id: cell_id(&params),
                params,
                runs: runs.to_vec(),
                mean_auc: auc.map(|a| a.0),
                std_auc: auc.map(|a| a.1),
                mean_accuracy: acc.map(|a| a.0),
                std_accuracy: acc.map(|a| a.1),
                failures: runs.iter().filter(|r| r.error.is_some()).count(),
            }
        })
        .collect();
    Ok(SweepTable {
        base: base.clone(),
        grid: grid.clone(),
        cells,
    })
}

/// Writes `sweep.json` (full table) and `sweep.csv` (one row per cell).
pub fn write_sweep(table: &SweepTable, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    write_atomic(&out_dir.join("sweep.json"), &serde_json::to_vec_pretty(table)?)?;
    let axes: Vec<&String> = table.grid.axes.keys().collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = vec!["cell".into()];
    header.extend(axes.iter().map(|a| a.to_string()));
    header.extend(["mean_auc", "std_auc", "mean_accuracy", "std_accuracy", "runs", "failures"].map(String::from));
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(&header).map_err(io)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in &table.cells {
        let mut row = vec![c.id.clone()];
        row.extend(axes.iter().map(|a| c.params[*a].to_string()));
        row.extend([
            opt(c.mean_auc),
            opt(c.std_auc),
            opt(c.mean_accuracy),
            opt(c.std_accuracy),
            c.runs.len().to_string(),
            c.failures.to_string(),
        ]);
        w.write_record(&row).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&out_dir.join("sweep.csv"), &bytes)
}
