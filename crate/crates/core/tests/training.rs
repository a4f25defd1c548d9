mod common;

use std::collections::BTreeMap;

use serde_json::Value;

use hypcbc::autodiff::Tensor;
use hypcbc::data::{load_dataset, synth_generate, EmbeddingDataset, Split, SynthSpec};
use hypcbc::metrics::{run_probe, ProbeConfig, ProbeKind, ProbeTarget};
use hypcbc::model::Method;
use hypcbc::rng::SplitMix64;
use hypcbc::train::{cmd_eval, cmd_sweep, cmd_train, train, SweepGrid, TrainConfig};

fn small(seed: u64, separation: f64) -> EmbeddingDataset {
    synth_generate(&SynthSpec {
        dim: 16,
        samples: 600,
        class_separation: separation,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn quick(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        d1: 16,
        lr: 1e-2,
        max_epochs: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn committed_fixtures_match_the_generator() {
    let separable = synth_generate(&SynthSpec::default()).unwrap();
    assert_eq!(load_dataset(common::fixture("separable")).unwrap(), separable);
    let shift = synth_generate(&SynthSpec {
        class_separation: 3.0,
        domain_shift: 3.0,
        shift_dims: 4,
        seed: 1,
        ..SynthSpec::default()
    })
    .unwrap();
    assert_eq!(load_dataset(common::fixture("domain_shift")).unwrap(), shift);
}

#[test]
fn eval_reproduces_the_manifest_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    hypcbc::data::save_dataset(&small(2, 4.0), &data).unwrap();
    let cfg = quick(Method::Hypcbc);
    let run = cmd_train(&cfg, &data, &dir.path().join("run")).unwrap();
    let val = cmd_eval(&run.checkpoint_path, &data, Some(Split::Val)).unwrap();
    assert_eq!(val, run.manifest.final_metrics.val);
    let test = cmd_eval(&run.checkpoint_path, &data, Some(Split::Test)).unwrap();
    assert_eq!(Some(test), run.manifest.final_metrics.test);
}

#[test]
fn one_cell_sweep_equals_a_single_run() {
    let ds = small(3, 4.0);
    let cfg = quick(Method::Hyperm);
    let grid = SweepGrid {
        axes: BTreeMap::new(),
        seeds: vec![5],
    };
    let table = cmd_sweep(&grid, &cfg, &ds, None).unwrap();
    let run = train(&TrainConfig { seed: 5, ..cfg }, &ds, None).unwrap();
    let test = run.manifest.final_metrics.test.unwrap();
    let cell = &table.cells[0];
    assert_eq!(cell.runs[0].auc, Some(test.auc_macro));
    assert_eq!(cell.runs[0].accuracy, Some(test.accuracy));
    assert_eq!(cell.std_auc, Some(0.0));
}

#[test]
fn zero_lambda_cell_is_two_head_cross_entropy() {
    let ds = small(4, 4.0);
    let cfg = quick(Method::Hypcbc);
    let grid = SweepGrid {
        axes: BTreeMap::from([("lambda".to_string(), vec![Value::from(0.0), Value::from(0.5)])]),
        seeds: vec![0],
    };
    let table = cmd_sweep(&grid, &cfg, &ds, None).unwrap();
    let zero = &table.cells[0];
    assert_eq!(zero.params["lambda"], Value::from(0.0));
    let run = train(&TrainConfig { lambda: 0.0, ..cfg }, &ds, None).unwrap();
    let ce: Vec<f64> = run.manifest.epochs.iter().map(|e| e.train_ce1 + e.train_ce2).collect();
    for (a, b) in zero.runs[0].loss_trace.iter().zip(&ce) {
        assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
    }
    assert_ne!(table.cells[1].runs[0].loss_trace, zero.runs[0].loss_trace);
}

#[test]
fn per_cell_std_matches_recomputation() {
    let ds = small(6, 2.0);
    let cfg = TrainConfig {
        max_epochs: 3,
        ..quick(Method::Hypcbc)
    };
    let grid = SweepGrid {
        axes: BTreeMap::from([
            ("lambda".to_string(), vec![Value::from(0.1), Value::from(1.0)]),
            ("temperature".to_string(), vec![Value::from(1.0), Value::from(10.0)]),
        ]),
        seeds: vec![0, 1, 2],
    };
    let table = cmd_sweep(&grid, &cfg, &ds, None).unwrap();
    assert_eq!(table.cells.len(), 4);
    for cell in &table.cells {
        let aucs: Vec<f64> = cell.runs.iter().map(|r| r.auc.unwrap()).collect();
        let mean = aucs.iter().sum::<f64>() / 3.0;
        let std = (aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!((cell.mean_auc.unwrap() - mean).abs() < 1e-15);
        assert!((cell.std_auc.unwrap() - std).abs() < 1e-15);
    }
}

#[test]
fn early_stopping_on_a_constant_metric() {
    // Identical inputs give identical predictions, so validation accuracy
    // never moves after the first epoch.
    let n = 90;
    let ds = EmbeddingDataset::new(4, vec![0.0; n * 4], (0..n).map(|i| i % 3).collect(), None, vec![None; n]).unwrap();
    let cfg = TrainConfig {
        patience: 3,
        ..quick(Method::Erm)
    };
    let run = train(&cfg, &ds, None).unwrap();
    assert_eq!(run.manifest.best_epoch, 1);
    assert_eq!(run.manifest.epochs.len(), 4);
    assert!(run.manifest.stopped_early);
}

fn gaussian(rows: usize, cols: usize, rng: &mut SplitMix64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

#[test]
fn probe_on_noise_is_at_chance() {
    let mut rng = SplitMix64::new(9);
    let x = gaussian(1000, 8, &mut rng);
    let y: Vec<usize> = (0..1000).map(|_| rng.below(2)).collect();
    let r = run_probe(&x, &y, ProbeConfig::new(ProbeKind::Linear, ProbeTarget::Domain), 0).unwrap();
    assert!((r.auc_macro - 0.5).abs() < 0.05, "{}", r.auc_macro);
}

#[test]
fn mlp_probe_separates_xor_where_linear_cannot() {
    let mut rng = SplitMix64::new(10);
    let x = gaussian(1000, 2, &mut rng);
    let y: Vec<usize> = (0..1000).map(|i| usize::from((x.row(i)[0] > 0.0) != (x.row(i)[1] > 0.0))).collect();
    let linear = run_probe(&x, &y, ProbeConfig::new(ProbeKind::Linear, ProbeTarget::Class), 0).unwrap();
    let mlp = run_probe(&x, &y, ProbeConfig::new(ProbeKind::Mlp, ProbeTarget::Class), 0).unwrap();
    assert!((linear.auc_macro - 0.5).abs() < 0.1, "linear {}", linear.auc_macro);
    assert!(mlp.auc_macro > 0.9, "mlp {}", mlp.auc_macro);
}
