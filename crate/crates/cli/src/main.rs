//! `hypcbc` command-line front end.
//!
//! Configuration precedence for `train` and `sweep`: command-line flags,
//! then the JSON file given with `--config`, then built-in defaults.
//! Outputs go under `--out`, or under `$HYPCBC_OUT` (default `runs/`).
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
//! 4 numeric failure, 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use hypcbc::data::{save_dataset, synth_generate, Split, SynthSpec};
use hypcbc::metrics::{ProbeConfig, ProbeKind, ProbeTarget, DEFAULT_ENTROPY_K};
use hypcbc::train::{
    boundary_toy, cmd_entropy, cmd_eval, cmd_export_disk, cmd_probe, cmd_sweep, cmd_train, write_boundary_toy, write_sweep, BoundaryToyConfig, ProbeLayer, ProbeSource, SweepGrid, TrainConfig,
};
use hypcbc::{Error, Result};

const OUT_ENV: &str = "HYPCBC_OUT";

#[derive(Parser)]
#[command(name = "hypcbc", version, about = "Hyperbolic classification heads on frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its checkpoint and manifest.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint's branch-1 predictions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also write the report to this JSON file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a linear or MLP probe on frozen embeddings.
    Probe {
        #[arg(long)]
        dataset: PathBuf,
        /// Probe a model layer instead of the raw embeddings.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = LayerArg::PostMap)]
        layer: LayerArg,
        #[arg(long, default_value_t = 1)]
        branch: usize,
        #[arg(long, value_enum, default_value_t = KindArg::Linear)]
        kind: KindArg,
        #[arg(long, value_enum, default_value_t = TargetArg::Domain)]
        target: TargetArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Local k-NN label entropy of a branch's ball embeddings.
    Entropy {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value_t = DEFAULT_ENTROPY_K)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        branch: usize,
    },
    /// Export 2D disk embeddings or the decision-boundary toy panels.
    Export {
        #[arg(long, value_enum)]
        what: ExportWhat,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, required_if_eq("what", "disk2d"))]
        checkpoint: Option<PathBuf>,
        #[arg(long, required_if_eq("what", "disk2d"))]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Boundary offset `x,y` for the toy.
        #[arg(long, value_delimiter = ',')]
        offset: Option<Vec<f64>>,
        /// Boundary normal `x,y` for the toy.
        #[arg(long, value_delimiter = ',')]
        normal: Option<Vec<f64>>,
    },
    /// Cross-product sweep over config fields and seeds.
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Axis as `field=v1,v2,...`; repeatable.
        #[arg(long = "grid")]
        grid: Vec<String>,
        /// JSON file with `axes` and `seeds`.
        #[arg(long)]
        grid_file: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Also keep every run's checkpoint and manifest.
        #[arg(long)]
        keep_runs: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate a synthetic embedding dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long)]
        num_domains: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        class_separation: Option<f64>,
        #[arg(long)]
        domain_shift: Option<f64>,
        #[arg(long)]
        shift_dims: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON file with TrainConfig keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    d1: Option<usize>,
    #[arg(long)]
    d2: Option<usize>,
    #[arg(long)]
    curvature: Option<f64>,
    #[arg(long)]
    clip_radius: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    detach_teacher: Option<bool>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `default` (stored tags), `stratified` or `lodo`.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Held-out domain for `--split lodo`.
    #[arg(long)]
    lodo_domain: Option<usize>,
    /// `auto`, `accuracy`, `auc` or `loss`.
    #[arg(long)]
    val_metric: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LayerArg {
    Backbone,
    PreMap,
    PostMap,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Class,
    Domain,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportWhat {
    Disk2d,
    BoundaryToy,
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn merge_keys(target: &mut Map<String, Value>, source: &Map<String, Value>) {
    for (k, v) in source {
        target.insert(k.replace('-', "_"), v.clone());
    }
}

/// Defaults, overlaid by the config file, overlaid by flags.
fn resolve_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(TrainConfig::default())?;
    let obj = value.as_object_mut().expect("config is an object");
    if let Some(path) = &args.config {
        match read_json(path)? {
            Value::Object(file) => merge_keys(obj, &file),
            _ => return Err(Error::Config(format!("{} must hold a JSON object", path.display()))),
        }
    }
    let mut set = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            obj.insert(k.to_string(), v);
        }
    };
    set("method", args.method.clone().map(Value::from));
    set("d1", args.d1.map(Value::from));
    set("d2", args.d2.map(Value::from));
    set("curvature", args.curvature.map(Value::from));
    set("clip_radius", args.clip_radius.map(Value::from));
    set("temperature", args.temperature.map(Value::from));
    set("lambda", args.lambda.map(Value::from));
    set("detach_teacher", args.detach_teacher.map(Value::from));
    set("lr", args.lr.map(Value::from));
    set("min_lr", args.min_lr.map(Value::from));
    set("weight_decay", args.weight_decay.map(Value::from));
    set("batch_size", args.batch_size.map(Value::from));
    set("patience", args.patience.map(Value::from));
    set("max_epochs", args.max_epochs.map(Value::from));
    set("seed", args.seed.map(Value::from));
    set("val_metric", args.val_metric.clone().map(Value::from));

    if args.split.is_some() || args.split_seed.is_some() || args.lodo_domain.is_some() {
        let current = obj.get("split").cloned().unwrap_or(Value::Null);
        let strategy = args
            .split
            .clone()
            .or_else(|| current.get("strategy").and_then(Value::as_str).map(str::to_string))
            .unwrap_or_else(|| "stratified".into());
        let mut plan = Map::new();
        plan.insert("strategy".into(), Value::from(strategy.clone()));
        let seed = args.split_seed.or_else(|| current.get("seed").and_then(Value::as_u64)).unwrap_or(0);
        match strategy.as_str() {
            "default" => {}
            "stratified" => {
                plan.insert("seed".into(), Value::from(seed));
            }
            "lodo" => {
                let domain = args
                    .lodo_domain
                    .or_else(|| current.get("domain").and_then(Value::as_u64).map(|d| d as usize))
                    .ok_or_else(|| Error::Config("--split lodo needs --lodo-domain".into()))?;
                plan.insert("seed".into(), Value::from(seed));
                plan.insert("domain".into(), Value::from(domain));
            }
            other => return Err(Error::Config(format!("unknown split strategy `{other}`"))),
        }
        obj.insert("split".into(), Value::Object(plan));
    }
    let config: TrainConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

fn parse_axis(spec: &str) -> Result<(String, Vec<Value>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("grid axis `{spec}` is not `field=v1,v2,...`")))?;
    let values = values
        .split(',')
        .filter(|v| !v.is_empty())
        .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::from(v)))
        .collect();
    Ok((key.replace('-', "_"), values))
}

fn resolve_grid(axes: &[String], file: Option<&Path>, seeds: Option<&[u64]>) -> Result<SweepGrid> {
    let mut grid = match file {
        Some(p) => serde_json::from_value(read_json(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => SweepGrid::default(),
    };
    for a in axes {
        let (k, v) = parse_axis(a)?;
        grid.axes.insert(k, v);
    }
    if let Some(s) = seeds {
        grid.seeds = s.to_vec();
    }
    Ok(grid)
}

fn pair(flag: &str, v: &[f64]) -> Result<[f64; 2]> {
    match v {
        [x, y] => Ok([*x, *y]),
        _ => Err(Error::Config(format!("{flag} takes exactly two values `x,y`"))),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { dataset, out, config } => {
            let config = resolve_config(&config)?;
            let out = out.unwrap_or_else(|| out_root().join(format!("train-{}-seed{}", config.method, config.seed)));
            let result = cmd_train(&config, &dataset, &out)?;
            let m = &result.manifest;
            log::info!("best epoch {} of {}, validation {:.4}", m.best_epoch, m.epochs.len(), m.best_val_metric);
            println!("{}", result.manifest_path.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            out,
        } => {
            let report = cmd_eval(&checkpoint, &dataset, split.split())?;
            if let Some(out) = out {
                fs::write(out, serde_json::to_vec_pretty(&report)?)?;
            }
            print_json(&report)?;
        }
        Command::Probe {
            dataset,
            checkpoint,
            layer,
            branch,
            kind,
            target,
            epochs,
            lr,
            hidden,
            split,
            seed,
        } => {
            let kind = match kind {
                KindArg::Linear => ProbeKind::Linear,
                KindArg::Mlp => ProbeKind::Mlp,
            };
            let target = match target {
                TargetArg::Class => ProbeTarget::Class,
                TargetArg::Domain => ProbeTarget::Domain,
            };
            let mut cfg = ProbeConfig::new(kind, target);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.lr = lr.unwrap_or(cfg.lr);
            cfg.hidden = hidden.unwrap_or(cfg.hidden);
            let (source, layer) = match checkpoint {
                Some(p) => (
                    ProbeSource::Checkpoint(p),
                    match layer {
                        LayerArg::Backbone => ProbeLayer::Backbone,
                        LayerArg::PreMap => ProbeLayer::PreMap,
                        LayerArg::PostMap => ProbeLayer::PostMap,
                    },
                ),
                None => (ProbeSource::Raw, ProbeLayer::Backbone),
            };
            print_json(&cmd_probe(&source, layer, branch, &dataset, split.split(), cfg, seed)?)?;
        }
        Command::Entropy {
            checkpoint,
            dataset,
            split,
            k,
            branch,
        } => print_json(&cmd_entropy(&checkpoint, &dataset, split.split(), k, branch)?)?,
        Command::Export {
            what,
            out,
            checkpoint,
            dataset,
            split,
            offset,
            normal,
        } => match what {
            ExportWhat::Disk2d => {
                let out = out.unwrap_or_else(|| out_root().join("disk2d.csv"));
                let (ckpt, data) = (checkpoint.expect("required by clap"), dataset.expect("required by clap"));
                let n = cmd_export_disk(&ckpt, &data, split.split(), &out)?;
                log::info!("exported {n} points");
                println!("{}", out.display());
            }
            ExportWhat::BoundaryToy => {
                let out = out.unwrap_or_else(|| out_root().join("boundary_toy"));
                let mut cfg = BoundaryToyConfig::default();
                if let Some(o) = offset {
                    cfg.offset = pair("--offset", &o)?;
                }
                if let Some(a) = normal {
                    cfg.normal = pair("--normal", &a)?;
                }
                write_boundary_toy(&boundary_toy(&cfg)?, &out)?;
                println!("{}", out.display());
            }
        },
        Command::Sweep {
            dataset,
            out,
            grid,
            grid_file,
            seeds,
            keep_runs,
            config,
        } => {
            let base = resolve_config(&config)?;
            let grid = resolve_grid(&grid, grid_file.as_deref(), seeds.as_deref())?;
            let out = out.unwrap_or_else(|| out_root().join("sweep"));
            let ds = hypcbc::data::load_dataset(&dataset)?;
            let table = cmd_sweep(&grid, &base, &ds, keep_runs.then_some(out.as_path()))?;
            write_sweep(&table, &out)?;
            for c in &table.cells {
                let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
                println!("{}\tauc {} ± {}\tfailures {}", c.id, fmt(c.mean_auc), fmt(c.std_auc), c.failures);
            }
        }
        Command::Synth {
            out,
            num_classes,
            num_domains,
            dim,
            samples,
            class_separation,
            domain_shift,
            shift_dims,
            noise,
            seed,
        } => {
            let d = SynthSpec::default();
            let spec = SynthSpec {
                num_classes: num_classes.unwrap_or(d.num_classes),
                num_domains: num_domains.unwrap_or(d.num_domains),
                dim: dim.unwrap_or(d.dim),
                samples: samples.unwrap_or(d.samples),
                class_separation: class_separation.unwrap_or(d.class_separation),
                domain_shift: domain_shift.unwrap_or(d.domain_shift),
                shift_dims: shift_dims.unwrap_or(d.shift_dims),
                noise: noise.unwrap_or(d.noise),
                seed: seed.unwrap_or(d.seed),
            };
            let ds = synth_generate(&spec)?;
            let manifest = save_dataset(&ds, &out)?;
            log::info!("wrote {} rows of width {}", manifest.num_samples, manifest.n);
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) => 3,
        Error::Numeric(_) | Error::Geometry(_) | Error::Diff(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"lambda": 0.5, "temperature": 5.0, "max-epochs": 7}"#).unwrap();
        let args = ConfigArgs {
            config: Some(path),
            lambda: Some(1.0),
            ..ConfigArgs::default()
        };
        let c = resolve_config(&args).unwrap();
        assert_eq!((c.lambda, c.temperature, c.max_epochs, c.d1), (1.0, 5.0, 7, 128));
    }

    #[test]
    fn lodo_flags_build_a_plan() {
        let args = ConfigArgs {
            split: Some("lodo".into()),
            lodo_domain: Some(2),
            ..ConfigArgs::default()
        };
        let c = resolve_config(&args).unwrap();
        assert_eq!(c.split, hypcbc::data::SplitPlan::Lodo { domain: 2, seed: 0 });
        let bad = ConfigArgs {
            split: Some("lodo".into()),
            ..ConfigArgs::default()
        };
        assert!(matches!(resolve_config(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn grid_axes_parse_numbers_and_words() {
        let (k, v) = parse_axis("lambda=0.1,0.2").unwrap();
        assert_eq!((k.as_str(), v), ("lambda", vec![Value::from(0.1), Value::from(0.2)]));
        let (k, v) = parse_axis("method=erm,hyperm").unwrap();
        assert_eq!((k.as_str(), v), ("method", vec![Value::from("erm"), Value::from("hyperm")]));
        assert!(parse_axis("lambda").is_err());
    }
}
