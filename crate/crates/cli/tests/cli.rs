use std::path::Path;
use std::process::{Command, Output};

fn hypcbc(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hypcbc"))
        .args(args)
        .env("HYPCBC_OUT", out_root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_str(&ok(out)).unwrap()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let d = data.to_str().unwrap();
    ok(&hypcbc(&["synth", "--out", d, "--samples", "300", "--dim", "8", "--domain-shift", "2"], root));
    assert!(data.join("manifest.json").exists());

    let config = root.join("config.json");
    std::fs::write(&config, r#"{"d1": 8, "lr": 0.01, "max-epochs": 6}"#).unwrap();
    let stdout = ok(&hypcbc(&["train", "--dataset", d, "--config", config.to_str().unwrap(), "--max-epochs", "3"], root));
    let run = root.join("train-hypcbc-seed0");
    assert_eq!(stdout.trim(), run.join("manifest.json").to_str().unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["max_epochs"], 3);
    assert_eq!(manifest["config"]["d1"], 8);
    assert_eq!(manifest["config"]["lr"], 0.01);
    assert!(run.join("epochs.csv").exists());

    let ckpt = run.join("best.ckpt");
    let c = ckpt.to_str().unwrap();
    let report = json(&hypcbc(&["eval", "--checkpoint", c, "--dataset", d, "--split", "val"], root));
    assert_eq!(report, manifest["final_metrics"]["val"]);

    let probe = json(&hypcbc(&["probe", "--dataset", d, "--checkpoint", c, "--layer", "post-map", "--target", "class", "--epochs", "5"], root));
    assert!(probe["auc_macro"].as_f64().unwrap() > 0.5);
    let raw = json(&hypcbc(&["probe", "--dataset", d, "--epochs", "5"], root));
    assert_eq!(raw["split"], "probe-holdout");

    let entropy = json(&hypcbc(&["entropy", "--checkpoint", c, "--dataset", d, "--k", "5", "--branch", "2"], root));
    assert!(entropy["domain_entropy"].as_f64().is_some());

    let disk = root.join("disk.csv");
    ok(&hypcbc(&["export", "--what", "disk2d", "--checkpoint", c, "--dataset", d, "--out", disk.to_str().unwrap()], root));
    assert!(std::fs::read_to_string(&disk).unwrap().starts_with("x,y,class,domain"));
    assert!(root.join("disk_circle.csv").exists());

    ok(&hypcbc(&["export", "--what", "boundary-toy", "--offset", "0.1,0.2"], root));
    assert!(root.join("boundary_toy/a_hyperbolic_arc.csv").exists());

    let stdout = ok(&hypcbc(
        &["sweep", "--dataset", d, "--grid", "lambda=0.1,0.5", "--seeds", "0,1", "--d1", "8", "--max-epochs", "2", "--lr", "0.01"],
        root,
    ));
    assert_eq!(stdout.lines().count(), 2);
    let table: serde_json::Value = serde_json::from_slice(&std::fs::read(root.join("sweep/sweep.json")).unwrap()).unwrap();
    assert_eq!(table["cells"].as_array().unwrap().len(), 2);
    assert!(root.join("sweep/sweep.csv").exists());
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let missing = root.join("nope");
    let m = missing.to_str().unwrap();
    assert_eq!(hypcbc(&["train", "--dataset", m], root).status.code(), Some(3));
    assert_eq!(hypcbc(&["train", "--dataset", m, "--lr", "-1"], root).status.code(), Some(2));
    assert_eq!(hypcbc(&["train", "--dataset", m, "--method", "svm"], root).status.code(), Some(2));
    assert_eq!(hypcbc(&["train", "--dataset", m, "--split", "lodo"], root).status.code(), Some(2));
    // Usage errors come from the argument parser.
    assert_eq!(hypcbc(&["train"], root).status.code(), Some(2));
}
