//! End-to-end behaviour of the `evipar` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evipar_cli::{resolve_config, TrainArgs};
use evipar_core::config::Components;

const SPEC: &str = r#"
seed = 3
rows = 4
cols = 2
visual_dim = 8
text_dim = 8
snr = 6.0
occlusion_rate = 0.2
occlusion_region = "upper"
flip_rate = 0.05
train = 64
val = 0
test = 32
"#;

const CONFIG: &str = r#"
seed = 7

[data]
batch_size = 16

[model]
common_dim = 8
heads = 2
ffn_multiplier = 2

[curriculum]
warmup_epochs = 1
total_epochs = 2

[optimizer]
learning_rate = 0.02
"#;

fn evipar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evipar"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesizes the small dataset and trains on it; returns (dataset, run dir).
fn prepare(dir: &Path) -> (PathBuf, PathBuf) {
    let spec = write(dir, "spec.toml", SPEC);
    let config = write(dir, "run.toml", CONFIG);
    let data = dir.join("data");
    let run = dir.join("run");
    let o = evipar(&["synth", "--spec", s(&spec), "--out", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = evipar(&["train", "--config", s(&config), "--dataset", s(&data), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    (data, run)
}

fn eval(data: &Path, run: &Path, out: &Path, extra: &[&str]) -> Output {
    let config = run.join("config.toml");
    let ckpt = run.join("checkpoint.evip");
    let mut args = vec![
        "eval", "--config", s(&config), "--checkpoint", s(&ckpt), "--dataset", s(data), "--out", s(out),
    ];
    args.extend_from_slice(extra);
    evipar(&args)
}

#[test]
fn synth_writes_files_matching_the_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "spec.toml", SPEC);
    let out = dir.path().join("data");
    let o = evipar(&["synth", "--spec", s(&spec), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["manifest.json", "text.f32", "train.evipfeat", "val.evipfeat", "test.evipfeat"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["splits"][0]["count"], 64);
    assert_eq!(manifest["splits"][2]["count"], 32);
}

#[test]
fn invalid_spec_exits_with_config_code_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "spec.toml", "flip_rate = 0.7\n");
    let o = evipar(&["synth", "--spec", s(&spec), "--out", s(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("flip_rate"), "{}", stderr(&o));

    let spec = write(dir.path(), "typo.toml", "rowz = 3\n");
    let o = evipar(&["synth", "--spec", s(&spec), "--out", s(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rowz"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "run.toml", CONFIG);
    let absent = dir.path().join("nowhere");
    let o = evipar(&["train", "--config", s(&config), "--dataset", s(&absent), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}

#[test]
fn train_writes_manifest_log_and_checkpoint_then_eval_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = prepare(dir.path());
    for f in ["run.json", "config.toml", "epochs.jsonl", "checkpoint.evip", "timings.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("epochs.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["curriculum"]["total_epochs"], 2);

    let out = dir.path().join("eval");
    let o = eval(&data, &run, &out, &["--reject", "0.5,0.8,1.0", "--attmap"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mA"));
    let rejection = std::fs::read_to_string(out.join("rejection.csv")).unwrap();
    assert_eq!(rejection.lines().count(), 1 + 3);
    assert!(rejection.starts_with("coverage,accuracy\n"));
    let attention = std::fs::read_to_string(out.join("attention.csv")).unwrap();
    assert_eq!(attention.lines().count(), 1 + 12 * (12 + 8 + 1));
    let predictions = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(predictions.lines().count(), 1 + 32 * 12);
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["ma"].as_f64().is_some());
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert!(report["auroc_occluded"].as_f64().is_some());
}

#[test]
fn eval_dimension_mismatch_names_both_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let (_, run) = prepare(dir.path());
    let spec = write(dir.path(), "wide.toml", &SPEC.replace("visual_dim = 8", "visual_dim = 10"));
    let wide = dir.path().join("wide");
    assert!(evipar(&["synth", "--spec", s(&spec), "--out", s(&wide)]).status.success());
    let o = eval(&wide, &run, &dir.path().join("e"), &[]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("[10, 8]") && err.contains("[8, 8]"), "{err}");
}

#[test]
fn bad_rejection_levels_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = prepare(dir.path());
    let o = eval(&data, &run, &dir.path().join("e"), &["--reject", "0.8,0.5"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn zero_epochs_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "spec.toml", SPEC);
    let config = write(dir.path(), "run.toml", CONFIG);
    let data = dir.path().join("data");
    assert!(evipar(&["synth", "--spec", s(&spec), "--out", s(&data)]).status.success());
    let run = dir.path().join("run");
    let o = evipar(&[
        "train", "--config", s(&config), "--dataset", s(&data), "--out", s(&run), "--epochs", "0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = evipar_core::config::RunConfig::from_toml(&std::fs::read_to_string(run.join("config.toml")).unwrap())
        .unwrap();
    let dataset = evipar_core::features::load_dataset(&data).unwrap();
    let init = cfg.build_model(dataset.input_dims()).unwrap();
    let saved = evipar_autodiff::checkpoint::load(run.join("checkpoint.evip")).unwrap();
    assert_eq!(saved, init.store);
}

fn train_args(config: PathBuf) -> TrainArgs {
    TrainArgs {
        config,
        dataset: None,
        out: None,
        seed: None,
        epochs: None,
        ablation_row: None,
        no_spm: false,
        no_cl: false,
        no_awr: false,
        no_raer: false,
        no_edl: false,
    }
}

#[test]
fn ablation_flags_reproduce_table_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "run.toml", CONFIG);
    let full = resolve_config(&train_args(config.clone())).unwrap();
    assert_eq!(full.components(), Components::ablation_row(7).unwrap());

    let mut a = train_args(config.clone());
    (a.no_cl, a.no_awr, a.no_raer, a.no_edl) = (true, true, true, true);
    assert_eq!(resolve_config(&a).unwrap().components(), Components::ablation_row(1).unwrap());

    let mut a = train_args(config.clone());
    (a.no_cl, a.no_awr, a.no_raer) = (true, true, true);
    assert_eq!(resolve_config(&a).unwrap().components(), Components::ablation_row(2).unwrap());

    let mut a = train_args(config.clone());
    a.no_awr = true;
    assert_eq!(resolve_config(&a).unwrap().components(), Components::ablation_row(5).unwrap());

    for row in 1..=7u8 {
        let mut a = train_args(config.clone());
        a.ablation_row = Some(row);
        let cfg = resolve_config(&a).unwrap();
        assert_eq!(cfg.components(), Components::ablation_row(row as usize).unwrap());
    }

    let mut a = train_args(config);
    a.no_spm = true;
    assert!(!resolve_config(&a).unwrap().model.use_spm);
}
