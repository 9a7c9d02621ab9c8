use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use wdn::data::{load_table, ColumnSchema, EmbeddingTable};
use wdn::metrics::MetricReport;
use wdn_cli::{
    cmd_align, cmd_evaluate, cmd_generate, cmd_preprocess, replay, AlignArgs, AlignMethod, CriterionArg, EvaluateArgs,
    GenerateArgs, PreprocessArgs, PreprocessMethod, RunManifest,
};

fn wdn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wdn")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn small_synth(dir: &Path) -> PathBuf {
    let cfg = write(
        dir,
        "synth.toml",
        "dim = 4\nn_domains = 2\nn_treatments = 5\nn_moa = 2\ncells_per_group = 20\nwells_per_group = 2\nseed = 3\n",
    );
    let out = dir.join("gen");
    let args = GenerateArgs { config: Some(cfg.clone()), output: out.clone(), seed: None };
    cmd_generate(&args, wdn_cli::read_config(Some(&cfg)).unwrap()).unwrap();
    out.join("table.csv")
}

fn read(path: &Path) -> EmbeddingTable<f64> {
    load_table(path, &ColumnSchema::default()).unwrap()
}

#[test]
fn generate_counts_rows_and_repeats_exactly() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "g.toml", "dim = 3\nn_domains = 2\nn_treatments = 4\nn_moa = 2\ncells_per_group = 15\n");
    let run = |out: &str| {
        let o = wdn(&["generate", "--config", cfg.to_str().unwrap(), "--output", dir.path().join(out).to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run("a");
    run("b");
    let table = read(&dir.path().join("a/table.csv"));
    assert_eq!(table.len(), 2 * 4 * 15);
    for f in ["table.csv", "ground_truth.json"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn malformed_generator_config_names_the_field() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let unknown = write(dir.path(), "u.toml", "dimm = 3\n");
    let o = wdn(&["generate", "--config", unknown.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dimm"));

    let invalid = write(dir.path(), "i.toml", "cells_per_group = 0\n");
    let o = wdn(&["generate", "--config", invalid.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cells_per_group"));
}

#[test]
fn exit_codes_separate_usage_and_data_errors() {
    let dir = TempDir::new().unwrap();
    let table = small_synth(dir.path());
    let out = dir.path().join("o");
    let o = wdn(&["preprocess", "--input", table.to_str().unwrap(), "--output", out.to_str().unwrap(), "--method", "zca"]);
    assert_eq!(o.status.code(), Some(2));
    let missing = dir.path().join("nope.csv");
    let o = wdn(&["preprocess", "--input", missing.to_str().unwrap(), "--output", out.to_str().unwrap(), "--method", "tvn"]);
    assert_eq!(o.status.code(), Some(3));
    let o = Command::new(env!("CARGO_BIN_EXE_wdn"))
        .args(["preprocess", "--input", table.to_str().unwrap(), "--output", out.to_str().unwrap(), "--method", "tvn"])
        .env("WDN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tvn_output_has_white_controls() {
    let dir = TempDir::new().unwrap();
    let table = small_synth(dir.path());
    let out = dir.path().join("tvn");
    let args = PreprocessArgs { input: table, output: out.clone(), method: PreprocessMethod::Tvn, dim: 50, schema: None };
    cmd_preprocess(&args).unwrap();
    let t = read(&out.join("table.csv"));
    let controls: Vec<&Vec<f64>> = t.records().iter().filter(|r| t.is_control(r)).map(|r| &r.vector).collect();
    let n = controls.len() as f64;
    for a in 0..t.dim() {
        let mean_a = controls.iter().map(|v| v[a]).sum::<f64>() / n;
        assert!(mean_a.abs() < 1e-8);
        for b in 0..t.dim() {
            let cov = controls.iter().map(|v| v[a] * v[b]).sum::<f64>() / (n - 1.0);
            let want = if a == b { 1.0 } else { 0.0 };
            assert!((cov - want).abs() < 1e-6, "cov[{a}][{b}] = {cov}");
        }
    }
    assert!(out.join("transform_tvn.json").exists());
}

#[test]
fn percentile_pca_reduces_to_fifty_dimensions() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "wide.toml",
        "dim = 453\nn_domains = 2\nn_treatments = 2\nn_moa = 1\ncells_per_group = 40\nwells_per_group = 2\n",
    );
    let gen = dir.path().join("gen");
    let o = wdn(&["generate", "--config", cfg.to_str().unwrap(), "--output", gen.to_str().unwrap()]);
    assert!(o.status.success());
    let out = dir.path().join("pp");
    let input = gen.join("table.csv");
    let o = wdn(&[
        "preprocess",
        "--input",
        input.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--method",
        "percentile+pca",
        "--dim",
        "50",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = read(&out.join("table.csv"));
    assert_eq!(t.dim(), 50);
    assert_eq!(t.len(), 2 * 2 * 40);
}

fn align(input: &Path, out: &Path, method: AlignMethod, config: serde_json::Value) -> RunManifest {
    let args = AlignArgs { input: input.into(), output: out.into(), method, config: None, seed: None, schema: None };
    cmd_align(&args, config).unwrap()
}

fn checkpoint_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir.join("checkpoints")).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn coral_writes_one_checkpoint_and_one_table() {
    let dir = TempDir::new().unwrap();
    let table = small_synth(dir.path());
    let out = dir.path().join("coral");
    align(&table, &out, AlignMethod::Coral, serde_json::Value::Null);
    assert_eq!(checkpoint_files(&out).len(), 1);
    assert_eq!(read(&out.join("table.csv")).len(), read(&table).len());
}

#[test]
fn wdn_without_cycles_returns_the_input() {
    let dir = TempDir::new().unwrap();
    let table = small_synth(dir.path());
    let out = dir.path().join("id");
    align(&table, &out, AlignMethod::Wdn, serde_json::json!({"pretrain_steps": 20, "total_cycles": 0, "minibatch": 8}));
    assert_eq!(read(&out.join("table.csv")), read(&table));
    assert_eq!(checkpoint_files(&out).len(), 1);
}

#[test]
fn wdn_series_and_loss_curve() {
    let dir = TempDir::new().unwrap();
    let table = small_synth(dir.path());
    let out = dir.path().join("w");
    let cfg = serde_json::json!({"pretrain_steps": 30, "total_cycles": 6, "checkpoint_every": 2, "minibatch": 8});
    align(&table, &out, AlignMethod::Wdn, cfg);
    // Checkpoints after pretraining and at cycles 2, 4, 6.
    let files = checkpoint_files(&out);
    assert_eq!(files.len(), 4);
    assert!(files[3].ends_with("step_000000300.json"));
    let lines = fs::read_to_string(out.join("loss.csv")).unwrap().lines().count();
    assert_eq!(lines, 1 + 30 + 6 * (50 + 1));
}

#[test]
fn same_seed_gives_identical_checkpoint_files() {
    let dir = TempDir::new().unwrap();
    let table = small_synth(dir.path());
    let cfg = write(dir.path(), "t.toml", "pretrain_steps = 40\ntotal_cycles = 4\ncheckpoint_every = 2\nminibatch = 8\n");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = wdn(&[
            "align",
            "--method",
            "wdn",
            "--input",
            table.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "11",
            "--output",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        checkpoint_files(&out).into_iter().map(|p| fs::read(p).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run("a"), run("b"));
}

fn evaluate_args(input: &Path, out: &Path) -> EvaluateArgs {
    EvaluateArgs {
        input: input.into(),
        checkpoints: None,
        config: None,
        output: out.into(),
        seed: None,
        bootstrap: None,
        criterion: CriterionArg::Silhouette,
        loco: false,
        pca: false,
        schema: None,
    }
}

fn signal_only() -> wdn::metrics::EvalConfig {
    wdn::metrics::EvalConfig { domain_classification: false, ..Default::default() }
}

#[test]
fn separable_identity_data_scores_perfectly() {
    let dir = TempDir::new().unwrap();
    let table = small_synth(dir.path());
    let out = dir.path().join("e");
    let mut args = evaluate_args(&table, &out);
    args.pca = true;
    cmd_evaluate(&args, Default::default()).unwrap();
    let report: MetricReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.knn_nsc[0], 100.0);
    assert!(report.domain_acc_logreg.is_some());
    let pca_rows = fs::read_to_string(out.join("pca.csv")).unwrap().lines().count();
    let t = read(&table);
    assert_eq!(pca_rows, 1 + t.records().iter().filter(|r| t.is_control(r)).count());
}

#[test]
fn series_evaluation_writes_one_row_per_step_and_metric() {
    let dir = TempDir::new().unwrap();
    let table = small_synth(dir.path());
    let aligned = dir.path().join("w");
    let cfg = serde_json::json!({"pretrain_steps": 20, "total_cycles": 4, "checkpoint_every": 2, "minibatch": 8});
    align(&table, &aligned, AlignMethod::Wdn, cfg);
    let out = dir.path().join("e");
    let mut args = evaluate_args(&table, &out);
    args.checkpoints = Some(aligned.join("checkpoints"));
    args.loco = true;
    let manifest = cmd_evaluate(&args, signal_only()).unwrap();
    let report: MetricReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let rows = fs::read_to_string(out.join("curves.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 3 * report.entries().len());
    assert!(out.join("selection.json").exists() && out.join("loco.json").exists());
    assert_eq!(manifest.subcommand, "evaluate");
}

#[test]
fn bootstrap_attaches_mean_and_std_to_every_metric() {
    let dir = TempDir::new().unwrap();
    let table = small_synth(dir.path());
    let out = dir.path().join("b");
    let mut args = evaluate_args(&table, &out);
    args.bootstrap = Some(100);
    cmd_evaluate(&args, signal_only()).unwrap();
    let report: MetricReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for (name, _) in report.entries() {
        let s = report.bootstrap.get(&name).unwrap_or_else(|| panic!("no bootstrap for {name}"));
        assert!(s.mean.is_finite() && s.std >= 0.0);
    }
}

#[test]
fn replay_reproduces_outputs() {
    let dir = TempDir::new().unwrap();
    let table = small_synth(dir.path());
    let out = dir.path().join("w");
    let cfg = serde_json::json!({"pretrain_steps": 20, "total_cycles": 2, "checkpoint_every": 1, "minibatch": 8, "seed": 4});
    let manifest = align(&table, &out, AlignMethod::Wdn, cfg);
    let again = dir.path().join("again");
    replay(&RunManifest::load(&out.join("manifest.json")).unwrap(), Some(&again)).unwrap();
    for (a, b) in checkpoint_files(&out).iter().zip(checkpoint_files(&again)) {
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }
    for f in ["table.csv", "loss.csv"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap());
    }
    assert_eq!(manifest.seed, 4);

    // The generator manifest replays through the same path.
    let gen = dir.path().join("gen");
    let regen = dir.path().join("regen");
    replay(&RunManifest::load(&gen.join("manifest.json")).unwrap(), Some(&regen)).unwrap();
    assert_eq!(fs::read(gen.join("table.csv")).unwrap(), fs::read(regen.join("table.csv")).unwrap());
}
