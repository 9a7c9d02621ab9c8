use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::ValueEnum;
use log::info;
use serde::{Deserialize, Serialize};

use wdn::coral::coral_fit;
use wdn::data::{load_table, save_table, ColumnSchema, EmbeddingTable};
use wdn::metrics::{evaluate, pca_2d, write_curves, CurveRow, EvalConfig, MetricReport};
use wdn::preprocess::{tvn_fit, PcaReducer, PercentileScaler};
use wdn::synth::{generate, SynthConfig};
use wdn::validation::{
    bootstrap_metrics, bootstrap_with_per_replicate_stopping, loco_cv, select_checkpoint, snapshots, Criterion,
    Execution, ValidationError,
};
use wdn::wdn::{config_fingerprint, Checkpoint, Payload, TrainConfig, TrainEvent, TrainObserver, Trainer, WdnError};

use crate::manifest::RunManifest;
use crate::{ensure_dir, write_atomic, CliError};

pub const TABLE_FILE: &str = "table.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

fn load_input(path: &Path, schema: Option<&Path>) -> Result<EmbeddingTable<f64>, CliError> {
    let schema = match schema {
        Some(p) => ColumnSchema::load(p)?,
        None => ColumnSchema::default(),
    };
    Ok(load_table(path, &schema)?)
}

fn save_checkpoint(dir: &Path, ck: &Checkpoint<f64>) -> Result<PathBuf, CliError> {
    let path = dir.join(format!("step_{:09}.json", ck.step));
    write_atomic(&path, ck.to_json().as_bytes())?;
    Ok(path)
}

/// All checkpoints in `dir`, sorted by step.
pub fn load_checkpoints(dir: &Path) -> Result<Vec<Checkpoint<f64>>, CliError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            out.push(Checkpoint::load(&path)?);
        }
    }
    if out.is_empty() {
        return Err(CliError::Data(format!("no checkpoint files in {}", dir.display())));
    }
    out.sort_by_key(|c| c.step);
    Ok(out)
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct GenerateArgs {
    /// Generator configuration (TOML, or JSON by extension). Defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub output: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Writes `table.csv`, `ground_truth.json` and the manifest.
pub fn cmd_generate(args: &GenerateArgs, mut cfg: SynthConfig<f64>) -> Result<RunManifest, CliError> {
    let started = Instant::now();
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (table, truth) = generate(&cfg)?;
    ensure_dir(&args.output)?;
    let table_path = args.output.join(TABLE_FILE);
    save_table(&table, &table_path)?;
    let truth_path = args.output.join("ground_truth.json");
    write_atomic(&truth_path, truth.to_json().as_bytes())?;
    info!("generated {} rows in {} domains", table.len(), cfg.n_domains);
    RunManifest::new("generate", args, &cfg, vec![], vec![table_path, truth_path], cfg.seed, started)
        .write(&args.output)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessMethod {
    /// Whiten with the negative-control covariance.
    Tvn,
    /// Per-plate percentile scaling followed by PCA to `--dim` components.
    #[value(name = "percentile+pca", alias = "percentile-pca")]
    PercentilePca,
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum)]
    pub method: PreprocessMethod,
    /// Retained components for `percentile+pca`.
    #[arg(long, default_value_t = 50)]
    pub dim: usize,
    /// Column schema (TOML) for the input table.
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

/// Writes the preprocessed `table.csv`, one checkpoint per fitted stage and
/// the manifest.
pub fn cmd_preprocess(args: &PreprocessArgs) -> Result<RunManifest, CliError> {
    let started = Instant::now();
    let table = load_input(&args.input, args.schema.as_deref())?;
    let fingerprint = config_fingerprint(args);
    let mut stages = Vec::new();
    let out = match args.method {
        PreprocessMethod::Tvn => {
            let t = tvn_fit(&table)?;
            let out = t.apply(&table)?;
            stages.push(Checkpoint::new(0, table.dim(), Payload::Tvn(t), fingerprint.as_str()));
            out
        }
        PreprocessMethod::PercentilePca => {
            if args.dim == 0 || args.dim > table.dim() {
                return Err(CliError::Usage(format!("--dim must lie in 1..={}, got {}", table.dim(), args.dim)));
            }
            let scaler = PercentileScaler::fit(&table)?;
            let scaled = scaler.apply(&table)?;
            let pca = PcaReducer::fit(&scaled, args.dim)?;
            let out = pca.apply(&scaled)?;
            stages.push(Checkpoint::new(0, table.dim(), Payload::Percentile(scaler), fingerprint.as_str()));
            stages.push(Checkpoint::new(0, table.dim(), Payload::Pca(pca), fingerprint.as_str()));
            out
        }
    };
    ensure_dir(&args.output)?;
    let mut outputs = Vec::new();
    for ck in &stages {
        let path = args.output.join(format!("transform_{}.json", ck.kind()));
        write_atomic(&path, ck.to_json().as_bytes())?;
        outputs.push(path);
    }
    let table_path = args.output.join(TABLE_FILE);
    save_table(&out, &table_path)?;
    outputs.push(table_path);
    info!("preprocessed {} rows to dimension {}", out.len(), out.dim());
    RunManifest::new("preprocess", args, &serde_json::Value::Null, vec![args.input.clone()], outputs, 0, started)
        .write(&args.output)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMethod {
    Wdn,
    Coral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoralConfig {
    /// Ridge added to every covariance before taking roots.
    pub eta: f64,
}

impl Default for CoralConfig {
    fn default() -> Self {
        Self { eta: 1.0 }
    }
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct AlignArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum)]
    pub method: AlignMethod,
    /// Training (wdn) or CORAL configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

/// Per-step loss log written while training.
struct LossLog {
    out: csv::Writer<BufWriter<File>>,
    failed: Option<String>,
}

impl LossLog {
    fn create(path: &Path) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut out = csv::Writer::from_writer(BufWriter::new(file));
        out.write_record(["phase", "transform_step", "critic_step", "loss", "regularizer"])
            .map_err(|e| CliError::Data(e.to_string()))?;
        Ok(Self { out, failed: None })
    }

    fn finish(mut self) -> Result<(), CliError> {
        if let Some(e) = self.failed {
            return Err(CliError::Data(format!("loss log: {e}")));
        }
        self.out.flush().map_err(|e| CliError::Data(format!("loss log: {e}")))
    }
}

impl TrainObserver<f64> for LossLog {
    fn on_step(&mut self, ev: &TrainEvent<'_, f64>) {
        if self.failed.is_some() {
            return;
        }
        let phase = format!("{:?}", ev.phase).to_lowercase();
        let row = [
            phase,
            ev.transform_step.to_string(),
            ev.critic_step.to_string(),
            ev.loss.total.to_string(),
            ev.loss.regularizer.to_string(),
        ];
        if let Err(e) = self.out.write_record(&row) {
            self.failed = Some(e.to_string());
        }
    }
}

fn wdn_failure(e: WdnError) -> CliError {
    match e {
        WdnError::InvalidConfig(m) => CliError::Usage(format!("training config: {m}")),
        e => e.into(),
    }
}

/// Fits the alignment and writes the checkpoint series, the table transformed
/// by the last checkpoint, the loss curve (wdn only) and the manifest.
///
/// `config` is a [`TrainConfig`] for wdn and a [`CoralConfig`] for coral.
pub fn cmd_align(args: &AlignArgs, config: serde_json::Value) -> Result<RunManifest, CliError> {
    let started = Instant::now();
    let table = load_input(&args.input, args.schema.as_deref())?;
    let ck_dir = args.output.join(CHECKPOINT_DIR);
    ensure_dir(&ck_dir)?;
    let mut outputs = Vec::new();
    let (checkpoints, snapshot, seed) = match args.method {
        AlignMethod::Wdn => {
            let mut cfg: TrainConfig<f64> = parse_value(config)?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            let seed = cfg.seed;
            let loss_path = args.output.join("loss.csv");
            let mut log = LossLog::create(&loss_path)?;
            let mut trainer = Trainer::new(&table, cfg.clone()).map_err(wdn_failure)?;
            let run = trainer.run(&mut [&mut log]);
            log.finish()?;
            outputs.push(loss_path);
            let checkpoints = match run {
                Ok(cks) => cks,
                Err(failure) => {
                    // Keep what was emitted before the divergence.
                    for ck in &failure.checkpoints {
                        save_checkpoint(&ck_dir, ck)?;
                    }
                    return Err(wdn_failure(failure.error));
                }
            };
            (checkpoints, serde_json::to_value(&cfg).expect("config serializes"), seed)
        }
        AlignMethod::Coral => {
            let cfg: CoralConfig = parse_value(config)?;
            let fitted = coral_fit(&table, cfg.eta)?;
            let ck = Checkpoint::new(0, table.dim(), Payload::Coral(fitted), config_fingerprint(&cfg));
            (vec![ck], serde_json::to_value(&cfg).expect("config serializes"), 0)
        }
    };
    for ck in &checkpoints {
        outputs.push(save_checkpoint(&ck_dir, ck)?);
    }
    let last = checkpoints.last().expect("training emits at least one checkpoint");
    let table_path = args.output.join(TABLE_FILE);
    save_table(&last.apply(&table)?, &table_path)?;
    outputs.push(table_path);
    info!("wrote {} checkpoint(s) to {}", checkpoints.len(), ck_dir.display());
    RunManifest::new("align", args, &snapshot, vec![args.input.clone()], outputs, seed, started).write(&args.output)
}

fn parse_value<C: serde::de::DeserializeOwned>(v: serde_json::Value) -> Result<C, CliError> {
    let v = if v.is_null() { serde_json::Value::Object(Default::default()) } else { v };
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("config: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionArg {
    /// Mean NSC k-NN accuracy over k = 1..=k_max.
    Knn,
    Silhouette,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Knn => Criterion::AvgKnn,
            CriterionArg::Silhouette => Criterion::Silhouette,
        }
    }
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Table to evaluate; with `--checkpoints`, the untransformed table the
    /// checkpoints apply to.
    #[arg(long)]
    pub input: PathBuf,
    /// Directory of checkpoint files to evaluate as a series.
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    /// Metric configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    /// Overrides the configured seed (classifier folds and bootstrap draws).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of within-well bootstrap replicates.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    /// Checkpoint selection criterion.
    #[arg(long, value_enum, default_value = "silhouette")]
    pub criterion: CriterionArg,
    /// Also run leave-one-compound-out stopping over the series.
    #[arg(long)]
    pub loco: bool,
    /// Write first-two-principal-component coordinates of the controls.
    #[arg(long)]
    pub pca: bool,
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

fn report_entries(table: &EmbeddingTable<f64>, cfg: &EvalConfig) -> Result<Vec<(String, f64)>, ValidationError> {
    Ok(evaluate(table, cfg)?.entries())
}

fn curve_rows(step: usize, report: &MetricReport) -> impl Iterator<Item = CurveRow> + '_ {
    report.entries().into_iter().map(move |(metric, value)| CurveRow { step, metric, value, bootstrap_std: None })
}

/// Writes `report.json` (the metrics at the selected checkpoint), `curves.csv`
/// (one row per step and metric), optionally `selection.json`, `loco.json` and
/// `pca.csv`, and the manifest.
pub fn cmd_evaluate(args: &EvaluateArgs, mut cfg: EvalConfig) -> Result<RunManifest, CliError> {
    let started = Instant::now();
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.bootstrap == Some(0) {
        return Err(CliError::Usage("--bootstrap needs at least one replicate".into()));
    }
    let criterion = Criterion::from(args.criterion);
    let table = load_input(&args.input, args.schema.as_deref())?;
    ensure_dir(&args.output)?;
    let mut inputs = vec![args.input.clone()];
    let mut outputs = Vec::new();

    let mut curves = Vec::new();
    let (selected, mut report) = match &args.checkpoints {
        None => {
            let report = evaluate(&table, &cfg)?;
            curves.extend(curve_rows(0, &report));
            (table.clone(), report)
        }
        Some(dir) => {
            inputs.push(dir.clone());
            let checkpoints = load_checkpoints(dir)?;
            let mut reports = Vec::with_capacity(checkpoints.len());
            for ck in &checkpoints {
                let report = evaluate(&ck.apply(&table)?, &cfg)?;
                curves.extend(curve_rows(ck.step, &report));
                reports.push(report);
            }
            let rule = select_checkpoint(&snapshots(&table, &checkpoints)?, criterion, cfg.k_max, None)?;
            info!("selected step {} by {:?}", rule.selected_step, criterion);
            let path = args.output.join("selection.json");
            write_atomic(&path, serde_json::to_string_pretty(&rule).expect("rule serializes").as_bytes())?;
            outputs.push(path);

            if args.loco {
                let loco = loco_cv(&table, &checkpoints, criterion, cfg.k_max)?;
                let path = args.output.join("loco.json");
                write_atomic(&path, serde_json::to_string_pretty(&loco).expect("loco serializes").as_bytes())?;
                outputs.push(path);
            }
            if let Some(reps) = args.bootstrap {
                let boot = bootstrap_with_per_replicate_stopping(
                    &table,
                    &checkpoints,
                    criterion,
                    cfg.k_max,
                    |t| report_entries(t, &cfg),
                    reps,
                    cfg.seed,
                    Execution::Parallel,
                )?;
                reports[rule.selected_index].bootstrap = boot.summary;
            }
            let chosen = checkpoints[rule.selected_index].apply(&table)?;
            (chosen, reports.swap_remove(rule.selected_index))
        }
    };
    if args.checkpoints.is_none() {
        if args.loco {
            return Err(CliError::Usage("--loco needs --checkpoints".into()));
        }
        if let Some(reps) = args.bootstrap {
            let boot = bootstrap_metrics(&table, |t| report_entries(t, &cfg), reps, cfg.seed, Execution::Parallel)?;
            report.bootstrap = boot.summary;
        }
    }

    let path = args.output.join("report.json");
    write_atomic(&path, report.to_json().as_bytes())?;
    outputs.push(path);
    let path = args.output.join("curves.csv");
    let mut buf = Vec::new();
    write_curves(&curves, &mut buf)?;
    write_atomic(&path, &buf)?;
    outputs.push(path);
    if args.pca {
        outputs.push(write_pca(&selected, &args.output.join("pca.csv"))?);
    }
    RunManifest::new("evaluate", args, &cfg, inputs, outputs, cfg.seed, started).write(&args.output)
}

/// Control rows projected on their first two principal components.
fn write_pca(table: &EmbeddingTable<f64>, path: &Path) -> Result<PathBuf, CliError> {
    let controls: Vec<_> = table.records().iter().filter(|r| table.is_control(r)).collect();
    let rows: Vec<&[f64]> = controls.iter().map(|r| r.vector.as_slice()).collect();
    let coords = pca_2d(&rows)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Data(e.to_string());
    w.write_record(["row_id", "domain", "pc1", "pc2"]).map_err(err)?;
    for (r, c) in controls.iter().zip(&coords) {
        w.write_record([r.row_id.as_str(), r.domain.as_str(), &c[0].to_string(), &c[1].to_string()]).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coral_config_defaults_to_unit_ridge() {
        let cfg: CoralConfig = parse_value(serde_json::Value::Null).unwrap();
        assert_eq!(cfg.eta, 1.0);
        let err = parse_value::<CoralConfig>(serde_json::json!({"etaa": 2.0})).unwrap_err();
        assert!(err.to_string().contains("etaa"));
    }

    #[test]
    fn criterion_names_map() {
        assert_eq!(Criterion::from(CriterionArg::Knn), Criterion::AvgKnn);
        assert_eq!(Criterion::from(CriterionArg::Silhouette), Criterion::Silhouette);
    }
}
