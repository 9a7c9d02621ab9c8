use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wdn_cli::{
    cmd_align, cmd_evaluate, cmd_generate, cmd_preprocess, configure_threads, read_config, replay, AlignArgs,
    CliError, EvaluateArgs, GenerateArgs, PreprocessArgs, RunManifest,
};

/// Batch-effect removal for cell embeddings with Wasserstein distance networks.
#[derive(Debug, Parser)]
#[command(name = "wdn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic embedding table with known per-domain distortions.
    Generate(GenerateArgs),
    /// Normalize a table (TVN whitening, or percentile scaling plus PCA).
    Preprocess(PreprocessArgs),
    /// Fit a WDN or CORAL alignment and write checkpoints plus the aligned table.
    Align(AlignArgs),
    /// Compute MOA and batch metrics for a table or a checkpoint series.
    Evaluate(EvaluateArgs),
    /// Rerun a command from its manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        /// Write to this directory instead of the recorded one.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<RunManifest, CliError> {
    configure_threads()?;
    match cli.command {
        Command::Generate(a) => {
            let cfg = read_config(a.config.as_deref())?;
            cmd_generate(&a, cfg)
        }
        Command::Preprocess(a) => cmd_preprocess(&a),
        Command::Align(a) => {
            let cfg: serde_json::Value = read_config(a.config.as_deref())?;
            cmd_align(&a, cfg)
        }
        Command::Evaluate(a) => {
            let cfg = read_config(a.config.as_deref())?;
            cmd_evaluate(&a, cfg)
        }
        Command::Replay { manifest, output } => replay(&RunManifest::load(&manifest)?, output.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not failures.
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
