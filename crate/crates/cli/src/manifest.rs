use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::commands::{cmd_align, cmd_evaluate, cmd_generate, cmd_preprocess};
use crate::{write_atomic, CliError};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation, written next to its outputs.
///
/// `args` and `config` are the resolved values the command ran with, so the
/// run can be repeated without the original configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub args: serde_json::Value,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub(crate) fn new<A: Serialize, C: Serialize>(
        subcommand: &str,
        args: &A,
        config: &C,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
        seed: u64,
        started: Instant,
    ) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            args: serde_json::to_value(args).expect("arguments serialize"),
            config: serde_json::to_value(config).expect("config serializes"),
            inputs,
            outputs,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        }
    }

    pub(crate) fn write(self, dir: &Path) -> Result<Self, CliError> {
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("manifest {}: {e}", path.display())))
    }
}

fn field<T: serde::de::DeserializeOwned>(v: &serde_json::Value, what: &str) -> Result<T, CliError> {
    serde_json::from_value(v.clone()).map_err(|e| CliError::Usage(format!("manifest {what}: {e}")))
}

/// Reruns the command recorded in `manifest`, writing to `output` when
/// given and to the recorded output directory otherwise.
pub fn replay(manifest: &RunManifest, output: Option<&Path>) -> Result<RunManifest, CliError> {
    let mut args = manifest.args.clone();
    if let Some(out) = output {
        args["output"] = serde_json::Value::String(out.display().to_string());
    }
    match manifest.subcommand.as_str() {
        "generate" => cmd_generate(&field(&args, "args")?, field(&manifest.config, "config")?),
        "preprocess" => cmd_preprocess(&field(&args, "args")?),
        "align" => cmd_align(&field(&args, "args")?, manifest.config.clone()),
        "evaluate" => cmd_evaluate(&field(&args, "args")?, field(&manifest.config, "config")?),
        other => Err(CliError::Usage(format!("manifest names unknown subcommand {other:?}"))),
    }
}
