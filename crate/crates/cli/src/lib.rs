//! Pipeline commands behind the `wdn` binary: synthetic data generation,
//! preprocessing, alignment (WDN or CORAL) and evaluation.
//!
//! Every command writes its outputs plus a `manifest.json` into one output
//! directory. The manifest stores the resolved arguments and configuration,
//! so [`replay`] can rerun the command and reproduce the outputs exactly.

mod commands;
mod manifest;

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use thiserror::Error;

pub use commands::{
    cmd_align, cmd_evaluate, cmd_generate, cmd_preprocess, AlignArgs, AlignMethod, CoralConfig, CriterionArg,
    EvaluateArgs, GenerateArgs, PreprocessArgs, PreprocessMethod,
};
pub use manifest::{replay, RunManifest, MANIFEST_FILE};

/// Failure of a command, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or a malformed configuration file.
    #[error("{0}")]
    Usage(String),
    /// Unreadable or inconsistent input data, or an output that cannot be written.
    #[error("{0}")]
    Data(String),
    /// Divergence, singular matrices and other numerical failures.
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<wdn::Error> for CliError {
    fn from(e: wdn::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

macro_rules! via_core_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                wdn::Error::from(e).into()
            }
        }
    )*};
}

via_core_error!(
    wdn::data::DataError,
    wdn::preprocess::PreprocessError,
    wdn::coral::CoralError,
    wdn::wdn::WdnError,
    wdn::metrics::MetricsError,
    wdn::validation::ValidationError,
    wdn::synth::SynthError
);

/// Reads a configuration file, JSON when the extension is `.json` and TOML
/// otherwise. No path means the type's defaults.
pub fn read_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C, CliError> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

/// Sizes the global rayon pool from `WDN_THREADS` when set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("WDN_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("WDN_THREADS must be a positive integer, got {value:?}")))?;
    // A pool that already exists (tests calling this twice) is fine.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes `bytes` via a temporary sibling and a rename, so readers never see
/// a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = PathBuf::from(path);
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    tmp.set_file_name(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}
