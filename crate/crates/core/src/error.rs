use thiserror::Error;

use crate::coral::CoralError;
use crate::data::DataError;
use crate::linalg::LinalgError;
use crate::metrics::MetricsError;
use crate::ot::OtError;
use crate::preprocess::PreprocessError;
use crate::synth::SynthError;
use crate::validation::ValidationError;
use crate::wdn::WdnError;

/// Union of the per-module errors, for callers that drive whole pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Coral(#[from] CoralError),
    #[error(transparent)]
    Wdn(#[from] WdnError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl Error {
    /// True for failures caused by numerics (divergence, singular matrices)
    /// rather than by malformed input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Linalg(LinalgError::NoConvergence { .. })
            | Error::Linalg(LinalgError::Singular { .. })
            | Error::Linalg(LinalgError::NegativeEigenvalue { .. }) => true,
            Error::Wdn(e) => e.is_numerical(),
            Error::Preprocess(PreprocessError::Singular { .. }) => true,
            Error::Preprocess(PreprocessError::Linalg(_)) | Error::Coral(CoralError::Linalg(_)) => true,
            _ => false,
        }
    }
}
