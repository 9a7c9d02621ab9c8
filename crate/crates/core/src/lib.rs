//! Removal of domain-specific nuisance variation from embedding vectors.
//!
//! Each domain (experimental batch) gets an affine map `A_d(x) = M_d x + b_d`.
//! The maps are trained to make the distribution of every replicated
//! treatment look the same in every domain, measured by Wasserstein-1
//! distances that small softplus critics estimate through the
//! Kantorovich-Rubinstein dual with a one-sided gradient penalty.
//!
//! Around the core method the crate provides the preprocessing pipelines
//! (typical-variation whitening, percentile scaling + PCA), the CORAL
//! baseline, an exact optimal-transport oracle, the k-NN / Silhouette /
//! domain-classification metrics, leave-one-compound-out early stopping,
//! within-well bootstrap, and a synthetic data generator with known
//! nuisance maps.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix the scalar to `f64`.

pub mod coral;
pub mod data;
pub mod linalg;
pub mod metrics;
pub mod ot;
pub mod preprocess;
pub mod scalar;
pub mod synth;
pub mod validation;
pub mod wdn;

mod error;

pub use error::Error;
pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type EmbeddingRecord = data::EmbeddingRecord<f64>;
pub type EmbeddingTable = data::EmbeddingTable<f64>;
pub type TvnTransform = preprocess::TvnTransform<f64>;
pub type PercentileScaler = preprocess::PercentileScaler<f64>;
pub type PcaReducer = preprocess::PcaReducer<f64>;
pub type CoralTransform = coral::CoralTransform<f64>;
pub type AffineTransform = wdn::AffineTransform<f64>;
pub type CriticNet = wdn::CriticNet<f64>;
pub type WdnModel = wdn::WdnModel<f64>;
pub type TrainConfig = wdn::TrainConfig<f64>;
pub type Checkpoint = wdn::Checkpoint<f64>;
pub type PointCloud = ot::PointCloud<f64>;
pub type TreatmentPoint = metrics::TreatmentPoint<f64>;
pub type SynthConfig = synth::SynthConfig<f64>;
