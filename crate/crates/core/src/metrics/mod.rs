//! Biological-signal and domain-forgetting metrics.
//!
//! Signal is measured on per-(treatment, domain) mean embeddings: k-NN
//! mechanism-of-action assignment and a cosine Silhouette score. Forgetting
//! is measured by how well a classifier can recover the domain of a
//! negative-control cell.

mod classify;
pub(crate) mod knn;
mod report;
mod silhouette;

pub use classify::{
    chance_baseline, domain_classification_accuracy, stratified_folds, Classifier, ForestConfig, LogRegConfig,
    LogisticRegression, RandomForest,
};
pub use knn::{knn_moa, knn_point_scores, KnnFilter};
pub use report::{evaluate, pca_2d, write_curves, CurveRow, EvalConfig, MetricReport, Summary, K_MAX};
pub use silhouette::{silhouette_moa, silhouette_scores};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::EmbeddingTable;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("row {row_id:?} (compound {compound:?}) has no MOA")]
    MissingMoa { row_id: String, compound: String },
    #[error("zero vector for {0}: cosine distance undefined")]
    ZeroVector(String),
    #[error("point {index} ({treatment} in {domain}) has {available} eligible neighbors, needs {k}")]
    InsufficientNeighbors { index: usize, treatment: String, domain: String, available: usize, k: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("need at least two MOA clusters, found {0}")]
    TooFewClusters(usize),
    #[error("need at least two domains to classify, found {0}")]
    SingleDomain(usize),
    #[error("domain {domain:?} has {rows} rows, fewer than {folds} folds")]
    TooFewRows { domain: String, rows: usize, folds: usize },
    #[error("need at least two folds")]
    InvalidFolds,
    #[error("no rows for treatment {0:?}")]
    EmptySelection(String),
    #[error("no points to evaluate")]
    NoPoints,
    #[error("curve output: {0}")]
    Io(String),
}

/// Mean embedding of one treatment in one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TreatmentPoint<T> {
    pub treatment: String,
    pub compound: String,
    pub domain: String,
    pub moa: String,
    pub mean_vector: Vec<T>,
}

/// One point per non-control (treatment, domain) group, in sorted order.
pub fn treatment_means<T: Scalar>(table: &EmbeddingTable<T>) -> Result<Vec<TreatmentPoint<T>>, MetricsError> {
    let mut out = Vec::new();
    for (key, rows) in table.group_index() {
        let first = table.record(rows[0]);
        if table.is_control(first) {
            continue;
        }
        let mut moa = None;
        let mut mean = vec![T::zero(); table.dim()];
        for &i in &rows {
            let r = table.record(i);
            match &r.moa {
                Some(m) => moa = moa.or_else(|| Some(m.clone())),
                None => {
                    return Err(MetricsError::MissingMoa { row_id: r.row_id.clone(), compound: r.compound.clone() })
                }
            }
            for (m, &v) in mean.iter_mut().zip(&r.vector) {
                *m += v;
            }
        }
        let n = T::of_usize(rows.len());
        mean.iter_mut().for_each(|m| *m /= n);
        out.push(TreatmentPoint {
            treatment: key.treatment,
            compound: first.compound.clone(),
            domain: key.domain,
            moa: moa.expect("group is nonempty"),
            mean_vector: mean,
        });
    }
    Ok(out)
}

/// `1 − x·y / (‖x‖ ‖y‖)`.
pub fn cosine_distance<T: Scalar>(x: &[T], y: &[T]) -> Result<f64, MetricsError> {
    let nx = crate::scalar::norm(x).to_f64_lossy();
    let ny = crate::scalar::norm(y).to_f64_lossy();
    if nx == 0.0 || ny == 0.0 {
        return Err(MetricsError::ZeroVector("cosine distance".into()));
    }
    Ok(1.0 - crate::scalar::dot(x, y).to_f64_lossy() / (nx * ny))
}

/// Full pairwise cosine distance matrix. Entries are bit-identical to
/// [`cosine_distance`] on the same pair.
pub(crate) fn cosine_matrix<T: Scalar>(points: &[TreatmentPoint<T>]) -> Result<Vec<Vec<f64>>, MetricsError> {
    for p in points {
        if crate::scalar::norm(&p.mean_vector).to_f64_lossy() == 0.0 {
            return Err(MetricsError::ZeroVector(format!("{} in {}", p.treatment, p.domain)));
        }
    }
    let n = points.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = cosine_distance(&points[i].mean_vector, &points[j].mean_vector)?;
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

pub(crate) fn count_by<'a>(labels: impl Iterator<Item = &'a str>) -> BTreeMap<&'a str, usize> {
    let mut m = BTreeMap::new();
    for l in labels {
        *m.entry(l).or_default() += 1;
    }
    m
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EmbeddingRecord;

    fn rec(id: &str, compound: &str, domain: &str, moa: Option<&str>, v: Vec<f64>) -> EmbeddingRecord<f64> {
        EmbeddingRecord {
            row_id: id.into(),
            domain: domain.into(),
            plate: "p".into(),
            well: "w".into(),
            compound: compound.into(),
            dose: "1".into(),
            treatment: crate::data::treatment_label(compound, "1"),
            moa: moa.map(str::to_string),
            vector: v,
        }
    }

    #[test]
    fn means_exclude_controls_and_average_rows() {
        let table = EmbeddingTable::from_records(
            2,
            vec![
                rec("1", "a", "d1", Some("m"), vec![1.0, 0.0]),
                rec("2", "a", "d1", Some("m"), vec![3.0, 0.0]),
                rec("3", "DMSO", "d1", None, vec![9.0, 9.0]),
                rec("4", "a", "d2", Some("m"), vec![0.0, 1.0]),
                rec("5", "b", "d2", Some("n"), vec![0.0, 2.0]),
            ],
            "DMSO",
        )
        .unwrap();
        let pts = treatment_means(&table).unwrap();
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[0].mean_vector, vec![2.0, 0.0]);
        assert!(pts.iter().all(|p| p.compound != "DMSO"));
        let groups = table.group_index().keys().filter(|k| !k.treatment.starts_with("DMSO")).count();
        assert_eq!(pts.len(), groups);
    }

    #[test]
    fn missing_moa_is_an_error() {
        let table = EmbeddingTable::from_records(1, vec![rec("1", "a", "d", None, vec![1.0])], "DMSO").unwrap();
        assert!(matches!(treatment_means(&table), Err(MetricsError::MissingMoa { .. })));
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine_distance(&[1.0, 1.0], &[2.0, 2.0]).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }
}
