use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::classify::{chance_baseline, domain_classification_accuracy, Classifier, ForestConfig, LogRegConfig};
use super::knn::{scores_upto, KnnFilter};
use super::silhouette::silhouette_moa;
use super::{cosine_matrix, treatment_means, MetricsError, TreatmentPoint};
use crate::data::EmbeddingTable;
use crate::linalg::pca_fit;
use crate::scalar::Scalar;

/// Largest neighbor count reported.
pub const K_MAX: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_max: usize,
    /// Run the negative-control domain classifiers.
    pub domain_classification: bool,
    pub chance_baseline: bool,
    pub folds: usize,
    pub seed: u64,
    pub logreg: LogRegConfig,
    pub forest: ForestConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_max: K_MAX,
            domain_classification: true,
            chance_baseline: true,
            folds: 3,
            seed: 0,
            logreg: LogRegConfig::default(),
            forest: ForestConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

/// All metrics for one embedding table. Percentages are in `[0, 100]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Index `k − 1`.
    pub knn_nsc: Vec<f64>,
    /// Empty when some point has too few neighbors outside its own domain.
    pub knn_nsc_nsb: Vec<f64>,
    pub silhouette: f64,
    pub domain_acc_logreg: Option<f64>,
    pub domain_acc_rf: Option<f64>,
    pub chance_baseline_logreg: Option<f64>,
    pub chance_baseline_rf: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub bootstrap: BTreeMap<String, Summary>,
}

impl MetricReport {
    /// Flat `(name, value)` list in a fixed order.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (k, v) in self.knn_nsc.iter().enumerate() {
            out.push((format!("knn_nsc_{}", k + 1), *v));
        }
        for (k, v) in self.knn_nsc_nsb.iter().enumerate() {
            out.push((format!("knn_nsc_nsb_{}", k + 1), *v));
        }
        out.push(("silhouette".into(), self.silhouette));
        let opts = [
            ("domain_acc_logreg", self.domain_acc_logreg),
            ("domain_acc_rf", self.domain_acc_rf),
            ("chance_baseline_logreg", self.chance_baseline_logreg),
            ("chance_baseline_rf", self.chance_baseline_rf),
        ];
        for (name, v) in opts {
            if let Some(v) = v {
                out.push((name.into(), v));
            }
        }
        out
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.entries().into_iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Mean of the NSC k-NN accuracies over all reported `k`.
    pub fn avg_knn(&self) -> f64 {
        self.knn_nsc.iter().sum::<f64>() / self.knn_nsc.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// k-NN accuracies for `k = 1..=k_max` over all points.
pub(crate) fn knn_profile<T: Scalar>(
    points: &[TreatmentPoint<T>],
    dist: &[Vec<f64>],
    k_max: usize,
    filter: KnnFilter,
) -> Result<Vec<f64>, MetricsError> {
    let all: Vec<usize> = (0..points.len()).collect();
    let per_k = scores_upto(points, dist, k_max, filter, &all)?;
    Ok(per_k.iter().map(|s| 100.0 * s.iter().sum::<f64>() / s.len() as f64).collect())
}

/// Signal metrics on treatment means plus forgetting metrics on the
/// negative controls.
pub fn evaluate<T: Scalar>(table: &EmbeddingTable<T>, cfg: &EvalConfig) -> Result<MetricReport, MetricsError> {
    let points = treatment_means(table)?;
    if points.is_empty() {
        return Err(MetricsError::NoPoints);
    }
    let dist = cosine_matrix(&points)?;
    let knn_nsc = knn_profile(&points, &dist, cfg.k_max, KnnFilter::Nsc)?;
    let knn_nsc_nsb = match knn_profile(&points, &dist, cfg.k_max, KnnFilter::NscNsb) {
        Ok(v) => v,
        Err(MetricsError::InsufficientNeighbors { .. }) => Vec::new(),
        Err(e) => return Err(e),
    };
    let silhouette = silhouette_moa(&points)?;

    let mut report = MetricReport {
        knn_nsc,
        knn_nsc_nsb,
        silhouette,
        domain_acc_logreg: None,
        domain_acc_rf: None,
        chance_baseline_logreg: None,
        chance_baseline_rf: None,
        bootstrap: BTreeMap::new(),
    };
    if cfg.domain_classification {
        let controls = table.filter(|r| r.compound == table.negative_control);
        if controls.is_empty() {
            return Err(MetricsError::EmptySelection(table.negative_control.clone()));
        }
        let lr = Classifier::LogReg(cfg.logreg.clone());
        let rf = Classifier::RandomForest(cfg.forest.clone());
        report.domain_acc_logreg = Some(domain_classification_accuracy(&controls, &lr, cfg.folds, cfg.seed)?);
        report.domain_acc_rf = Some(domain_classification_accuracy(&controls, &rf, cfg.folds, cfg.seed)?);
        if cfg.chance_baseline {
            report.chance_baseline_logreg = Some(chance_baseline(&controls, &lr, cfg.folds, cfg.seed)?);
            report.chance_baseline_rf = Some(chance_baseline(&controls, &rf, cfg.folds, cfg.seed)?);
        }
    }
    Ok(report)
}

/// One line of a metric-versus-step curve file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub metric: String,
    pub value: f64,
    pub bootstrap_std: Option<f64>,
}

pub fn write_curves<W: Write>(rows: &[CurveRow], writer: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r).map_err(|e| MetricsError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| MetricsError::Io(e.to_string()))
}

/// Coordinates of each row on the first two principal components.
pub fn pca_2d<T: Scalar>(rows: &[&[T]]) -> Result<Vec<[f64; 2]>, MetricsError> {
    if rows.len() < 2 {
        return Err(MetricsError::NoPoints);
    }
    let fit = pca_fit(rows).map_err(|e| MetricsError::Io(e.to_string()))?;
    let q = &fit.eig.eigenvectors;
    let comps = q.cols().min(2);
    Ok(rows
        .iter()
        .map(|r| {
            let mut out = [0.0; 2];
            for (c, o) in out.iter_mut().enumerate().take(comps) {
                *o = r
                    .iter()
                    .zip(&fit.mean)
                    .enumerate()
                    .map(|(i, (&v, &m))| ((v - m) * q[(i, c)]).to_f64_lossy())
                    .sum();
            }
            out
        })
        .collect())
}
