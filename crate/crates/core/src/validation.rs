//! Early-stopping selection over a checkpoint series and bootstrap error
//! bars.
//!
//! Leave-one-compound-out selection picks, for every held-out compound, the
//! checkpoint that maximizes a criterion on the remaining compounds, then
//! scores only the held-out compound's points there. Bootstrap replicates
//! resample cells with replacement inside each (plate, well).

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::EmbeddingTable;
use crate::metrics::{self, KnnFilter, MetricsError, Summary, TreatmentPoint};
use crate::scalar::{mean_std, Scalar};
use crate::wdn::{Checkpoint, Payload, WdnError};

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("checkpoint list is empty")]
    NoCheckpoints,
    #[error("need at least two non-control compounds, found {0}")]
    TooFewCompounds(usize),
    #[error("compound {0:?} not present")]
    UnknownCompound(String),
    #[error("well {plate}/{well} has no rows")]
    EmptyWell { plate: String, well: String },
    #[error("replicate count must be at least 1")]
    NoReplicates,
    #[error(transparent)]
    Inner(Box<crate::Error>),
}

impl From<crate::Error> for ValidationError {
    fn from(e: crate::Error) -> Self {
        ValidationError::Inner(Box::new(e))
    }
}

impl From<MetricsError> for ValidationError {
    fn from(e: MetricsError) -> Self {
        crate::Error::from(e).into()
    }
}

impl From<WdnError> for ValidationError {
    fn from(e: WdnError) -> Self {
        crate::Error::from(e).into()
    }
}

/// Quantity maximized to choose a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Mean NSC k-NN MOA accuracy over `k = 1..=k_max`.
    AvgKnn,
    Silhouette,
}

impl Criterion {
    pub fn evaluate<T: Scalar>(self, points: &[TreatmentPoint<T>], k_max: usize) -> Result<f64, MetricsError> {
        match self {
            Criterion::AvgKnn => {
                let mut total = 0.0;
                for k in 1..=k_max {
                    total += metrics::knn_moa(points, k, KnnFilter::Nsc)?;
                }
                Ok(total / k_max as f64)
            }
            Criterion::Silhouette => metrics::silhouette_moa(points),
        }
    }
}

/// Treatment means at one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T> {
    pub step: usize,
    pub points: Vec<TreatmentPoint<T>>,
}

/// Treatment means of `table` under each checkpoint.
///
/// For per-domain affine payloads the transform is applied to the raw means
/// (the mean commutes with an affine map), which avoids transforming every
/// row once per checkpoint.
pub fn snapshots<T: Scalar>(
    table: &EmbeddingTable<T>,
    checkpoints: &[Checkpoint<T>],
) -> Result<Vec<Snapshot<T>>, ValidationError> {
    let raw = metrics::treatment_means(table)?;
    checkpoints
        .iter()
        .map(|ck| {
            let points = match &ck.payload {
                Payload::Wdn(_) => {
                    let model = ck.to_model()?;
                    map_points(&raw, |p| Ok(model.transform(&p.domain)?.apply(&p.mean_vector)))?
                }
                Payload::Coral(c) => map_points(&raw, |p| {
                    let m = c.matrix_for(&p.domain).ok_or_else(|| WdnError::UnknownDomain(p.domain.clone()))?;
                    Ok(m.vec_mul(&p.mean_vector))
                })?,
                Payload::Tvn(t) => map_points(&raw, |p| Ok(t.apply_vector(&p.mean_vector)))?,
                Payload::Percentile(_) | Payload::Pca(_) => metrics::treatment_means(&ck.apply(table)?)?,
            };
            Ok(Snapshot { step: ck.step, points })
        })
        .collect()
}

fn map_points<T: Scalar>(
    raw: &[TreatmentPoint<T>],
    f: impl Fn(&TreatmentPoint<T>) -> Result<Vec<T>, WdnError>,
) -> Result<Vec<TreatmentPoint<T>>, ValidationError> {
    raw.iter().map(|p| Ok(TreatmentPoint { mean_vector: f(p)?, ..p.clone() })).collect()
}

/// Index maximizing `values`; ties go to the earliest.
fn argmax_earliest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Selection made for one held-out compound (or for the whole dataset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    pub criterion: Criterion,
    pub held_out: Option<String>,
    pub selected_index: usize,
    pub selected_step: usize,
    /// `(step, criterion value)` per checkpoint.
    pub trace: Vec<(usize, f64)>,
}

/// Picks the checkpoint with the largest criterion over `snaps`, using only
/// points accepted by `keep`.
pub fn select_checkpoint<T: Scalar>(
    snaps: &[Snapshot<T>],
    criterion: Criterion,
    k_max: usize,
    held_out: Option<&str>,
) -> Result<StoppingRule, ValidationError> {
    if snaps.is_empty() {
        return Err(ValidationError::NoCheckpoints);
    }
    let mut trace = Vec::with_capacity(snaps.len());
    for s in snaps {
        let pts: Vec<TreatmentPoint<T>> =
            s.points.iter().filter(|p| Some(p.compound.as_str()) != held_out).cloned().collect();
        trace.push((s.step, criterion.evaluate(&pts, k_max)?));
    }
    let values: Vec<f64> = trace.iter().map(|t| t.1).collect();
    let i = argmax_earliest(&values);
    Ok(StoppingRule { criterion, held_out: held_out.map(str::to_string), selected_index: i, selected_step: snaps[i].step, trace })
}

/// Pooled held-out k-NN accuracies plus the per-fold selections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocoResult {
    /// Index `k − 1`, percent.
    pub knn_nsc: Vec<f64>,
    /// Empty when some held-out point lacks enough cross-domain neighbors.
    pub knn_nsc_nsb: Vec<f64>,
    pub held_out_points: usize,
    pub folds: Vec<StoppingRule>,
}

impl LocoResult {
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> =
            self.knn_nsc.iter().enumerate().map(|(k, v)| (format!("knn_nsc_{}", k + 1), *v)).collect();
        out.extend(self.knn_nsc_nsb.iter().enumerate().map(|(k, v)| (format!("knn_nsc_nsb_{}", k + 1), *v)));
        out
    }
}

/// Leave-one-compound-out selection over precomputed snapshots.
///
/// `on_criterion` sees every point set the criterion is evaluated on.
pub fn loco_cv_snapshots<T: Scalar>(
    snaps: &[Snapshot<T>],
    criterion: Criterion,
    k_max: usize,
    mut on_criterion: impl FnMut(&str, &[TreatmentPoint<T>]),
) -> Result<LocoResult, ValidationError> {
    let first = snaps.first().ok_or(ValidationError::NoCheckpoints)?;
    let compounds: BTreeSet<&str> = first.points.iter().map(|p| p.compound.as_str()).collect();
    if compounds.len() < 2 {
        return Err(ValidationError::TooFewCompounds(compounds.len()));
    }
    let mut nsc: Vec<Vec<f64>> = vec![Vec::new(); k_max];
    let mut nsb: Option<Vec<Vec<f64>>> = Some(vec![Vec::new(); k_max]);
    let mut folds = Vec::with_capacity(compounds.len());
    for &c in &compounds {
        for s in snaps {
            let pts: Vec<TreatmentPoint<T>> = s.points.iter().filter(|p| p.compound != c).cloned().collect();
            on_criterion(c, &pts);
        }
        let rule = select_checkpoint(snaps, criterion, k_max, Some(c))?;
        let pts = &snaps[rule.selected_index].points;
        let queries: Vec<usize> = (0..pts.len()).filter(|&i| pts[i].compound == c).collect();
        let dist = metrics_dist(pts)?;
        let per_k = metrics_scores(pts, &dist, k_max, KnnFilter::Nsc, &queries)?;
        for (acc, s) in nsc.iter_mut().zip(per_k) {
            acc.extend(s);
        }
        if let Some(acc) = nsb.as_mut() {
            match metrics_scores(pts, &dist, k_max, KnnFilter::NscNsb, &queries) {
                Ok(per_k) => acc.iter_mut().zip(per_k).for_each(|(a, s)| a.extend(s)),
                Err(MetricsError::InsufficientNeighbors { .. }) => nsb = None,
                Err(e) => return Err(e.into()),
            }
        }
        folds.push(rule);
    }
    let pool = |v: &Vec<f64>| 100.0 * v.iter().sum::<f64>() / v.len() as f64;
    Ok(LocoResult {
        held_out_points: nsc[0].len(),
        knn_nsc: nsc.iter().map(pool).collect(),
        knn_nsc_nsb: nsb.map(|v| v.iter().map(pool).collect()).unwrap_or_default(),
        folds,
    })
}

fn metrics_dist<T: Scalar>(pts: &[TreatmentPoint<T>]) -> Result<Vec<Vec<f64>>, MetricsError> {
    crate::metrics::cosine_matrix(pts)
}

fn metrics_scores<T: Scalar>(
    pts: &[TreatmentPoint<T>],
    dist: &[Vec<f64>],
    k_max: usize,
    filter: KnnFilter,
    queries: &[usize],
) -> Result<Vec<Vec<f64>>, MetricsError> {
    crate::metrics::knn::scores_upto(pts, dist, k_max, filter, queries)
}

/// Leave-one-compound-out CV over a checkpoint series.
pub fn loco_cv<T: Scalar>(
    table: &EmbeddingTable<T>,
    checkpoints: &[Checkpoint<T>],
    criterion: Criterion,
    k_max: usize,
) -> Result<LocoResult, ValidationError> {
    if checkpoints.is_empty() {
        return Err(ValidationError::NoCheckpoints);
    }
    loco_cv_snapshots(&snapshots(table, checkpoints)?, criterion, k_max, |_, _| {})
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

/// Metric values per replicate plus their mean and (n−1) std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub replicates: Vec<Vec<(String, f64)>>,
    pub summary: BTreeMap<String, Summary>,
    /// Step chosen in each replicate, when selection was part of it.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selected_steps: Vec<usize>,
}

/// Row indices of one bootstrap replicate: each well's rows drawn with
/// replacement, well sizes preserved, wells in sorted key order.
pub fn resample_indices<T: Scalar, R: Rng + ?Sized>(
    table: &EmbeddingTable<T>,
    rng: &mut R,
) -> Result<Vec<usize>, ValidationError> {
    let mut out = Vec::with_capacity(table.len());
    for ((plate, well), rows) in table.well_index() {
        if rows.is_empty() {
            return Err(ValidationError::EmptyWell { plate, well });
        }
        out.extend((0..rows.len()).map(|_| rows[rng.random_range(0..rows.len())]));
    }
    Ok(out)
}

/// Independent, reproducible generator for replicate `rep`.
fn replicate_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(rep as u64);
    r
}

fn summarize(replicates: &[Vec<(String, f64)>]) -> BTreeMap<String, Summary> {
    let mut by_name: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for rep in replicates {
        for (n, v) in rep {
            by_name.entry(n).or_default().push(*v);
        }
    }
    by_name
        .into_iter()
        .map(|(n, v)| {
            let (mean, std) = mean_std(&v);
            (n.to_string(), Summary { mean, std })
        })
        .collect()
}

fn run_replicates<R: Send>(
    reps: usize,
    exec: Execution,
    f: impl Fn(usize) -> Result<R, ValidationError> + Sync,
) -> Result<Vec<R>, ValidationError> {
    if reps == 0 {
        return Err(ValidationError::NoReplicates);
    }
    match exec {
        Execution::Sequential => (0..reps).map(f).collect(),
        Execution::Parallel => (0..reps).into_par_iter().map(&f).collect(),
    }
}

/// Bootstrap of an arbitrary metric over within-well resamples.
pub fn bootstrap_metrics<T, F>(
    table: &EmbeddingTable<T>,
    metric: F,
    reps: usize,
    seed: u64,
    exec: Execution,
) -> Result<BootstrapResult, ValidationError>
where
    T: Scalar,
    F: Fn(&EmbeddingTable<T>) -> Result<Vec<(String, f64)>, ValidationError> + Sync,
{
    let replicates = run_replicates(reps, exec, |rep| {
        let idx = resample_indices(table, &mut replicate_rng(seed, rep))?;
        metric(&table.select(&idx))
    })?;
    Ok(BootstrapResult { summary: summarize(&replicates), replicates, selected_steps: Vec::new() })
}

/// Bootstrap where each replicate first re-selects the checkpoint on its own
/// resampled data, then evaluates `metric` on the resample transformed by
/// that checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_with_per_replicate_stopping<T, F>(
    table: &EmbeddingTable<T>,
    checkpoints: &[Checkpoint<T>],
    criterion: Criterion,
    k_max: usize,
    metric: F,
    reps: usize,
    seed: u64,
    exec: Execution,
) -> Result<BootstrapResult, ValidationError>
where
    T: Scalar,
    F: Fn(&EmbeddingTable<T>) -> Result<Vec<(String, f64)>, ValidationError> + Sync,
{
    if checkpoints.is_empty() {
        return Err(ValidationError::NoCheckpoints);
    }
    let out = run_replicates(reps, exec, |rep| {
        let idx = resample_indices(table, &mut replicate_rng(seed, rep))?;
        let sample = table.select(&idx);
        let chosen = if checkpoints.len() == 1 {
            0
        } else {
            select_checkpoint(&snapshots(&sample, checkpoints)?, criterion, k_max, None)?.selected_index
        };
        let ck = &checkpoints[chosen];
        let values = metric(&ck.apply(&sample)?)?;
        Ok((values, ck.step))
    })?;
    let (replicates, selected_steps): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    Ok(BootstrapResult { summary: summarize(&replicates), replicates, selected_steps })
}
