use serde::{Deserialize, Serialize};

use super::{cosine_matrix, MetricsError, TreatmentPoint};
use crate::scalar::Scalar;

/// Which candidates may serve as neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnFilter {
    /// Not the same compound.
    Nsc,
    /// Neither the same compound nor the same domain.
    NscNsb,
}

impl KnnFilter {
    fn eligible<T>(self, a: &TreatmentPoint<T>, b: &TreatmentPoint<T>) -> bool {
        a.compound != b.compound && (self == KnnFilter::Nsc || a.domain != b.domain)
    }
}

/// For each `k` in `1..=k_max` and each query, the fraction of its `k`
/// nearest eligible neighbors sharing its MOA. Ties in distance go to the
/// smaller point index.
pub(crate) fn scores_upto(
    points_meta: &[TreatmentPoint<impl Scalar>],
    dist: &[Vec<f64>],
    k_max: usize,
    filter: KnnFilter,
    queries: &[usize],
) -> Result<Vec<Vec<f64>>, MetricsError> {
    if k_max == 0 {
        return Err(MetricsError::InvalidK);
    }
    let mut out = vec![Vec::with_capacity(queries.len()); k_max];
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(points_meta.len());
    for &q in queries {
        let p = &points_meta[q];
        cand.clear();
        cand.extend(
            (0..points_meta.len())
                .filter(|&j| j != q && filter.eligible(p, &points_meta[j]))
                .map(|j| (dist[q][j], j)),
        );
        if cand.len() < k_max {
            return Err(MetricsError::InsufficientNeighbors {
                index: q,
                treatment: p.treatment.clone(),
                domain: p.domain.clone(),
                available: cand.len(),
                k: k_max,
            });
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut hits = 0usize;
        for (k, &(_, j)) in cand.iter().take(k_max).enumerate() {
            if points_meta[j].moa == p.moa {
                hits += 1;
            }
            out[k].push(hits as f64 / (k + 1) as f64);
        }
    }
    Ok(out)
}

/// Per-query MOA agreement fraction among the `k` nearest eligible
/// neighbors drawn from all `points`.
pub fn knn_point_scores<T: Scalar>(
    points: &[TreatmentPoint<T>],
    k: usize,
    filter: KnnFilter,
    queries: &[usize],
) -> Result<Vec<f64>, MetricsError> {
    let dist = cosine_matrix(points)?;
    Ok(scores_upto(points, &dist, k, filter, queries)?.pop().expect("k ≥ 1"))
}

/// k-NN MOA assignment accuracy in percent, averaged over all points.
pub fn knn_moa<T: Scalar>(points: &[TreatmentPoint<T>], k: usize, filter: KnnFilter) -> Result<f64, MetricsError> {
    if points.is_empty() {
        return Err(MetricsError::NoPoints);
    }
    let all: Vec<usize> = (0..points.len()).collect();
    let s = knn_point_scores(points, k, filter, &all)?;
    Ok(100.0 * s.iter().sum::<f64>() / s.len() as f64)
}
