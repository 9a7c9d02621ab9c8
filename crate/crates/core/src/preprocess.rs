//! Embedding preparation.
//!
//! Two pipelines: typical-variation normalization (whitening fit on the
//! negative controls, applied to every row) for learned embeddings, and
//! per-plate percentile scaling followed by PCA reduction for
//! hand-engineered features.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, EmbeddingTable};
use crate::linalg::{self, LinalgError, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("need at least {needed} negative-control rows, found {got}")]
    TooFewControls { needed: usize, got: usize },
    #[error("negative-control covariance is singular (eigenvalue {eigenvalue:e} below ridge {ridge:e})")]
    Singular { eigenvalue: f64, ridge: f64 },
    #[error("transform expects dimension {expected}, table has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("plate {plate:?} has {got} negative-control rows, need at least 2")]
    PlateWithoutControls { plate: String, got: usize },
    #[error("plate {0:?} was not seen when the scaler was fit")]
    UnknownPlate(String),
    #[error("cannot reduce dimension {dim} to {k}")]
    InvalidTarget { k: usize, dim: usize },
    #[error("need at least {needed} rows for a {k}-component reduction, found {got}")]
    TooFewRows { k: usize, needed: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Eigenvalues of the control covariance below this are treated as singular.
pub const TVN_RIDGE: f64 = 1e-8;

/// Affine whitening map `x ↦ W (x − μ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TvnTransform<T> {
    pub mean: Vec<T>,
    /// Rows are control principal axes scaled by `λ^{-1/2}`.
    pub whitener: Matrix<T>,
}

impl<T: Scalar> TvnTransform<T> {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![T::zero(); dim], whitener: Matrix::identity(dim) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_vector(&self, x: &[T]) -> Vec<T> {
        let centered: Vec<T> = x.iter().zip(&self.mean).map(|(&v, &m)| v - m).collect();
        self.whitener.mul_vec(&centered)
    }

    pub fn apply(&self, table: &EmbeddingTable<T>) -> Result<EmbeddingTable<T>, PreprocessError> {
        tvn_apply(self, table)
    }
}

/// Fits the whitening map on the negative-control rows only.
pub fn tvn_fit<T: Scalar>(table: &EmbeddingTable<T>) -> Result<TvnTransform<T>, PreprocessError> {
    let controls = table.control_indices();
    let needed = table.dim() + 1;
    if controls.len() < needed {
        return Err(PreprocessError::TooFewControls { needed, got: controls.len() });
    }
    let rows: Vec<&[T]> = controls.iter().map(|&i| table.record(i).vector.as_slice()).collect();
    let fit = linalg::pca_fit(&rows)?;
    let dim = table.dim();
    let ridge = T::of(TVN_RIDGE);
    let mut whitener = Matrix::zeros(dim, dim);
    for (k, &lam) in fit.eig.eigenvalues.iter().enumerate() {
        if !(lam >= ridge) {
            return Err(PreprocessError::Singular { eigenvalue: lam.to_f64_lossy(), ridge: TVN_RIDGE });
        }
        let s = T::one() / lam.sqrt();
        for j in 0..dim {
            whitener[(k, j)] = fit.eig.eigenvectors[(j, k)] * s;
        }
    }
    Ok(TvnTransform { mean: fit.mean, whitener })
}

pub fn tvn_apply<T: Scalar>(t: &TvnTransform<T>, table: &EmbeddingTable<T>) -> Result<EmbeddingTable<T>, PreprocessError> {
    if t.dim() != table.dim() {
        return Err(PreprocessError::DimensionMismatch { expected: t.dim(), got: table.dim() });
    }
    Ok(table.map_vectors(t.whitener.rows(), |r| t.apply_vector(&r.vector))?)
}

/// Percentile with linear interpolation between order statistics
/// (position `(n − 1)·q` in the sorted sample).
pub fn percentile<T: Scalar>(sorted: &[T], q: f64) -> T {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = T::of(h - lo as f64);
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PlatePercentiles<T> {
    pub plate: String,
    pub p01: Vec<T>,
    pub p99: Vec<T>,
}

/// Per-plate, per-coordinate 1st/99th percentiles of the negative controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PercentileScaler<T> {
    pub plates: Vec<PlatePercentiles<T>>,
}

impl<T: Scalar> PercentileScaler<T> {
    pub fn fit(table: &EmbeddingTable<T>) -> Result<Self, PreprocessError> {
        let mut by_plate: BTreeMap<&str, (Vec<usize>, usize)> = BTreeMap::new();
        for (i, r) in table.records().iter().enumerate() {
            let entry = by_plate.entry(r.plate.as_str()).or_default();
            if table.is_control(r) {
                entry.0.push(i);
            }
            entry.1 += 1;
        }
        let mut plates = Vec::with_capacity(by_plate.len());
        for (plate, (controls, _)) in by_plate {
            if controls.len() < 2 {
                return Err(PreprocessError::PlateWithoutControls { plate: plate.to_string(), got: controls.len() });
            }
            let mut p01 = Vec::with_capacity(table.dim());
            let mut p99 = Vec::with_capacity(table.dim());
            let mut column = Vec::with_capacity(controls.len());
            for j in 0..table.dim() {
                column.clear();
                column.extend(controls.iter().map(|&i| table.record(i).vector[j]));
                column.sort_by(|a, b| a.partial_cmp(b).expect("finite embeddings"));
                p01.push(percentile(&column, 0.01));
                p99.push(percentile(&column, 0.99));
            }
            plates.push(PlatePercentiles { plate: plate.to_string(), p01, p99 });
        }
        Ok(Self { plates })
    }

    pub fn apply(&self, table: &EmbeddingTable<T>) -> Result<EmbeddingTable<T>, PreprocessError> {
        let lookup: BTreeMap<&str, &PlatePercentiles<T>> =
            self.plates.iter().map(|p| (p.plate.as_str(), p)).collect();
        if let Some(p) = self.plates.first() {
            if p.p01.len() != table.dim() {
                return Err(PreprocessError::DimensionMismatch { expected: p.p01.len(), got: table.dim() });
            }
        }
        if let Some(r) = table.records().iter().find(|r| !lookup.contains_key(r.plate.as_str())) {
            return Err(PreprocessError::UnknownPlate(r.plate.clone()));
        }
        Ok(table.map_vectors(table.dim(), |r| {
            let p = lookup[r.plate.as_str()];
            r.vector
                .iter()
                .zip(p.p01.iter().zip(&p.p99))
                .map(|(&x, (&lo, &hi))| if hi > lo { (x - lo) / (hi - lo) } else { T::zero() })
                .collect()
        })?)
    }
}

/// Fit-and-apply percentile scaling: per plate and coordinate, the control
/// 1st percentile maps to 0 and the 99th to 1; constant coordinates map to 0.
pub fn percentile_scale<T: Scalar>(table: &EmbeddingTable<T>) -> Result<EmbeddingTable<T>, PreprocessError> {
    PercentileScaler::fit(table)?.apply(table)
}

/// Projection onto the leading principal components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PcaReducer<T> {
    pub mean: Vec<T>,
    /// `k × dim`, one principal axis per row.
    pub components: Matrix<T>,
    /// Variance along each retained component.
    pub variances: Vec<T>,
}

impl<T: Scalar> PcaReducer<T> {
    pub fn fit(table: &EmbeddingTable<T>, k: usize) -> Result<Self, PreprocessError> {
        let dim = table.dim();
        if k == 0 || k > dim {
            return Err(PreprocessError::InvalidTarget { k, dim });
        }
        if table.len() < k + 1 {
            return Err(PreprocessError::TooFewRows { k, needed: k + 1, got: table.len() });
        }
        let rows: Vec<&[T]> = table.vectors().collect();
        let fit = linalg::pca_fit(&rows)?;
        let mut components = Matrix::zeros(k, dim);
        for c in 0..k {
            for j in 0..dim {
                components[(c, j)] = fit.eig.eigenvectors[(j, c)];
            }
        }
        Ok(Self { mean: fit.mean, components, variances: fit.eig.eigenvalues[..k].to_vec() })
    }

    pub fn k(&self) -> usize {
        self.components.rows()
    }

    pub fn apply(&self, table: &EmbeddingTable<T>) -> Result<EmbeddingTable<T>, PreprocessError> {
        if table.dim() != self.mean.len() {
            return Err(PreprocessError::DimensionMismatch { expected: self.mean.len(), got: table.dim() });
        }
        Ok(table.map_vectors(self.k(), |r| {
            let centered: Vec<T> = r.vector.iter().zip(&self.mean).map(|(&v, &m)| v - m).collect();
            self.components.mul_vec(&centered)
        })?)
    }
}

/// Projects centered vectors onto the top-`k` principal components of all rows.
pub fn reduce_dim<T: Scalar>(table: &EmbeddingTable<T>, k: usize) -> Result<EmbeddingTable<T>, PreprocessError> {
    PcaReducer::fit(table, k)?.apply(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EmbeddingRecord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn record(i: usize, compound: &str, plate: &str, v: Vec<f64>) -> EmbeddingRecord<f64> {
        EmbeddingRecord {
            row_id: format!("r{i}"),
            domain: "d".into(),
            plate: plate.into(),
            well: "A01".into(),
            compound: compound.into(),
            dose: "0".into(),
            treatment: format!("{compound}@0"),
            moa: None,
            vector: v,
        }
    }

    fn table(rows: Vec<(&str, &str, Vec<f64>)>) -> EmbeddingTable<f64> {
        let dim = rows[0].2.len();
        let records = rows.into_iter().enumerate().map(|(i, (c, p, v))| record(i, c, p, v)).collect();
        EmbeddingTable::from_records(dim, records, "DMSO").unwrap()
    }

    fn control_stats(t: &EmbeddingTable<f64>) -> (Vec<f64>, Matrix<f64>) {
        let rows: Vec<&[f64]> = t.control_indices().iter().map(|&i| t.record(i).vector.as_slice()).collect();
        linalg::covariance(&rows).unwrap()
    }

    fn gaussian_rows(n: usize, scale: &[f64], shift: &[f64], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| scale.iter().zip(shift).map(|(&s, &m)| m + s * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    }

    #[test]
    fn tvn_whitens_controls_with_diag_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = gaussian_rows(400, &[2.0, 1.0], &[3.0, 0.0], &mut rng);
        let mut entries: Vec<(&str, &str, Vec<f64>)> = rows.into_iter().map(|v| ("DMSO", "p", v)).collect();
        entries.push(("drug", "p", vec![10.0, 10.0]));
        let t = table(entries);
        let tvn = tvn_fit(&t).unwrap();
        let out = tvn_apply(&tvn, &t).unwrap();
        let (mean, cov) = control_stats(&out);
        assert!(mean.iter().all(|m| m.abs() < 1e-8), "{mean:?}");
        assert!(cov.sub(&Matrix::identity(2)).frobenius() < 1e-6);
        // non-control row moved by the same affine map
        assert_eq!(out.record(400).vector, tvn.apply_vector(&[10.0, 10.0]));
    }

    #[test]
    fn tvn_on_standard_normal_controls_is_near_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows = gaussian_rows(20_000, &[1.0; 3], &[0.0; 3], &mut rng);
        let t = table(rows.into_iter().map(|v| ("DMSO", "p", v)).collect());
        let w = tvn_fit(&t).unwrap().whitener;
        let wwt = w.matmul(&w.transpose());
        assert!(wwt.sub(&Matrix::identity(3)).max_abs() < 0.05);
    }

    #[test]
    fn tvn_needs_enough_controls() {
        let t = table(vec![("DMSO", "p", vec![1.0, 2.0]), ("x", "p", vec![0.0, 0.0])]);
        assert!(matches!(tvn_fit(&t), Err(PreprocessError::TooFewControls { needed: 3, got: 1 })));
        let singular = table((0..10).map(|i| ("DMSO", "p", vec![i as f64, 0.0])).collect());
        assert!(matches!(tvn_fit(&singular), Err(PreprocessError::Singular { .. })));
    }

    #[test]
    fn tvn_identity_and_dimension_check() {
        let t = table(vec![("DMSO", "p", vec![1.5, -2.0]), ("x", "p", vec![0.25, 4.0])]);
        assert_eq!(tvn_apply(&TvnTransform::identity(2), &t).unwrap(), t);
        assert!(matches!(
            tvn_apply(&TvnTransform::identity(3), &t),
            Err(PreprocessError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn tvn_preserves_affine_distance_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut entries: Vec<(&str, &str, Vec<f64>)> =
            gaussian_rows(100, &[1.0, 3.0, 0.5], &[0.0; 3], &mut rng).into_iter().map(|v| ("DMSO", "p", v)).collect();
        let drugs = gaussian_rows(5, &[2.0; 3], &[1.0; 3], &mut rng);
        entries.extend(drugs.iter().cloned().map(|v| ("drug", "p", v)));
        let t = table(entries);
        let tvn = tvn_fit(&t).unwrap();
        let out = tvn_apply(&tvn, &t).unwrap();
        // distances between transformed rows equal ‖W (x − y)‖ recomputed directly
        for a in 100..105 {
            for b in 100..105 {
                let diff: Vec<f64> =
                    t.record(a).vector.iter().zip(&t.record(b).vector).map(|(x, y)| x - y).collect();
                let expected = crate::scalar::norm(&tvn.whitener.mul_vec(&diff));
                let got = crate::scalar::euclidean(&out.record(a).vector, &out.record(b).vector);
                assert!((expected - got).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn tvn_second_pass_keeps_identity_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rows = gaussian_rows(300, &[5.0, 0.3, 1.0, 2.0], &[1.0, 2.0, 3.0, 4.0], &mut rng);
        let t = table(rows.into_iter().map(|v| ("DMSO", "p", v)).collect());
        let once = tvn_apply(&tvn_fit(&t).unwrap(), &t).unwrap();
        let twice = tvn_apply(&tvn_fit(&once).unwrap(), &once).unwrap();
        let (_, cov) = control_stats(&twice);
        assert!(cov.sub(&Matrix::identity(4)).frobenius() < 1e-6);
    }

    #[test]
    fn percentile_uniform_grid() {
        // oracle: on the grid i/10000 the interpolated 1st/99th percentiles
        // are the grid points 100/10000 and 9900/10000
        let mut entries: Vec<(&str, &str, Vec<f64>)> =
            (0..=10_000).map(|i| ("DMSO", "p", vec![i as f64 / 10_000.0])).collect();
        entries.push(("drug", "p", vec![0.5]));
        let t = table(entries);
        let scaler = PercentileScaler::fit(&t).unwrap();
        assert!((scaler.plates[0].p01[0] - 0.01).abs() < 1e-12);
        assert!((scaler.plates[0].p99[0] - 0.99).abs() < 1e-12);
        let out = scaler.apply(&t).unwrap();
        let expected = (0.5 - 0.01) / (0.99 - 0.01);
        assert!((out.record(10_001).vector[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn percentile_constant_and_anchor_values() {
        let mut entries: Vec<(&str, &str, Vec<f64>)> = (0..=100).map(|i| ("DMSO", "p", vec![7.0, i as f64])).collect();
        entries.push(("drug", "p", vec![3.0, 50.0]));
        let t = table(entries);
        let out = percentile_scale(&t).unwrap();
        assert!(out.vectors().all(|v| v[0] == 0.0));
        // controls sitting exactly on the percentiles map to 0 and 1
        assert!(out.record(1).vector[1].abs() < 1e-15);
        assert!((out.record(99).vector[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn percentile_is_per_plate_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut entries: Vec<(&str, &str, Vec<f64>)> = Vec::new();
        for plate in ["p1", "p2"] {
            for _ in 0..50 {
                entries.push(("DMSO", plate, vec![rng.random_range(0.0..1.0), rng.random_range(-5.0..5.0)]));
            }
            for _ in 0..10 {
                entries.push(("drug", plate, vec![rng.random_range(0.0..2.0), rng.random_range(-5.0..5.0)]));
            }
        }
        let t = table(entries.clone());
        let base = percentile_scale(&t).unwrap();
        let shifted = table(
            entries.into_iter()
                .map(|(c, p, v)| {
                    let s = if p == "p1" { 3.5 } else { -12.25 };
                    (c, p, v.into_iter().map(|x| x + s).collect())
                })
                .collect(),
        );
        let out = percentile_scale(&shifted).unwrap();
        for (a, b) in base.vectors().zip(out.vectors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn percentile_requires_controls_per_plate() {
        let t = table(vec![("DMSO", "p1", vec![0.0]), ("DMSO", "p1", vec![1.0]), ("drug", "p2", vec![0.5])]);
        assert!(matches!(percentile_scale(&t), Err(PreprocessError::PlateWithoutControls { plate, .. }) if plate == "p2"));
    }

    #[test]
    fn reduce_dim_full_basis_keeps_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = table(gaussian_rows(60, &[1.0, 2.0, 0.5, 3.0], &[1.0; 4], &mut rng).into_iter().map(|v| ("x", "p", v)).collect());
        let out = reduce_dim(&t, 4).unwrap();
        let rows_in: Vec<&[f64]> = t.vectors().collect();
        let rows_out: Vec<&[f64]> = out.vectors().collect();
        let tin = linalg::covariance(&rows_in).unwrap().1.trace();
        let tout = linalg::covariance(&rows_out).unwrap().1.trace();
        assert!((tin - tout).abs() / tin < 1e-8);
    }

    #[test]
    fn reduce_dim_rank_one_reconstructs() {
        let t = table((0..10).map(|i| ("x", "p", vec![i as f64, -2.0 * i as f64, 0.5 * i as f64 + 1.0])).collect());
        let pca = PcaReducer::fit(&t, 1).unwrap();
        let out = pca.apply(&t).unwrap();
        for (orig, red) in t.vectors().zip(out.vectors()) {
            let recon: Vec<f64> = (0..3).map(|j| pca.mean[j] + red[0] * pca.components[(0, j)]).collect();
            for (a, b) in orig.iter().zip(&recon) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn reduce_dim_retains_top_eigenvalues_and_decorrelates() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let scales: Vec<f64> = (0..8).map(|i| 0.5 + i as f64 * 0.4).collect();
        let t = table(gaussian_rows(200, &scales, &[0.0; 8], &mut rng).into_iter().map(|v| ("x", "p", v)).collect());
        let rows_in: Vec<&[f64]> = t.vectors().collect();
        let eig = linalg::sym_eig(&linalg::covariance(&rows_in).unwrap().1).unwrap();
        let top5: f64 = eig.eigenvalues[..5].iter().sum();
        let out = reduce_dim(&t, 5).unwrap();
        assert_eq!(out.dim(), 5);
        let rows_out: Vec<&[f64]> = out.vectors().collect();
        let cov = linalg::covariance(&rows_out).unwrap().1;
        assert!((cov.trace() - top5).abs() / top5 < 1e-8);
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert!(cov[(i, j)].abs() < 1e-8 * cov.trace());
                }
            }
        }
    }

    #[test]
    fn reduce_dim_rejects_bad_target() {
        let t = table(vec![("x", "p", vec![0.0, 1.0]), ("x", "p", vec![1.0, 0.0])]);
        assert!(matches!(reduce_dim(&t, 3), Err(PreprocessError::InvalidTarget { .. })));
        assert!(matches!(reduce_dim(&t, 2), Err(PreprocessError::TooFewRows { .. })));
    }
}
