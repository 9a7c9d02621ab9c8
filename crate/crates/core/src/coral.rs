//! Correlation alignment baseline.
//!
//! Row-vector convention throughout: a row `x` from domain `d` maps to
//! `x · R_d^{-1/2} R^{1/2}` where `R_d = C_d + ηI`, `R = C + ηI`, `C_d` is
//! the negative-control covariance of domain `d` and the target `C = I`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, EmbeddingTable};
use crate::linalg::{self, LinalgError, Matrix, Power};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum CoralError {
    #[error("domain {domain:?} has {got} negative-control rows, need at least 2")]
    DomainWithoutControls { domain: String, got: usize },
    #[error("no transform fitted for domain {0:?}")]
    UnknownDomain(String),
    #[error("transform expects dimension {expected}, table has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("regularization weight must be finite and non-negative, got {0}")]
    InvalidEta(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub const DEFAULT_ETA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DomainAlignment<T> {
    pub domain: String,
    /// `R_d^{-1/2} R^{1/2}`, right-multiplied onto row vectors.
    pub matrix: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CoralTransform<T> {
    pub eta: T,
    pub target_cov_identity: bool,
    pub domains: Vec<DomainAlignment<T>>,
}

impl<T: Scalar> CoralTransform<T> {
    pub fn identity(dim: usize, domains: &[String]) -> Self {
        Self {
            eta: T::zero(),
            target_cov_identity: true,
            domains: domains
                .iter()
                .map(|d| DomainAlignment { domain: d.clone(), matrix: Matrix::identity(dim) })
                .collect(),
        }
    }

    pub fn matrix_for(&self, domain: &str) -> Option<&Matrix<T>> {
        self.domains.iter().find(|d| d.domain == domain).map(|d| &d.matrix)
    }

    pub fn apply(&self, table: &EmbeddingTable<T>) -> Result<EmbeddingTable<T>, CoralError> {
        coral_apply(self, table)
    }
}

/// Per-domain control covariances `C_d` (1/(n−1) normalization).
pub fn control_covariances<T: Scalar>(
    table: &EmbeddingTable<T>,
) -> Result<BTreeMap<String, Matrix<T>>, CoralError> {
    let mut by_domain: BTreeMap<String, Vec<&[T]>> =
        table.domains().into_iter().map(|d| (d, Vec::new())).collect();
    for r in table.records() {
        if table.is_control(r) {
            by_domain.get_mut(&r.domain).expect("domain listed").push(&r.vector);
        }
    }
    let mut out = BTreeMap::new();
    for (domain, rows) in by_domain {
        if rows.len() < 2 {
            return Err(CoralError::DomainWithoutControls { domain, got: rows.len() });
        }
        out.insert(domain, linalg::covariance(&rows)?.1);
    }
    Ok(out)
}

/// Fits one alignment matrix per domain from that domain's negative controls.
pub fn coral_fit<T: Scalar>(table: &EmbeddingTable<T>, eta: T) -> Result<CoralTransform<T>, CoralError> {
    if !(eta >= T::zero()) || !eta.is_finite() {
        return Err(CoralError::InvalidEta(eta.to_f64_lossy()));
    }
    let covs = control_covariances(table)?;
    let target_sqrt = linalg::psd_power(&Matrix::identity(table.dim()), Power::Sqrt, eta)?;
    let mut domains = Vec::with_capacity(covs.len());
    for (domain, c_d) in covs {
        let r_d_inv_sqrt = linalg::psd_power(&c_d, Power::InvSqrt, eta)?;
        domains.push(DomainAlignment { domain, matrix: r_d_inv_sqrt.matmul(&target_sqrt) });
    }
    Ok(CoralTransform { eta, target_cov_identity: true, domains })
}

pub fn coral_apply<T: Scalar>(t: &CoralTransform<T>, table: &EmbeddingTable<T>) -> Result<EmbeddingTable<T>, CoralError> {
    let lookup: BTreeMap<&str, &Matrix<T>> = t.domains.iter().map(|d| (d.domain.as_str(), &d.matrix)).collect();
    if let Some(m) = t.domains.first() {
        if m.matrix.rows() != table.dim() {
            return Err(CoralError::DimensionMismatch { expected: m.matrix.rows(), got: table.dim() });
        }
    }
    if let Some(r) = table.records().iter().find(|r| !lookup.contains_key(r.domain.as_str())) {
        return Err(CoralError::UnknownDomain(r.domain.clone()));
    }
    Ok(table.map_vectors(table.dim(), |r| lookup[r.domain.as_str()].vec_mul(&r.vector))?)
}

/// `Aᵀ C_d A` for the fitted `A = R_d^{-1/2} R^{1/2}`: the covariance the
/// aligned controls of a domain must have.
pub fn predicted_aligned_covariance<T: Scalar>(alignment: &Matrix<T>, c_d: &Matrix<T>) -> Matrix<T> {
    alignment.transpose().matmul(c_d).matmul(alignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EmbeddingRecord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rec(i: usize, compound: &str, domain: &str, v: Vec<f64>) -> EmbeddingRecord<f64> {
        EmbeddingRecord {
            row_id: format!("r{i}"),
            domain: domain.into(),
            plate: "p".into(),
            well: "w".into(),
            compound: compound.into(),
            dose: "0".into(),
            treatment: format!("{compound}@0"),
            moa: None,
            vector: v,
        }
    }

    /// Controls in `domain` whose sample covariance is exactly `diag(vars)`
    /// and mean exactly zero: ±√(vars·(n−1)/2) on each axis.
    fn exact_controls(domain: &str, vars: &[f64], start: usize) -> Vec<EmbeddingRecord<f64>> {
        let dim = vars.len();
        let n = 2 * dim;
        let mut out = Vec::new();
        for (k, &v) in vars.iter().enumerate() {
            let a = (v * (n as f64 - 1.0) / 2.0).sqrt();
            for sign in [1.0, -1.0] {
                let mut x = vec![0.0; dim];
                x[k] = sign * a;
                out.push(rec(start + out.len(), "DMSO", domain, x));
            }
        }
        out
    }

    fn diag_close(m: &Matrix<f64>, diag: &[f64], tol: f64) -> bool {
        m.sub(&Matrix::from_diag(diag)).max_abs() < tol
    }

    #[test]
    fn whitened_controls_give_identity() {
        let mut records = exact_controls("a", &[1.0, 1.0], 0);
        records.extend(exact_controls("b", &[1.0, 1.0], 10));
        let t = EmbeddingTable::from_records(2, records, "DMSO").unwrap();
        let fit = coral_fit(&t, 1.0).unwrap();
        for d in &fit.domains {
            assert!(diag_close(&d.matrix, &[1.0, 1.0], 1e-10));
        }
    }

    #[test]
    fn closed_form_diagonal_cases() {
        // C_d = diag(3, 0), η = 1: R_d^{-1/2} = diag(1/2, 1), R^{1/2} = √2·I
        let t = EmbeddingTable::from_records(2, exact_controls("a", &[3.0, 0.0], 0), "DMSO").unwrap();
        let fit = coral_fit(&t, 1.0).unwrap();
        let s2 = 2f64.sqrt();
        assert!(diag_close(&fit.domains[0].matrix, &[s2 / 2.0, s2], 1e-12));

        // η = 0, C_d = diag(4, 1) → diag(1/2, 1)
        let t = EmbeddingTable::from_records(2, exact_controls("a", &[4.0, 1.0], 0), "DMSO").unwrap();
        let fit = coral_fit(&t, 0.0).unwrap();
        assert!(diag_close(&fit.domains[0].matrix, &[0.5, 1.0], 1e-12));
    }

    fn two_domain_table(rng: &mut ChaCha8Rng, n: usize) -> EmbeddingTable<f64> {
        let mut records = Vec::new();
        for i in 0..n {
            let z: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            records.push(rec(records.len(), "DMSO", "a", vec![2.0 * z[0], z[1]]));
            let z: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            records.push(rec(records.len(), "DMSO", "b", vec![z[0], z[1]]));
            if i % 10 == 0 {
                records.push(rec(records.len(), "drug", "a", vec![rng.random_range(-1.0..1.0), 0.0]));
            }
        }
        EmbeddingTable::from_records(2, records, "DMSO").unwrap()
    }

    fn aligned_control_cov(t: &EmbeddingTable<f64>, domain: &str) -> Matrix<f64> {
        let rows: Vec<&[f64]> = t
            .records()
            .iter()
            .filter(|r| r.domain == domain && r.compound == "DMSO")
            .map(|r| r.vector.as_slice())
            .collect();
        linalg::covariance(&rows).unwrap().1
    }

    #[test]
    fn unregularized_alignment_whitens_each_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = two_domain_table(&mut rng, 4000);
        let fit = coral_fit(&t, 0.0).unwrap();
        let out = coral_apply(&fit, &t).unwrap();
        for d in ["a", "b"] {
            let cov = aligned_control_cov(&out, d);
            // exact up to round-off, and within Monte-Carlo tolerance of I
            assert!(cov.sub(&Matrix::identity(2)).max_abs() < 1e-6);
        }
    }

    #[test]
    fn aligned_covariance_identity_holds_for_regularized_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = two_domain_table(&mut rng, 500);
        let fit = coral_fit(&t, 1.0).unwrap();
        let covs = control_covariances(&t).unwrap();
        let out = coral_apply(&fit, &t).unwrap();
        for d in &fit.domains {
            let predicted = predicted_aligned_covariance(&d.matrix, &covs[&d.domain]);
            let observed = aligned_control_cov(&out, &d.domain);
            assert!(predicted.sub(&observed).max_abs() < 1e-6);
            assert!(d.matrix.sub(&d.matrix.transpose()).max_abs() < 1e-12);
        }
    }

    #[test]
    fn fit_ignores_non_control_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let t = two_domain_table(&mut rng, 100);
        let perturbed = t.map_vectors(2, |r| {
            if r.compound == "DMSO" { r.vector.clone() } else { vec![r.vector[0] * 7.0 + 1.0, -3.0] }
        })
        .unwrap();
        assert_eq!(coral_fit(&t, 1.0).unwrap(), coral_fit(&perturbed, 1.0).unwrap());
    }

    #[test]
    fn apply_commutes_with_row_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let t = two_domain_table(&mut rng, 50);
        let fit = coral_fit(&t, 1.0).unwrap();
        let perm: Vec<usize> = (0..t.len()).rev().collect();
        let a = coral_apply(&fit, &t.select(&perm)).unwrap();
        let b = coral_apply(&fit, &t).unwrap().select(&perm);
        assert_eq!(a, b);
    }

    #[test]
    fn identity_and_error_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let t = two_domain_table(&mut rng, 20);
        let id = CoralTransform::identity(2, &t.domains());
        assert_eq!(coral_apply(&id, &t).unwrap(), t);
        let only_a = CoralTransform::identity(2, &["a".to_string()]);
        assert!(matches!(coral_apply(&only_a, &t), Err(CoralError::UnknownDomain(d)) if d == "b"));
        let lonely = EmbeddingTable::from_records(1, vec![rec(0, "DMSO", "a", vec![1.0]), rec(1, "DMSO", "a", vec![2.0]), rec(2, "x", "b", vec![0.0])], "DMSO").unwrap();
        assert!(matches!(coral_fit(&lonely, 1.0), Err(CoralError::DomainWithoutControls { .. })));
        assert!(matches!(coral_fit(&t, -1.0), Err(CoralError::InvalidEta(_))));
    }
}
