//! Exact Wasserstein-1 distances between equal-size uniform empirical
//! distributions, used to check critic estimates and alignment quality.

use thiserror::Error;

use crate::scalar::{euclidean, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OtError {
    #[error("point clouds have different sizes ({0} vs {1})")]
    SizeMismatch(usize, usize),
    #[error("point clouds have different dimensions ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("point cloud is empty")]
    Empty,
    #[error("cloud size {size} exceeds the assignment cap {cap}")]
    TooLarge { size: usize, cap: usize },
    #[error("non-finite coordinate in point cloud")]
    NonFinite,
}

/// Largest cloud the O(n³) assignment solver accepts.
pub const ASSIGNMENT_CAP: usize = 512;

/// Uniformly weighted finite point set.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T> {
    points: Vec<Vec<T>>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Vec<Vec<T>>) -> Result<Self, OtError> {
        let first = points.first().ok_or(OtError::Empty)?;
        let dim = first.len();
        for p in &points {
            if p.len() != dim {
                return Err(OtError::DimensionMismatch(dim, p.len()));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(OtError::NonFinite);
            }
        }
        Ok(Self { points })
    }

    pub fn from_scalars(xs: &[T]) -> Result<Self, OtError> {
        Self::new(xs.iter().map(|&x| vec![x]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<T>] {
        &self.points
    }

    pub fn translated(&self, v: &[T]) -> Self {
        Self { points: self.points.iter().map(|p| p.iter().zip(v).map(|(&a, &b)| a + b).collect()).collect() }
    }
}

/// W1 between two equal-size samples on the line: mean absolute difference
/// of the sorted sequences.
pub fn exact_w1_1d<T: Scalar>(xs: &[T], ys: &[T]) -> Result<T, OtError> {
    if xs.len() != ys.len() {
        return Err(OtError::SizeMismatch(xs.len(), ys.len()));
    }
    if xs.is_empty() {
        return Err(OtError::Empty);
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(OtError::NonFinite);
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(|p, q| p.partial_cmp(q).unwrap());
    b.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let total = a.iter().zip(&b).map(|(&p, &q)| (p - q).abs()).sum::<T>();
    Ok(total / T::of_usize(a.len()))
}

/// W1 between equal-size uniform clouds under the Euclidean metric: the
/// minimum-cost perfect matching divided by `n`.
pub fn exact_w1_assignment<T: Scalar>(a: &PointCloud<T>, b: &PointCloud<T>) -> Result<T, OtError> {
    if a.len() != b.len() {
        return Err(OtError::SizeMismatch(a.len(), b.len()));
    }
    if a.dim() != b.dim() {
        return Err(OtError::DimensionMismatch(a.dim(), b.dim()));
    }
    if a.len() > ASSIGNMENT_CAP {
        return Err(OtError::TooLarge { size: a.len(), cap: ASSIGNMENT_CAP });
    }
    let n = a.len();
    let cost: Vec<Vec<T>> =
        a.points().iter().map(|p| b.points().iter().map(|q| euclidean(p, q)).collect()).collect();
    let assignment = hungarian(&cost);
    let total = (0..n).map(|i| cost[i][assignment[i]]).sum::<T>();
    Ok(total / T::of_usize(n))
}

/// Minimum-cost perfect matching on a square cost matrix (Kuhn-Munkres with
/// row/column potentials, O(n³)). Returns the column assigned to each row.
pub fn hungarian<T: Scalar>(cost: &[Vec<T>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual column used to start augmenting paths
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0usize;
        let mut minv = vec![T::infinity(); n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = T::infinity();
            let mut col1 = 0usize;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = cost[r - 1][col - 1] - u[r] - v[col];
                if reduced < minv[col] {
                    minv[col] = reduced;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for col in 1..=n {
        assignment[owner[col] - 1] = col - 1;
    }
    assignment
}
