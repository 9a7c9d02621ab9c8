use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// `x ↦ M x + b`, the per-domain correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AffineTransform<T> {
    pub m: Matrix<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> AffineTransform<T> {
    /// Exactly `M = I`, `b = 0`.
    pub fn identity(dim: usize) -> Self {
        Self { m: Matrix::identity(dim), b: vec![T::zero(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn is_identity(&self) -> bool {
        let d = self.dim();
        self.b.iter().all(|&v| v == T::zero())
            && self.m.as_slice().iter().enumerate().all(|(k, &v)| v == if k / d == k % d { T::one() } else { T::zero() })
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim()];
        self.apply_into(x, &mut out);
        out
    }

    pub fn apply_into(&self, x: &[T], out: &mut [T]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = crate::scalar::dot(self.m.row(i), x) + self.b[i];
        }
    }

    pub(crate) fn param_count(dim: usize) -> usize {
        dim * dim + dim
    }

    pub(crate) fn write_params(&self, out: &mut Vec<T>) {
        out.extend_from_slice(self.m.as_slice());
        out.extend_from_slice(&self.b);
    }

    pub(crate) fn read_params(&mut self, src: &[T]) {
        let dim = self.dim();
        let d2 = dim * dim;
        self.m.as_mut_slice().copy_from_slice(&src[..d2]);
        self.b.copy_from_slice(&src[d2..d2 + dim]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_exact() {
        let a = AffineTransform::<f64>::identity(3);
        assert!(a.is_identity());
        let x = [0.1, -2.5, 1e-300];
        assert_eq!(a.apply(&x), x.to_vec());
    }

    #[test]
    fn params_round_trip() {
        let mut a = AffineTransform::<f64>::identity(2);
        let src = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        a.read_params(&src);
        assert_eq!(a.apply(&[1.0, 1.0]), vec![8.0, 13.0]);
        let mut out = Vec::new();
        a.write_params(&mut out);
        assert_eq!(out, src.to_vec());
    }
}
