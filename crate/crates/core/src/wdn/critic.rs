use rand::Rng;
use serde::{Deserialize, Serialize};

use super::WdnError;
use crate::linalg::Matrix;
use crate::scalar::{softplus, softplus_and_logistic, Scalar};

/// Two-layer critic `f(z) = w2 · softplus(W1 z + b1) + b2`.
///
/// Its input gradient is `∇_z f = W1ᵀ (w2 ⊙ σ(W1 z + b1))` with `σ` the
/// logistic function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CriticNet<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: T,
}

/// Per-point intermediate values reused by forward and backward passes.
#[derive(Debug, Clone)]
pub(crate) struct Activations<T> {
    pub pre: Vec<T>,
    pub softplus: Vec<T>,
    pub sig: Vec<T>,
    /// `w2 ⊙ σ(pre)`
    pub weighted_sig: Vec<T>,
    /// `∇_z f`
    pub grad: Vec<T>,
}

impl<T: Scalar> Activations<T> {
    pub fn new(hidden: usize, dim: usize) -> Self {
        Self {
            pre: vec![T::zero(); hidden],
            softplus: vec![T::zero(); hidden],
            sig: vec![T::zero(); hidden],
            weighted_sig: vec![T::zero(); hidden],
            grad: vec![T::zero(); dim],
        }
    }
}

impl<T: Scalar> CriticNet<T> {
    pub fn zeros(hidden: usize, dim: usize) -> Self {
        Self { w1: Matrix::zeros(hidden, dim), b1: vec![T::zero(); hidden], w2: vec![T::zero(); hidden], b2: T::zero() }
    }

    /// Uniform fan-in initialization, `b2 = 0`.
    pub fn random<R: Rng + ?Sized>(hidden: usize, dim: usize, rng: &mut R) -> Self {
        let a = 1.0 / (dim as f64).sqrt();
        let c = 1.0 / (hidden as f64).sqrt();
        let mut net = Self::zeros(hidden, dim);
        for v in net.w1.as_mut_slice() {
            *v = T::of(rng.random_range(-a..a));
        }
        for v in &mut net.b1 {
            *v = T::of(rng.random_range(-a..a));
        }
        for v in &mut net.w2 {
            *v = T::of(rng.random_range(-c..c));
        }
        net
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn dim(&self) -> usize {
        self.w1.cols()
    }

    /// Checked evaluation.
    pub fn forward(&self, z: &[T]) -> Result<T, WdnError> {
        if z.len() != self.dim() {
            return Err(WdnError::DimensionMismatch { expected: self.dim(), got: z.len() });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(WdnError::NonFiniteInput);
        }
        Ok(self.eval(z))
    }

    pub(crate) fn eval(&self, z: &[T]) -> T {
        let mut out = self.b2;
        for k in 0..self.hidden() {
            let u = crate::scalar::dot(self.w1.row(k), z) + self.b1[k];
            out += self.w2[k] * softplus(u);
        }
        out
    }

    /// `∇_z f(z)`.
    pub fn input_gradient(&self, z: &[T]) -> Vec<T> {
        let mut act = Activations::new(self.hidden(), self.dim());
        self.activate(z, &mut act);
        act.grad
    }

    /// Fills `act` for point `z` and returns `f(z)`.
    pub(crate) fn activate(&self, z: &[T], act: &mut Activations<T>) -> T {
        let mut out = self.b2;
        act.grad.iter_mut().for_each(|g| *g = T::zero());
        for k in 0..self.hidden() {
            let row = self.w1.row(k);
            let u = crate::scalar::dot(row, z) + self.b1[k];
            let (sp, sig) = softplus_and_logistic(u);
            act.pre[k] = u;
            act.softplus[k] = sp;
            act.sig[k] = sig;
            out += self.w2[k] * sp;
            let s = self.w2[k] * sig;
            act.weighted_sig[k] = s;
            for (g, &w) in act.grad.iter_mut().zip(row) {
                *g += w * s;
            }
        }
        out
    }

    pub(crate) fn param_count(hidden: usize, dim: usize) -> usize {
        hidden * dim + 2 * hidden + 1
    }

    pub(crate) fn write_params(&self, out: &mut Vec<T>) {
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.push(self.b2);
    }

    pub(crate) fn read_params(&mut self, src: &[T]) {
        let (h, d) = (self.hidden(), self.dim());
        self.w1.as_mut_slice().copy_from_slice(&src[..h * d]);
        self.b1.copy_from_slice(&src[h * d..h * d + h]);
        self.w2.copy_from_slice(&src[h * d + h..h * d + 2 * h]);
        self.b2 = src[h * d + 2 * h];
    }

    /// Accumulates `weight · ∂f(z)/∂θ` into `grad` (flat, same layout as
    /// `write_params`) and `weight · ∇_z f` into `dz`. `act` must come from
    /// `activate(z)`.
    #[cfg(test)]
    pub(crate) fn backprop_value(&self, z: &[T], act: &Activations<T>, weight: T, grad: &mut [T], dz: Option<&mut [T]>) {
        let (h, d) = (self.hidden(), self.dim());
        for k in 0..h {
            let s = weight * act.weighted_sig[k];
            for (g, &zv) in grad[k * d..(k + 1) * d].iter_mut().zip(z) {
                *g += s * zv;
            }
            grad[h * d + k] += s;
            grad[h * d + h + k] += weight * act.softplus[k];
        }
        grad[h * d + 2 * h] += weight;
        if let Some(dz) = dz {
            for (o, &g) in dz.iter_mut().zip(&act.grad) {
                *o += weight * g;
            }
        }
    }

    /// One-sided penalty `γ (‖∇_z f‖ − 1)²` if the norm exceeds 1, else 0.
    pub(crate) fn penalty_at(act: &Activations<T>, gamma: T) -> T {
        let g = crate::scalar::norm(&act.grad);
        if g > T::one() {
            gamma * (g - T::one()) * (g - T::one())
        } else {
            T::zero()
        }
    }

    /// Accumulates `weight · ∂H(z)/∂θ` and `weight · ∂H(z)/∂z` where `H` is
    /// the one-sided penalty. Returns `H(z)`.
    #[cfg(test)]
    pub(crate) fn backprop_penalty(
        &self,
        z: &[T],
        act: &Activations<T>,
        gamma: T,
        weight: T,
        grad: &mut [T],
        dz: Option<&mut [T]>,
        scratch: &mut Vec<T>,
    ) -> T {
        let gnorm = crate::scalar::norm(&act.grad);
        if !(gnorm > T::one()) {
            return T::zero();
        }
        let (h, d) = (self.hidden(), self.dim());
        let two = T::of(2.0);
        let coef = weight * two * gamma * (gnorm - T::one()) / gnorm;
        // v = coef · ∇_z f ; r = W1 v ; q_k = r_k w2_k σ'(u_k)
        scratch.clear();
        scratch.extend(act.grad.iter().map(|&g| coef * g));
        let v = &scratch[..];
        let mut q = vec![T::zero(); h];
        for k in 0..h {
            let r = crate::scalar::dot(self.w1.row(k), v);
            let sig = act.sig[k];
            q[k] = r * self.w2[k] * sig * (T::one() - sig);
            // ∂/∂w2_k
            grad[h * d + h + k] += r * sig;
            // ∂/∂b1_k
            grad[h * d + k] += q[k];
            // ∂/∂W1[k, a] = s_k v_a + q_k z_a
            let s = act.weighted_sig[k];
            for ((g, &va), &za) in grad[k * d..(k + 1) * d].iter_mut().zip(v).zip(z) {
                *g += s * va + q[k] * za;
            }
        }
        if let Some(dz) = dz {
            for k in 0..h {
                for (o, &w) in dz.iter_mut().zip(self.w1.row(k)) {
                    *o += q[k] * w;
                }
            }
        }
        gamma * (gnorm - T::one()) * (gnorm - T::one())
    }
}

/// Sample critic loss: mean of `f` over `xs` minus mean over `ys`.
pub fn critic_loss<T: Scalar>(critic: &CriticNet<T>, xs: &[Vec<T>], ys: &[Vec<T>]) -> Result<T, WdnError> {
    if xs.len() != ys.len() {
        return Err(WdnError::SizeMismatch(xs.len(), ys.len()));
    }
    if xs.is_empty() {
        return Err(WdnError::EmptyBatch);
    }
    let n = T::of_usize(xs.len());
    let mut sx = T::zero();
    let mut sy = T::zero();
    for (x, y) in xs.iter().zip(ys) {
        sx += critic.forward(x)?;
        sy += critic.forward(y)?;
    }
    Ok(sx / n - sy / n)
}

/// Interpolates `ε_k xs[k] + (1 − ε_k) ys[k]` with the given `ε`.
pub fn interpolate_with<T: Scalar>(xs: &[Vec<T>], ys: &[Vec<T>], eps: &[T]) -> Result<Vec<Vec<T>>, WdnError> {
    if xs.len() != ys.len() {
        return Err(WdnError::SizeMismatch(xs.len(), ys.len()));
    }
    if eps.len() != xs.len() {
        return Err(WdnError::SizeMismatch(xs.len(), eps.len()));
    }
    Ok(xs
        .iter()
        .zip(ys)
        .zip(eps)
        .map(|((x, y), &e)| x.iter().zip(y).map(|(&a, &b)| e * a + (T::one() - e) * b).collect())
        .collect())
}

/// Interpolates with `ε ~ U[0, 1]` drawn independently per pair.
pub fn interpolate<T: Scalar, R: Rng + ?Sized>(
    xs: &[Vec<T>],
    ys: &[Vec<T>],
    rng: &mut R,
) -> Result<Vec<Vec<T>>, WdnError> {
    let eps: Vec<T> = (0..xs.len()).map(|_| T::of(rng.random::<f64>())).collect();
    interpolate_with(xs, ys, &eps)
}

/// Mean one-sided gradient penalty over the points `j`.
pub fn gradient_penalty<T: Scalar>(critic: &CriticNet<T>, j: &[Vec<T>], gamma: T) -> Result<T, WdnError> {
    if j.is_empty() {
        return Err(WdnError::EmptyBatch);
    }
    let mut act = Activations::new(critic.hidden(), critic.dim());
    let mut total = T::zero();
    for z in j {
        critic.forward(z)?;
        critic.activate(z, &mut act);
        total += CriticNet::penalty_at(&act, gamma);
    }
    Ok(total / T::of_usize(j.len()))
}
