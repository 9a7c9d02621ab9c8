use std::collections::BTreeMap;

use rayon::prelude::*;

use super::affine::AffineTransform;
use super::critic::CriticNet;
use super::model::{CriticKey, LossMode, WdnModel};
use super::WdnError;
use crate::linalg::Matrix;
use crate::scalar::{dot, softplus_and_logistic, Scalar};

/// Raw (untransformed) samples for one critic: `xs` from `(t, d_i)`, `ys`
/// from `(t, d_j)`, and the interpolation weights for the penalty points.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyBatch<T> {
    pub xs: Vec<Vec<T>>,
    pub ys: Vec<Vec<T>>,
    pub eps: Vec<T>,
}

pub type Minibatches<T> = BTreeMap<CriticKey, KeyBatch<T>>;

/// One critic's contribution before weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyTerm<T> {
    pub key: CriticKey,
    pub weight: T,
    pub critic_loss: T,
    pub penalty: T,
}

impl<T: Scalar> KeyTerm<T> {
    /// `critic_loss − penalty`, the quantity the critic ascends.
    pub fn value(&self) -> T {
        self.critic_loss - self.penalty
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<T> {
    /// Weighted sum of the per-critic values.
    pub total: T,
    /// Identity regularizer value, zero unless enabled in training.
    pub regularizer: T,
    pub terms: Vec<KeyTerm<T>>,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn term(&self, key: &CriticKey) -> Option<&KeyTerm<T>> {
        self.terms.iter().find(|t| &t.key == key)
    }
}

/// Which parameter groups [`backward`] should differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientSet {
    Transforms,
    Critics,
    Both,
}

impl GradientSet {
    fn transforms(self) -> bool {
        matches!(self, GradientSet::Transforms | GradientSet::Both)
    }

    fn critics(self) -> bool {
        matches!(self, GradientSet::Critics | GradientSet::Both)
    }
}

/// Gradients of the loss in the flat layouts of [`WdnModel::theta_t`] and
/// [`WdnModel::theta_w`]. A group that was not requested is left empty.
#[derive(Debug, Clone, PartialEq)]
pub struct WdnGradients<T> {
    pub theta_t: Vec<T>,
    pub theta_w: Vec<T>,
}

struct KeyOutput<T> {
    term: KeyTerm<T>,
    grad_w: Vec<T>,
    /// Gradient block for the `d_i` transform (absent in anchored mode).
    grad_ti: Option<Vec<T>>,
    grad_tj: Option<Vec<T>>,
}

/// Borrowed rows of one critic's minibatch.
pub(crate) struct BatchView<'a, T> {
    pub xs: Vec<&'a [T]>,
    pub ys: Vec<&'a [T]>,
    pub eps: &'a [T],
}

impl<'a, T> BatchView<'a, T> {
    pub fn of(batch: &'a KeyBatch<T>) -> Self {
        Self {
            xs: batch.xs.iter().map(Vec::as_slice).collect(),
            ys: batch.ys.iter().map(Vec::as_slice).collect(),
            eps: &batch.eps,
        }
    }
}

fn check_batch<T: Scalar>(batch: &BatchView<'_, T>, dim: usize) -> Result<(), WdnError> {
    if batch.xs.len() != batch.ys.len() {
        return Err(WdnError::SizeMismatch(batch.xs.len(), batch.ys.len()));
    }
    if batch.eps.len() != batch.xs.len() {
        return Err(WdnError::SizeMismatch(batch.xs.len(), batch.eps.len()));
    }
    if batch.xs.is_empty() {
        return Err(WdnError::EmptyBatch);
    }
    for v in batch.xs.iter().chain(&batch.ys) {
        if v.len() != dim {
            return Err(WdnError::DimensionMismatch { expected: dim, got: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(WdnError::NonFiniteInput);
        }
    }
    Ok(())
}

/// `W1 M` and `W1 b + b1`: the critic's pre-activation as a function of the
/// raw sample. Without a transform the sample is fed in as is.
fn hidden_map<T: Scalar>(critic: &CriticNet<T>, a: Option<&AffineTransform<T>>) -> (Matrix<T>, Vec<T>) {
    match a {
        Some(a) => {
            let p = critic.w1.matmul(&a.m);
            let c = critic.w1.mul_vec(&a.b).iter().zip(&critic.b1).map(|(&u, &v)| u + v).collect();
            (p, c)
        }
        None => (critic.w1.clone(), critic.b1.clone()),
    }
}

/// Adds `Σ_h W1[h, ·]ᵀ acc[h]` (and the bias part) into a transform block.
fn expand_transform_grad<T: Scalar>(w1: &Matrix<T>, acc: &[Vec<T>], bias: &[T], block: &mut [T]) {
    let d = w1.cols();
    for (h, (row_acc, &bh)) in acc.iter().zip(bias).enumerate() {
        let w = w1.row(h);
        for (a, &wa) in w.iter().enumerate() {
            for (o, &v) in block[a * d..(a + 1) * d].iter_mut().zip(row_acc) {
                *o += wa * v;
            }
            block[d * d + a] += wa * bh;
        }
    }
}

/// Forward and backward pass for one critic.
///
/// The critic only sees a point through `u = W1 z + b1`, which is affine in
/// the raw sample and in the interpolation weight, so the pass runs in the
/// `h`-dimensional hidden space. Every per-sample gradient with respect to a
/// transformed point lies in the row space of `W1`; the pass accumulates the
/// `h` coefficient-weighted sums of raw samples and expands them once at the
/// end. The same sums give the `W1` gradient of the critic.
#[allow(clippy::too_many_arguments)]
fn key_pass<T: Scalar>(
    key: &CriticKey,
    critic: &CriticNet<T>,
    a_i: Option<&AffineTransform<T>>,
    a_j: &AffineTransform<T>,
    batch: &BatchView<'_, T>,
    weight: T,
    gamma: T,
    set: Option<GradientSet>,
) -> KeyOutput<T> {
    let dim = a_j.dim();
    let h = critic.hidden();
    let n = batch.xs.len();
    let c = weight / T::of_usize(n);
    let want_w = set.is_some_and(|s| s.critics());
    let want_t = set.is_some_and(|s| s.transforms());
    let two = T::of(2.0);

    let (p_i, c_i) = hidden_map(critic, a_i);
    let (p_j, c_j) = hidden_map(critic, Some(a_j));
    let gram = critic.w1.matmul(&critic.w1.transpose());

    let mut ux = vec![T::zero(); h];
    let mut uy = vec![T::zero(); h];
    let mut s_j = vec![T::zero(); h];
    let mut sig_j = vec![T::zero(); h];
    let mut beta_x = vec![T::zero(); h];
    let mut beta_y = vec![T::zero(); h];
    // Σ_k β_x[k, h] x_k and Σ_k β_x[k, h], same for the y side.
    let mut acc_x = vec![vec![T::zero(); dim]; h];
    let mut acc_y = vec![vec![T::zero(); dim]; h];
    let mut bias_x = vec![T::zero(); h];
    let mut bias_y = vec![T::zero(); h];
    // Σ_k coef_k s_k s_kᵀ from the penalty's dependence on W1 through ∇f.
    let mut outer = Matrix::zeros(h, h);
    let mut dw2 = vec![T::zero(); h];

    let mut sum_x = T::zero();
    let mut sum_y = T::zero();
    let mut sum_pen = T::zero();

    for k in 0..n {
        let (x, y, e) = (batch.xs[k], batch.ys[k], batch.eps[k]);
        let f = T::one() - e;
        let mut fx = critic.b2;
        let mut fy = critic.b2;
        for m in 0..h {
            ux[m] = dot(p_i.row(m), x) + c_i[m];
            uy[m] = dot(p_j.row(m), y) + c_j[m];
            let uj = e * ux[m] + f * uy[m];
            let (spx, sgx) = softplus_and_logistic(ux[m]);
            let (spy, sgy) = softplus_and_logistic(uy[m]);
            let (_, sgj) = softplus_and_logistic(uj);
            fx += critic.w2[m] * spx;
            fy += critic.w2[m] * spy;
            sig_j[m] = sgj;
            s_j[m] = critic.w2[m] * sgj;
            beta_x[m] = c * critic.w2[m] * sgx;
            beta_y[m] = -c * critic.w2[m] * sgy;
            dw2[m] += c * spx - c * spy;
        }
        sum_x += fx;
        sum_y += fy;

        // ‖∇f(J)‖² = sᵀ (W1 W1ᵀ) s
        let mut g2 = T::zero();
        for a in 0..h {
            g2 += s_j[a] * dot(gram.row(a), &s_j);
        }
        let gnorm = g2.max(T::zero()).sqrt();
        if gnorm > T::one() {
            sum_pen += gamma * (gnorm - T::one()) * (gnorm - T::one());
            if set.is_some() {
                // Penalty enters the loss with weight −c.
                let coef = -c * two * gamma * (gnorm - T::one()) / gnorm;
                for a in 0..h {
                    let r = coef * dot(gram.row(a), &s_j);
                    let q = r * critic.w2[a] * sig_j[a] * (T::one() - sig_j[a]);
                    dw2[a] += r * sig_j[a];
                    beta_x[a] += e * q;
                    beta_y[a] += f * q;
                    for b in 0..h {
                        outer[(a, b)] += coef * s_j[a] * s_j[b];
                    }
                }
            }
        }

        if set.is_some() {
            for m in 0..h {
                let (bx, by) = (beta_x[m], beta_y[m]);
                for (o, &v) in acc_x[m].iter_mut().zip(x) {
                    *o += bx * v;
                }
                for (o, &v) in acc_y[m].iter_mut().zip(y) {
                    *o += by * v;
                }
                bias_x[m] += bx;
                bias_y[m] += by;
            }
        }
    }

    let mut grad_w = Vec::new();
    if want_w {
        grad_w = vec![T::zero(); CriticNet::<T>::param_count(h, dim)];
        let ow1 = outer.matmul(&critic.w1);
        for m in 0..h {
            // Σ β x'ᵀ with x' = M x + b, mapped back from the raw sums.
            let from_x = match a_i {
                Some(a) => a.m.mul_vec(&acc_x[m]),
                None => acc_x[m].clone(),
            };
            let from_y = a_j.m.mul_vec(&acc_y[m]);
            let bi = a_i.map(|a| a.b.as_slice());
            for col in 0..dim {
                let mut v = from_x[col] + from_y[col] + a_j.b[col] * bias_y[m] + ow1[(m, col)];
                if let Some(bi) = bi {
                    v += bi[col] * bias_x[m];
                }
                grad_w[m * dim + col] = v;
            }
            grad_w[h * dim + m] = bias_x[m] + bias_y[m];
            grad_w[h * dim + h + m] = dw2[m];
        }
        // ∂/∂b2 is c − c per sample: exactly zero.
    }

    let block = AffineTransform::<T>::param_count(dim);
    let mut grad_ti = None;
    let mut grad_tj = None;
    if want_t {
        if a_i.is_some() {
            let mut g = vec![T::zero(); block];
            expand_transform_grad(&critic.w1, &acc_x, &bias_x, &mut g);
            grad_ti = Some(g);
        }
        let mut g = vec![T::zero(); block];
        expand_transform_grad(&critic.w1, &acc_y, &bias_y, &mut g);
        grad_tj = Some(g);
    }

    let nf = T::of_usize(n);
    KeyOutput {
        term: KeyTerm { key: key.clone(), weight, critic_loss: sum_x / nf - sum_y / nf, penalty: sum_pen / nf },
        grad_w,
        grad_ti,
        grad_tj,
    }
}

fn run_passes<T: Scalar>(
    model: &WdnModel<T>,
    batches: &BTreeMap<CriticKey, BatchView<'_, T>>,
    gamma: T,
    set: Option<GradientSet>,
) -> Result<Vec<KeyOutput<T>>, WdnError> {
    let weights = model.term_weights();
    let mut jobs = Vec::with_capacity(model.critics.len());
    for (key, critic) in &model.critics {
        let batch = batches.get(key).ok_or_else(|| WdnError::MissingBatch(key.to_string()))?;
        check_batch(batch, model.dim)?;
        let a_i = match model.loss_mode {
            LossMode::Pairwise => Some(model.transform(&key.d_i)?),
            LossMode::Anchored => None,
        };
        let a_j = model.transform(&key.d_j)?;
        jobs.push((key, critic, a_i, a_j, batch, weights[key]));
    }
    // Collecting an indexed parallel iterator keeps key order, so the
    // reductions below are bit-stable regardless of thread count.
    Ok(jobs
        .into_par_iter()
        .map(|(key, critic, a_i, a_j, batch, w)| key_pass(key, critic, a_i, a_j, batch, w, gamma, set))
        .collect())
}

fn views<T>(batches: &Minibatches<T>) -> BTreeMap<CriticKey, BatchView<'_, T>> {
    batches.iter().map(|(k, b)| (k.clone(), BatchView::of(b))).collect()
}

fn total_of<T: Scalar>(outs: &[KeyOutput<T>]) -> T {
    outs.iter().fold(T::zero(), |acc, o| acc + o.term.weight * o.term.value())
}

/// Weighted average over replicated treatments and their domain pairs of
/// `critic_loss − penalty`.
pub fn wdn_loss<T: Scalar>(
    model: &WdnModel<T>,
    batches: &Minibatches<T>,
    gamma: T,
) -> Result<LossBreakdown<T>, WdnError> {
    let outs = run_passes(model, &views(batches), gamma, None)?;
    Ok(LossBreakdown { total: total_of(&outs), regularizer: T::zero(), terms: outs.into_iter().map(|o| o.term).collect() })
}

/// Loss and exact analytic gradients of [`wdn_loss`].
pub fn backward<T: Scalar>(
    model: &WdnModel<T>,
    batches: &Minibatches<T>,
    gamma: T,
    set: GradientSet,
) -> Result<(LossBreakdown<T>, WdnGradients<T>), WdnError> {
    backward_views(model, &views(batches), gamma, set)
}

pub(crate) fn backward_views<T: Scalar>(
    model: &WdnModel<T>,
    batches: &BTreeMap<CriticKey, BatchView<'_, T>>,
    gamma: T,
    set: GradientSet,
) -> Result<(LossBreakdown<T>, WdnGradients<T>), WdnError> {
    let outs = run_passes(model, batches, gamma, Some(set))?;
    let total = total_of(&outs);

    let mut theta_t = if set.transforms() { vec![T::zero(); model.theta_t_len()] } else { Vec::new() };
    let mut theta_w = if set.critics() { Vec::with_capacity(model.theta_w_len()) } else { Vec::new() };
    let offsets = model.transform_offsets();
    let block = AffineTransform::<T>::param_count(model.dim);
    let mut terms = Vec::with_capacity(outs.len());
    for o in outs {
        if set.critics() {
            theta_w.extend_from_slice(&o.grad_w);
        }
        if let Some(g) = &o.grad_ti {
            let off = offsets[&o.term.key.d_i];
            for (t, &v) in theta_t[off..off + block].iter_mut().zip(g) {
                *t += v;
            }
        }
        if let Some(g) = &o.grad_tj {
            let off = offsets[&o.term.key.d_j];
            for (t, &v) in theta_t[off..off + block].iter_mut().zip(g) {
                *t += v;
            }
        }
        terms.push(o.term);
    }

    if let Some(i) = theta_t.iter().position(|v| !v.is_finite()) {
        return Err(WdnError::NonFiniteGradient { path: model.theta_t_path(i) });
    }
    if let Some(i) = theta_w.iter().position(|v| !v.is_finite()) {
        return Err(WdnError::NonFiniteGradient { path: model.theta_w_path(i) });
    }
    Ok((LossBreakdown { total, regularizer: T::zero(), terms }, WdnGradients { theta_t, theta_w }))
}

/// `λ Σ_d (‖M_d − I‖² + ‖b_d‖²)`; adds its gradient into `grad` when given.
pub(crate) fn identity_regularizer<T: Scalar>(model: &WdnModel<T>, lambda: T, grad: Option<&mut [T]>) -> T {
    if lambda == T::zero() {
        return T::zero();
    }
    let theta = model.theta_t();
    let block = AffineTransform::<T>::param_count(model.dim);
    let dim = model.dim;
    let mut value = T::zero();
    let mut deltas = vec![T::zero(); theta.len()];
    for (i, &p) in theta.iter().enumerate() {
        let r = i % block;
        let target = if r < dim * dim && r / dim == r % dim { T::one() } else { T::zero() };
        let d = p - target;
        value += d * d;
        deltas[i] = d;
    }
    if let Some(g) = grad {
        let two = T::of(2.0);
        for (o, d) in g.iter_mut().zip(deltas) {
            *o += two * lambda * d;
        }
    }
    lambda * value
}
