use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::affine::AffineTransform;
use super::critic::CriticNet;
use super::WdnError;
use crate::data::EmbeddingTable;
use crate::scalar::Scalar;

/// How the two sides of each critic are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Transformed domain `i` against transformed domain `j`, unordered pairs.
    #[default]
    Pairwise,
    /// Raw domain `i` against transformed domain `j`, ordered pairs `i ≠ j`.
    Anchored,
}

/// Identifies one critic: a treatment and the two domains it compares.
///
/// In pairwise mode `d_i < d_j`; in anchored mode both orders exist and the
/// `d_i` side is left untransformed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CriticKey {
    pub treatment: String,
    pub d_i: String,
    pub d_j: String,
}

impl fmt::Display for CriticKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}|{}", self.treatment, self.d_i, self.d_j)
    }
}

impl CriticKey {
    pub fn new(treatment: impl Into<String>, d_i: impl Into<String>, d_j: impl Into<String>) -> Self {
        Self { treatment: treatment.into(), d_i: d_i.into(), d_j: d_j.into() }
    }
}

/// Per-domain affine transforms plus one critic per [`CriticKey`].
#[derive(Debug, Clone, PartialEq)]
pub struct WdnModel<T> {
    pub dim: usize,
    pub loss_mode: LossMode,
    pub transforms: BTreeMap<String, AffineTransform<T>>,
    pub critics: BTreeMap<CriticKey, CriticNet<T>>,
}

/// Critic keys for the treatments observed in two or more domains.
pub(crate) fn critic_keys<T: Scalar>(table: &EmbeddingTable<T>, mode: LossMode) -> Vec<CriticKey> {
    let mut keys = Vec::new();
    for (t, domains) in table.replicated_treatments() {
        for (a, di) in domains.iter().enumerate() {
            for (b, dj) in domains.iter().enumerate() {
                let keep = match mode {
                    LossMode::Pairwise => a < b,
                    LossMode::Anchored => a != b,
                };
                if keep {
                    keys.push(CriticKey::new(t.clone(), di.clone(), dj.clone()));
                }
            }
        }
    }
    keys.sort();
    keys
}

impl<T: Scalar> WdnModel<T> {
    /// Identity transforms for every domain in `table` and freshly
    /// initialized critics (drawn in sorted key order) for every replicated
    /// treatment.
    pub fn new<R: Rng + ?Sized>(table: &EmbeddingTable<T>, hidden: usize, mode: LossMode, rng: &mut R) -> Self {
        let dim = table.dim();
        let transforms = table.domains().into_iter().map(|d| (d, AffineTransform::identity(dim))).collect();
        let critics = critic_keys(table, mode)
            .into_iter()
            .map(|k| (k, CriticNet::random(hidden, dim, rng)))
            .collect();
        Self { dim, loss_mode: mode, transforms, critics }
    }

    pub fn transform(&self, domain: &str) -> Result<&AffineTransform<T>, WdnError> {
        self.transforms.get(domain).ok_or_else(|| WdnError::UnknownDomain(domain.to_string()))
    }

    pub fn hidden(&self) -> usize {
        self.critics.values().next().map_or(0, |c| c.hidden())
    }

    /// Normalizing weight of each critic term: `1 / (|T'| · #pairs(t))`.
    pub fn term_weights(&self) -> BTreeMap<CriticKey, T> {
        let mut per_treatment: BTreeMap<&str, usize> = BTreeMap::new();
        for k in self.critics.keys() {
            *per_treatment.entry(&k.treatment).or_default() += 1;
        }
        let n_t = T::of_usize(per_treatment.len());
        self.critics
            .keys()
            .map(|k| (k.clone(), T::one() / (n_t * T::of_usize(per_treatment[k.treatment.as_str()]))))
            .collect()
    }

    pub fn theta_t_len(&self) -> usize {
        self.transforms.len() * AffineTransform::<T>::param_count(self.dim)
    }

    pub fn theta_w_len(&self) -> usize {
        self.critics.values().map(|c| CriticNet::<T>::param_count(c.hidden(), c.dim())).sum()
    }

    /// Offset of each domain's block in the flat transform parameters.
    pub(crate) fn transform_offsets(&self) -> BTreeMap<String, usize> {
        let block = AffineTransform::<T>::param_count(self.dim);
        self.transforms.keys().enumerate().map(|(i, d)| (d.clone(), i * block)).collect()
    }

    /// Transform parameters: per domain in sorted order, `M` row-major then `b`.
    pub fn theta_t(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.theta_t_len());
        for t in self.transforms.values() {
            t.write_params(&mut out);
        }
        out
    }

    pub fn set_theta_t(&mut self, src: &[T]) -> Result<(), WdnError> {
        if src.len() != self.theta_t_len() {
            return Err(WdnError::ShapeMismatch { expected: self.theta_t_len(), got: src.len() });
        }
        let block = AffineTransform::<T>::param_count(self.dim);
        for (t, chunk) in self.transforms.values_mut().zip(src.chunks(block)) {
            t.read_params(chunk);
        }
        Ok(())
    }

    /// Critic parameters: per key in sorted order, `W1` row-major, `b1`, `w2`, `b2`.
    pub fn theta_w(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.theta_w_len());
        for c in self.critics.values() {
            c.write_params(&mut out);
        }
        out
    }

    pub fn set_theta_w(&mut self, src: &[T]) -> Result<(), WdnError> {
        if src.len() != self.theta_w_len() {
            return Err(WdnError::ShapeMismatch { expected: self.theta_w_len(), got: src.len() });
        }
        let mut off = 0;
        for c in self.critics.values_mut() {
            let n = CriticNet::<T>::param_count(c.hidden(), c.dim());
            c.read_params(&src[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Human-readable location of flat transform parameter `idx`.
    pub(crate) fn theta_t_path(&self, idx: usize) -> String {
        let block = AffineTransform::<T>::param_count(self.dim);
        let domain = self.transforms.keys().nth(idx / block).cloned().unwrap_or_default();
        let r = idx % block;
        let d2 = self.dim * self.dim;
        if r < d2 {
            format!("transforms[{domain}].M[{},{}]", r / self.dim, r % self.dim)
        } else {
            format!("transforms[{domain}].b[{}]", r - d2)
        }
    }

    /// Human-readable location of flat critic parameter `idx`.
    pub(crate) fn theta_w_path(&self, idx: usize) -> String {
        let mut off = 0;
        for (k, c) in &self.critics {
            let (h, d) = (c.hidden(), c.dim());
            let n = CriticNet::<T>::param_count(h, d);
            if idx < off + n {
                let r = idx - off;
                return if r < h * d {
                    format!("critics[{k}].W1[{},{}]", r / d, r % d)
                } else if r < h * d + h {
                    format!("critics[{k}].b1[{}]", r - h * d)
                } else if r < h * d + 2 * h {
                    format!("critics[{k}].w2[{}]", r - h * d - h)
                } else {
                    format!("critics[{k}].b2")
                };
            }
            off += n;
        }
        format!("critics[?][{idx}]")
    }

    /// Maps each row by its domain's transform; metadata untouched.
    pub fn apply(&self, table: &EmbeddingTable<T>) -> Result<EmbeddingTable<T>, WdnError> {
        if table.dim() != self.dim {
            return Err(WdnError::DimensionMismatch { expected: self.dim, got: table.dim() });
        }
        for d in table.domains() {
            self.transform(&d)?;
        }
        Ok(table
            .map_vectors(self.dim, |r| self.transforms[&r.domain].apply(&r.vector))
            .expect("affine maps preserve dimension"))
    }
}
