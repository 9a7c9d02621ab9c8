use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::affine::AffineTransform;
use super::critic::CriticNet;
use super::model::{CriticKey, LossMode, WdnModel};
use super::WdnError;
use crate::coral::CoralTransform;
use crate::data::EmbeddingTable;
use crate::linalg::Matrix;
use crate::preprocess::{PcaReducer, PercentileScaler, TvnTransform};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Hex SHA-256 of the JSON serialization of `config`.
pub fn config_fingerprint<C: Serialize + ?Sized>(config: &C) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DomainParams<T> {
    pub id: String,
    /// Row-major.
    #[serde(rename = "M")]
    pub m: Vec<T>,
    pub b: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CriticParams<T> {
    pub treatment: String,
    pub d_i: String,
    pub d_j: String,
    /// Row-major, `hidden × dim`.
    #[serde(rename = "W1")]
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct WdnParams<T> {
    pub domains: Vec<DomainParams<T>>,
    pub critics: Vec<CriticParams<T>>,
    #[serde(default)]
    pub loss_mode: LossMode,
}

/// The fitted object a checkpoint carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", bound = "T: Scalar")]
pub enum Payload<T> {
    Wdn(WdnParams<T>),
    Coral(CoralTransform<T>),
    Tvn(TvnTransform<T>),
    Percentile(PercentileScaler<T>),
    Pca(PcaReducer<T>),
}

/// Immutable snapshot of a fitted transform, serialized as JSON with
/// round-trip exact numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub version: u32,
    pub step: usize,
    pub dim: usize,
    #[serde(flatten)]
    pub payload: Payload<T>,
    pub config_fingerprint: String,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(step: usize, dim: usize, payload: Payload<T>, config_fingerprint: impl Into<String>) -> Self {
        Self { version: CHECKPOINT_VERSION, step, dim, payload, config_fingerprint: config_fingerprint.into() }
    }

    pub fn from_model(model: &WdnModel<T>, step: usize, config_fingerprint: impl Into<String>) -> Self {
        let domains = model
            .transforms
            .iter()
            .map(|(id, t)| DomainParams { id: id.clone(), m: t.m.as_slice().to_vec(), b: t.b.clone() })
            .collect();
        let critics = model
            .critics
            .iter()
            .map(|(k, c)| CriticParams {
                treatment: k.treatment.clone(),
                d_i: k.d_i.clone(),
                d_j: k.d_j.clone(),
                w1: c.w1.as_slice().to_vec(),
                b1: c.b1.clone(),
                w2: c.w2.clone(),
                b2: c.b2,
            })
            .collect();
        Self::new(step, model.dim, Payload::Wdn(WdnParams { domains, critics, loss_mode: model.loss_mode }), config_fingerprint)
    }

    pub fn kind(&self) -> &'static str {
        match self.payload {
            Payload::Wdn(_) => "wdn",
            Payload::Coral(_) => "coral",
            Payload::Tvn(_) => "tvn",
            Payload::Percentile(_) => "percentile",
            Payload::Pca(_) => "pca",
        }
    }

    /// Rebuilds the WDN model, validating every shape.
    pub fn to_model(&self) -> Result<WdnModel<T>, WdnError> {
        let Payload::Wdn(p) = &self.payload else {
            return Err(WdnError::Checkpoint(format!("expected a wdn checkpoint, found {}", self.kind())));
        };
        let dim = self.dim;
        let bad = |what: String| WdnError::Checkpoint(what);
        let mut transforms = BTreeMap::new();
        for d in &p.domains {
            if d.m.len() != dim * dim || d.b.len() != dim {
                return Err(bad(format!("domain {:?} has wrong shape", d.id)));
            }
            let t = AffineTransform { m: Matrix::from_row_major(dim, dim, d.m.clone()), b: d.b.clone() };
            if transforms.insert(d.id.clone(), t).is_some() {
                return Err(bad(format!("duplicate domain {:?}", d.id)));
            }
        }
        let mut critics = BTreeMap::new();
        for c in &p.critics {
            let h = c.b1.len();
            if h == 0 || c.w2.len() != h || c.w1.len() != h * dim {
                return Err(bad(format!("critic {}|{}|{} has wrong shape", c.treatment, c.d_i, c.d_j)));
            }
            let key = CriticKey::new(c.treatment.clone(), c.d_i.clone(), c.d_j.clone());
            for d in [&key.d_i, &key.d_j] {
                if !transforms.contains_key(d) {
                    return Err(WdnError::UnknownDomain(d.clone()));
                }
            }
            let net = CriticNet { w1: Matrix::from_row_major(h, dim, c.w1.clone()), b1: c.b1.clone(), w2: c.w2.clone(), b2: c.b2 };
            if critics.insert(key, net).is_some() {
                return Err(bad(format!("duplicate critic {}|{}|{}", c.treatment, c.d_i, c.d_j)));
            }
        }
        Ok(WdnModel { dim, loss_mode: p.loss_mode, transforms, critics })
    }

    /// Applies the carried transform to `table`.
    pub fn apply(&self, table: &EmbeddingTable<T>) -> Result<EmbeddingTable<T>, crate::Error> {
        Ok(match &self.payload {
            Payload::Wdn(_) => self.to_model()?.apply(table)?,
            Payload::Coral(c) => c.apply(table)?,
            Payload::Tvn(t) => t.apply(table)?,
            Payload::Percentile(p) => p.apply(table)?,
            Payload::Pca(p) => p.apply(table)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, WdnError> {
        let ck: Self = serde_json::from_str(s).map_err(|e| WdnError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(WdnError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        Ok(ck)
    }

    /// Writes via a temporary file and rename so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), WdnError> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_json()).map_err(|e| WdnError::Checkpoint(format!("{}: {e}", tmp.display())))?;
        fs::rename(&tmp, path).map_err(|e| WdnError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, WdnError> {
        let s = fs::read_to_string(path).map_err(|e| WdnError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}
