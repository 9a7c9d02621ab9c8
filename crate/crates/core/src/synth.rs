//! Synthetic embedding tables with known treatment effects and known
//! per-domain affine nuisance.
//!
//! Every cell is drawn as `M_d (mu_t + noise) + b_d`. The control has
//! `mu = 0`; other treatments sit near a mechanism center. The maps
//! `(M_d, b_d)` are returned as [`GroundTruth`] so tests can undo them.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{treatment_label, DataError, EmbeddingRecord, EmbeddingTable, DEFAULT_NEGATIVE_CONTROL};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Attempts at drawing a well-conditioned nuisance matrix before giving up.
const MAX_NUISANCE_DRAWS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("could not draw a nonsingular nuisance matrix for domain {0}")]
    SingularNuisance(String),
    #[error("table has domain {0:?} that the ground truth does not know")]
    UnknownDomain(String),
    #[error("table dimension {got} does not match ground truth dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

impl From<DataError> for SynthError {
    fn from(e: DataError) -> Self {
        SynthError::InvalidConfig { field: "table", reason: e.to_string() }
    }
}

/// Which domains each non-control treatment appears in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Every treatment in every domain.
    #[default]
    All,
    /// Treatment `i` only in domain `i mod n_domains`; the control stays everywhere.
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound = "T: Scalar")]
pub struct SynthConfig<T> {
    pub dim: usize,
    pub n_domains: usize,
    /// Includes the negative control.
    pub n_treatments: usize,
    /// Mechanisms used when `moa_assignment` is absent; treatment `i` gets `i mod n_moa`.
    pub n_moa: usize,
    /// Explicit compound to mechanism map, keyed by compound name (`cmp01`, ...).
    pub moa_assignment: Option<BTreeMap<String, String>>,
    pub cells_per_group: usize,
    pub wells_per_group: usize,
    pub treatment_effect_scale: T,
    pub nuisance_scale: T,
    pub noise_scale: T,
    pub seed: u64,
    pub placement: Placement,
    pub negative_control: String,
}

impl<T: Scalar> Default for SynthConfig<T> {
    fn default() -> Self {
        Self {
            dim: 16,
            n_domains: 3,
            n_treatments: 7,
            n_moa: 3,
            moa_assignment: None,
            cells_per_group: 500,
            wells_per_group: 4,
            treatment_effect_scale: T::one(),
            nuisance_scale: T::of(0.3),
            noise_scale: T::of(0.1),
            seed: 0,
            placement: Placement::All,
            negative_control: DEFAULT_NEGATIVE_CONTROL.to_string(),
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> SynthError {
    SynthError::InvalidConfig { field, reason: reason.into() }
}

impl<T: Scalar> SynthConfig<T> {
    pub fn compound_names(&self) -> Vec<String> {
        let width = (self.n_treatments.max(2) - 1).to_string().len().max(2);
        (1..self.n_treatments).map(|i| format!("cmp{i:0width$}")).collect()
    }

    pub fn domain_names(&self) -> Vec<String> {
        let width = self.n_domains.to_string().len();
        (1..=self.n_domains).map(|d| format!("week{d:0width$}")).collect()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let positive = [
            ("dim", self.dim),
            ("n_domains", self.n_domains),
            ("n_treatments", self.n_treatments),
            ("cells_per_group", self.cells_per_group),
            ("wells_per_group", self.wells_per_group),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(invalid(field, "must be at least 1"));
            }
        }
        if self.wells_per_group > self.cells_per_group {
            return Err(invalid("wells_per_group", "cannot exceed cells_per_group"));
        }
        let scales = [
            ("treatment_effect_scale", self.treatment_effect_scale),
            ("nuisance_scale", self.nuisance_scale),
            ("noise_scale", self.noise_scale),
        ];
        for (field, v) in scales {
            if !(v.is_finite() && v >= T::zero()) {
                return Err(invalid(field, format!("must be finite and non-negative, got {v}")));
            }
        }
        if self.negative_control.is_empty() {
            return Err(invalid("negative_control", "must not be empty"));
        }
        match &self.moa_assignment {
            Some(map) => {
                for c in self.compound_names() {
                    if !map.contains_key(&c) {
                        return Err(invalid("moa_assignment", format!("no mechanism for {c}")));
                    }
                }
                if let Some(extra) = map.keys().find(|k| !self.compound_names().contains(k)) {
                    return Err(invalid("moa_assignment", format!("unknown compound {extra}")));
                }
            }
            None if self.n_moa == 0 && self.n_treatments > 1 => {
                return Err(invalid("n_moa", "must be at least 1"));
            }
            None => {}
        }
        Ok(())
    }

    fn moa_of(&self, index: usize, compound: &str) -> String {
        match &self.moa_assignment {
            Some(map) => map[compound].clone(),
            None => format!("moa{}", index % self.n_moa),
        }
    }
}

/// Nuisance map of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DomainNuisance<T> {
    pub matrix: Matrix<T>,
    pub offset: Vec<T>,
}

/// Everything the generator decided, enough to undo the nuisance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GroundTruth<T> {
    pub dim: usize,
    pub nuisance: BTreeMap<String, DomainNuisance<T>>,
    /// Treatment label to its clean mean.
    pub treatment_means: BTreeMap<String, Vec<T>>,
    /// Compound to mechanism, controls excluded.
    pub moa: BTreeMap<String, String>,
}

impl<T: Scalar> GroundTruth<T> {
    /// Map every row through `M_d^{-1}(x - b_d)`.
    pub fn invert(&self, table: &EmbeddingTable<T>) -> Result<EmbeddingTable<T>, SynthError> {
        if table.dim() != self.dim {
            return Err(SynthError::DimensionMismatch { expected: self.dim, got: table.dim() });
        }
        let mut inverses = BTreeMap::new();
        for (d, n) in &self.nuisance {
            let inv = n.matrix.inverse().map_err(|_| SynthError::SingularNuisance(d.clone()))?;
            inverses.insert(d.as_str(), (inv, &n.offset));
        }
        if let Some(r) = table.records().iter().find(|r| !inverses.contains_key(r.domain.as_str())) {
            return Err(SynthError::UnknownDomain(r.domain.clone()));
        }
        Ok(table.map_vectors(self.dim, |r| {
            let (inv, b) = &inverses[r.domain.as_str()];
            let centered: Vec<T> = r.vector.iter().zip(b.iter()).map(|(&x, &o)| x - o).collect();
            inv.mul_vec(&centered)
        })?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ground truth serializes")
    }
}

fn normal<T: Scalar, R: Rng>(rng: &mut R) -> T {
    T::of(rng.sample::<f64, _>(StandardNormal))
}

fn draw_nuisance<T: Scalar, R: Rng>(dim: usize, scale: T, rng: &mut R) -> Option<DomainNuisance<T>> {
    let root = T::of_usize(dim).sqrt();
    for _ in 0..MAX_NUISANCE_DRAWS {
        let mut m = Matrix::identity(dim);
        for i in 0..dim {
            for j in 0..dim {
                m[(i, j)] += scale * normal::<T, _>(rng) / root;
            }
        }
        let offset = (0..dim).map(|_| scale * normal::<T, _>(rng)).collect();
        if m.inverse().is_ok() {
            return Some(DomainNuisance { matrix: m, offset });
        }
    }
    None
}

/// Draw a table and the maps that generated it. Same config, same bits.
pub fn generate<T: Scalar>(cfg: &SynthConfig<T>) -> Result<(EmbeddingTable<T>, GroundTruth<T>), SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let domains = cfg.domain_names();
    let compounds = cfg.compound_names();

    let mut nuisance = BTreeMap::new();
    for d in &domains {
        let n = draw_nuisance(cfg.dim, cfg.nuisance_scale, &mut rng)
            .ok_or_else(|| SynthError::SingularNuisance(d.clone()))?;
        nuisance.insert(d.clone(), n);
    }

    // Mechanism centers first, then a smaller per-compound offset around them.
    let mut moa = BTreeMap::new();
    let mut centers: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for (i, c) in compounds.iter().enumerate() {
        let m = cfg.moa_of(i, c);
        moa.insert(c.clone(), m.clone());
        centers.entry(m).or_insert_with(|| (0..cfg.dim).map(|_| normal(&mut rng)).collect());
    }
    let spread = T::of(0.25);
    let control_label = treatment_label(&cfg.negative_control, "0");
    let mut treatment_means = BTreeMap::new();
    treatment_means.insert(control_label.clone(), vec![T::zero(); cfg.dim]);
    let mut groups: Vec<(String, String, Option<String>, Vec<usize>)> =
        vec![(cfg.negative_control.clone(), "0".into(), None, (0..cfg.n_domains).collect())];
    for (i, c) in compounds.iter().enumerate() {
        let center = &centers[&moa[c]];
        let mu: Vec<T> =
            center.iter().map(|&x| cfg.treatment_effect_scale * (x + spread * normal::<T, _>(&mut rng))).collect();
        treatment_means.insert(treatment_label(c, "1"), mu);
        let doms = match cfg.placement {
            Placement::All => (0..cfg.n_domains).collect(),
            Placement::RoundRobin => vec![i % cfg.n_domains],
        };
        groups.push((c.clone(), "1".into(), Some(moa[c].clone()), doms));
    }

    let mut records = Vec::new();
    let mut wells_used = vec![0usize; cfg.n_domains];
    for (d, dname) in domains.iter().enumerate() {
        let nz = &nuisance[dname];
        for (compound, dose, m, doms) in &groups {
            if !doms.contains(&d) {
                continue;
            }
            let label = treatment_label(compound, dose);
            let mu = &treatment_means[&label];
            for cell in 0..cfg.cells_per_group {
                let well = wells_used[d] + cell * cfg.wells_per_group / cfg.cells_per_group;
                let clean: Vec<T> = mu.iter().map(|&x| x + cfg.noise_scale * normal::<T, _>(&mut rng)).collect();
                let mut v = nz.matrix.mul_vec(&clean);
                v.iter_mut().zip(&nz.offset).for_each(|(x, &b)| *x += b);
                records.push(EmbeddingRecord {
                    row_id: format!("r{:07}", records.len()),
                    domain: dname.clone(),
                    plate: format!("plate_{dname}"),
                    well: format!("w{well:04}"),
                    compound: compound.clone(),
                    dose: dose.clone(),
                    treatment: label.clone(),
                    moa: m.clone(),
                    vector: v,
                });
            }
            wells_used[d] += cfg.wells_per_group;
        }
    }
    let table = EmbeddingTable::from_records(cfg.dim, records, cfg.negative_control.clone())?;
    Ok((table, GroundTruth { dim: cfg.dim, nuisance, treatment_means, moa }))
}
