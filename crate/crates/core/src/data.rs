//! Embedding tables: per-cell vectors plus experiment metadata, their CSV
//! representation, and the (treatment, domain) grouping the rest of the
//! crate is organized around.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("no embedding columns `{0}0..` found in header")]
    NoEmbeddingColumns(String),
    #[error("row {row}: expected {expected} cells, found {found}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("row {row}: embedding cell `{column}` = {value:?} is not a finite number")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("row {row}: duplicate row_id {id:?}")]
    DuplicateRowId { row: usize, id: String },
    #[error("row {row}: vector has dimension {got}, table dimension is {expected}")]
    DimensionMismatch { row: usize, expected: usize, got: usize },
    #[error("schema file: {0}")]
    Schema(String),
}

/// Canonical treatment label for a compound at a dose.
pub fn treatment_label(compound: &str, dose: &str) -> String {
    format!("{compound}@{dose}")
}

/// One cell's embedding and its experimental metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord<T> {
    pub row_id: String,
    /// Batch the cell was processed in; the nuisance variable.
    pub domain: String,
    pub plate: String,
    pub well: String,
    pub compound: String,
    /// Kept verbatim from the input so grouping never compares floats.
    pub dose: String,
    pub treatment: String,
    pub moa: Option<String>,
    pub vector: Vec<T>,
}

impl<T> EmbeddingRecord<T> {
    /// Bootstrap resampling unit: a well is only unique within its plate.
    pub fn well_key(&self) -> (&str, &str) {
        (&self.plate, &self.well)
    }
}

/// Key of the index sets `I_{t,d}`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub treatment: String,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    dim: usize,
    records: Vec<EmbeddingRecord<T>>,
    pub negative_control: String,
}

pub const DEFAULT_NEGATIVE_CONTROL: &str = "DMSO";

impl<T: Scalar> EmbeddingTable<T> {
    pub fn new(dim: usize, negative_control: impl Into<String>) -> Self {
        Self { dim, records: Vec::new(), negative_control: negative_control.into() }
    }

    /// Builds a table, checking the dimension and row-id invariants.
    pub fn from_records(
        dim: usize,
        records: Vec<EmbeddingRecord<T>>,
        negative_control: impl Into<String>,
    ) -> Result<Self, DataError> {
        let mut ids = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.vector.len() != dim {
                return Err(DataError::DimensionMismatch { row: i + 1, expected: dim, got: r.vector.len() });
            }
            if !ids.insert(r.row_id.as_str()) {
                return Err(DataError::DuplicateRowId { row: i + 1, id: r.row_id.clone() });
            }
        }
        Ok(Self { dim, records, negative_control: negative_control.into() })
    }

    pub fn push(&mut self, record: EmbeddingRecord<T>) -> Result<(), DataError> {
        let row = self.records.len() + 1;
        if record.vector.len() != self.dim {
            return Err(DataError::DimensionMismatch { row, expected: self.dim, got: record.vector.len() });
        }
        if self.records.iter().any(|r| r.row_id == record.row_id) {
            return Err(DataError::DuplicateRowId { row, id: record.row_id });
        }
        self.records.push(record);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord<T>] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &EmbeddingRecord<T> {
        &self.records[i]
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[T]> {
        self.records.iter().map(|r| r.vector.as_slice())
    }

    pub fn is_control(&self, record: &EmbeddingRecord<T>) -> bool {
        record.compound == self.negative_control
    }

    pub fn control_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_control(&self.records[i])).collect()
    }

    /// Same metadata, vectors replaced by `f(record)`; output dimension may differ.
    pub fn map_vectors<F>(&self, new_dim: usize, mut f: F) -> Result<Self, DataError>
    where
        F: FnMut(&EmbeddingRecord<T>) -> Vec<T>,
    {
        let mut records = Vec::with_capacity(self.len());
        for (i, r) in self.records.iter().enumerate() {
            let v = f(r);
            if v.len() != new_dim {
                return Err(DataError::DimensionMismatch { row: i + 1, expected: new_dim, got: v.len() });
            }
            records.push(EmbeddingRecord { vector: v, ..r.clone() });
        }
        Ok(Self { dim: new_dim, records, negative_control: self.negative_control.clone() })
    }

    /// Rows `indices` in that order, row ids kept. Duplicate indices get a
    /// `#k` suffix so the row-id invariant survives resampling.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
        let records = indices
            .iter()
            .map(|&i| {
                let mut r = self.records[i].clone();
                let c = seen.entry(i).or_insert(0);
                if *c > 0 {
                    r.row_id = format!("{}#{}", r.row_id, c);
                }
                *c += 1;
                r
            })
            .collect();
        Self { dim: self.dim, records, negative_control: self.negative_control.clone() }
    }

    pub fn filter(&self, mut keep: impl FnMut(&EmbeddingRecord<T>) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.records[i])).collect();
        self.select(&idx)
    }

    pub fn domains(&self) -> Vec<String> {
        self.records.iter().map(|r| r.domain.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn compounds(&self) -> Vec<String> {
        self.records.iter().map(|r| r.compound.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Row indices grouped by (treatment, domain), each list in table order.
    pub fn group_index(&self) -> BTreeMap<GroupKey, Vec<usize>> {
        let mut groups: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            groups
                .entry(GroupKey { treatment: r.treatment.clone(), domain: r.domain.clone() })
                .or_default()
                .push(i);
        }
        groups
    }

    /// Row indices grouped by (plate, well).
    pub fn well_index(&self) -> BTreeMap<(String, String), Vec<usize>> {
        let mut wells: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            wells.entry((r.plate.clone(), r.well.clone())).or_default().push(i);
        }
        wells
    }

    /// Treatments present in two or more domains, with their sorted domains.
    pub fn replicated_treatments(&self) -> Vec<(String, Vec<String>)> {
        let mut by_treatment: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for r in &self.records {
            by_treatment.entry(&r.treatment).or_default().insert(&r.domain);
        }
        by_treatment
            .into_iter()
            .filter(|(_, ds)| ds.len() >= 2)
            .map(|(t, ds)| (t.to_string(), ds.into_iter().map(str::to_string).collect()))
            .collect()
    }
}

/// Maps logical column roles to header names.
///
/// Loaded from a small TOML file such as
///
/// ```toml
/// domain = "Batch"
/// compound = "Image_Metadata_Compound"
/// embedding_prefix = "f"
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnSchema {
    pub row_id: String,
    pub domain: String,
    pub plate: String,
    pub well: String,
    pub compound: String,
    pub dose: String,
    pub treatment: String,
    pub moa: String,
    pub embedding_prefix: String,
    pub negative_control: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            row_id: "row_id".into(),
            domain: "domain".into(),
            plate: "plate".into(),
            well: "well".into(),
            compound: "compound".into(),
            dose: "dose".into(),
            treatment: "treatment".into(),
            moa: "moa".into(),
            embedding_prefix: "e".into(),
            negative_control: DEFAULT_NEGATIVE_CONTROL.into(),
        }
    }
}

impl ColumnSchema {
    pub fn from_toml_str(s: &str) -> Result<Self, DataError> {
        toml::from_str(s).map_err(|e| DataError::Schema(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let s = std::fs::read_to_string(path)
            .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&s)
    }
}

pub fn load_table<T: Scalar>(path: &Path, schema: &ColumnSchema) -> Result<EmbeddingTable<T>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    read_table(file, schema)
}

/// Parses CSV; row numbers in errors count data rows from 1.
pub fn read_table<T: Scalar, R: Read>(reader: R, schema: &ColumnSchema) -> Result<EmbeddingTable<T>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let find = |name: &str| header.iter().position(|h| h == name);
    let require = |name: &str| find(name).ok_or_else(|| DataError::MissingColumn(name.to_string()));

    let c_row = require(&schema.row_id)?;
    let c_domain = require(&schema.domain)?;
    let c_plate = require(&schema.plate)?;
    let c_well = require(&schema.well)?;
    let c_compound = require(&schema.compound)?;
    let c_dose = require(&schema.dose)?;
    let c_treatment = find(&schema.treatment);
    let c_moa = find(&schema.moa);

    let mut emb_cols = Vec::new();
    while let Some(c) = find(&format!("{}{}", schema.embedding_prefix, emb_cols.len())) {
        emb_cols.push(c);
    }
    if emb_cols.is_empty() {
        return Err(DataError::NoEmbeddingColumns(schema.embedding_prefix.clone()));
    }
    let dim = emb_cols.len();
    let width = header.len();

    let mut table = EmbeddingTable::new(dim, schema.negative_control.clone());
    let mut ids = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        if rec.len() != width {
            return Err(DataError::RaggedRow { row, expected: width, found: rec.len() });
        }
        let mut vector = Vec::with_capacity(dim);
        for (k, &c) in emb_cols.iter().enumerate() {
            let cell = rec[c].trim();
            match cell.parse::<T>() {
                Ok(v) if v.is_finite() => vector.push(v),
                _ => {
                    return Err(DataError::NonNumeric {
                        row,
                        column: format!("{}{}", schema.embedding_prefix, k),
                        value: cell.to_string(),
                    })
                }
            }
        }
        let row_id = rec[c_row].to_string();
        if !ids.insert(row_id.clone()) {
            return Err(DataError::DuplicateRowId { row, id: row_id });
        }
        let compound = rec[c_compound].to_string();
        let dose = rec[c_dose].to_string();
        let treatment = match c_treatment.map(|c| &rec[c]) {
            Some(t) if !t.is_empty() => t.to_string(),
            _ => treatment_label(&compound, &dose),
        };
        let moa = c_moa.map(|c| rec[c].to_string()).filter(|m| !m.is_empty());
        table.records.push(EmbeddingRecord {
            row_id,
            domain: rec[c_domain].to_string(),
            plate: rec[c_plate].to_string(),
            well: rec[c_well].to_string(),
            compound,
            dose,
            treatment,
            moa,
            vector,
        });
    }
    Ok(table)
}

pub fn save_table<T: Scalar>(table: &EmbeddingTable<T>, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    write_table(table, file)
}

/// Writes the canonical layout with default column names. Values use the
/// shortest representation that parses back to the same bits.
pub fn write_table<T: Scalar, W: Write>(table: &EmbeddingTable<T>, writer: W) -> Result<(), DataError> {
    let schema = ColumnSchema::default();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        schema.row_id.clone(),
        schema.domain.clone(),
        schema.plate.clone(),
        schema.well.clone(),
        schema.compound.clone(),
        schema.dose.clone(),
        schema.treatment.clone(),
        schema.moa.clone(),
    ];
    header.extend((0..table.dim()).map(|k| format!("{}{}", schema.embedding_prefix, k)));
    w.write_record(&header)?;
    for r in table.records() {
        let mut cells = vec![
            r.row_id.clone(),
            r.domain.clone(),
            r.plate.clone(),
            r.well.clone(),
            r.compound.clone(),
            r.dose.clone(),
            r.treatment.clone(),
            r.moa.clone().unwrap_or_default(),
        ];
        cells.extend(r.vector.iter().map(|v| v.to_string()));
        w.write_record(&cells)?;
    }
    w.flush().map_err(|source| DataError::Io { path: "<csv writer>".into(), source })?;
    Ok(())
}
