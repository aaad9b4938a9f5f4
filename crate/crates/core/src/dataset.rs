//! Weighted `(x, y)` samples and their line-oriented file format.
//!
//! One JSON object per line: `{"x":[0,1],"y":[1.0,0.0],"w":0.5}`. Weights
//! must sum to one within `1e-9` on load and are renormalized exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{BinaryState, OutputVector, NORMALIZATION_TOL};

/// Tolerance on the weight sum when reading a dataset file.
pub const FILE_WEIGHT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub x: BinaryState,
    pub y: OutputVector,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        Self::with_tolerance(records, NORMALIZATION_TOL)
    }

    /// Equal weights over the given pairs.
    pub fn uniform(pairs: Vec<(BinaryState, OutputVector)>) -> Result<Self> {
        let w = 1.0 / pairs.len().max(1) as f64;
        Dataset::new(pairs.into_iter().map(|(x, y)| Record { x, y, w }).collect())
    }

    fn with_tolerance(mut records: Vec<Record>, tol: f64) -> Result<Self> {
        let n = match records.first() {
            Some(r) => r.x.len(),
            None => return Err(Error::EmptyDataset),
        };
        for (i, r) in records.iter().enumerate() {
            if r.x.len() != n || r.y.len() != n {
                return Err(Error::Dimension(format!(
                    "record {i} has |x| = {}, |y| = {}, expected {n}",
                    r.x.len(),
                    r.y.len()
                )));
            }
            if !r.w.is_finite() || r.w < 0.0 {
                return Err(Error::InvalidArgument(format!("record {i} has weight {}", r.w)));
            }
        }
        let sum: f64 = records.iter().map(|r| r.w).sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "weights sum to {sum}, expected 1 within {tol:e}"
            )));
        }
        if sum != 1.0 {
            records.iter_mut().for_each(|r| r.w /= sum);
        }
        Ok(Dataset { n, records })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = crate::model::parse(line).map_err(|e| match e {
                Error::Schema { path, message } => {
                    Error::schema(format!("line {}.{path}", i + 1), message)
                }
                other => other,
            })?;
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Dataset::with_tolerance(records, FILE_WEIGHT_TOL)
            .map_err(|e| Error::schema("w", e.to_string()))
    }
}
