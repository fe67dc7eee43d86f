//! Instance pools supplied by users: external ids, nest names, optional
//! display labels and feature names, read from CSV or JSON.
//!
//! CSV layout: an `id` column, a `nest` column, an optional `label` column and
//! one numeric column per feature, in any order. Internally instances are
//! renumbered `0..n` in file order.

use std::collections::{BTreeMap, HashSet};
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::choice::Instance;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub id: u64,
    pub nest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub features: Vec<f64>,
}

/// A validated pool with its metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    pub feature_names: Vec<String>,
    pub records: Vec<PoolRecord>,
    /// Nest names in order of first appearance; instance nests index this.
    pub nest_names: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<u64, usize>,
}

impl Pool {
    /// Checks ids, dimensions and nest sizes. Feature names default to
    /// `x0, x1, ...` when empty.
    pub fn new(mut feature_names: Vec<String>, records: Vec<PoolRecord>) -> Result<Self> {
        if records.len() < 2 {
            return Err(Error::Validation { line: 0, message: format!("need at least two instances, got {}", records.len()) });
        }
        let p = records[0].features.len();
        if p == 0 {
            return Err(Error::Validation { line: 0, message: "instances need at least one feature".into() });
        }
        if feature_names.is_empty() {
            feature_names = (0..p).map(|k| format!("x{k}")).collect();
        }
        if feature_names.len() != p {
            return Err(Error::Validation {
                line: 0,
                message: format!("{} feature names for {p} features", feature_names.len()),
            });
        }
        let mut index = BTreeMap::new();
        let mut nest_names: Vec<String> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for (pos, r) in records.iter().enumerate() {
            if index.insert(r.id, pos).is_some() {
                return Err(Error::Validation { line: pos + 1, message: format!("duplicate instance id {}", r.id) });
            }
            if r.features.len() != p {
                return Err(Error::Validation {
                    line: pos + 1,
                    message: format!("instance {} has {} features, expected {p}", r.id, r.features.len()),
                });
            }
            if r.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation { line: pos + 1, message: format!("instance {} has a non-finite feature", r.id) });
            }
            match nest_names.iter().position(|n| *n == r.nest) {
                Some(m) => counts[m] += 1,
                None => {
                    nest_names.push(r.nest.clone());
                    counts.push(1);
                }
            }
        }
        if let Some(m) = counts.iter().position(|&c| c < 2) {
            return Err(Error::Validation { line: 0, message: format!("nest '{}' has fewer than two instances", nest_names[m]) });
        }
        Ok(Self { feature_names, records, nest_names, index })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Instances numbered by position.
    pub fn instances(&self) -> Vec<Instance> {
        self.records
            .iter()
            .enumerate()
            .map(|(pos, r)| {
                let nest = self.nest_names.iter().position(|n| *n == r.nest).expect("nest registered in new");
                Instance::new(pos, r.features.clone(), nest)
            })
            .collect()
    }

    /// Position of an external id.
    pub fn position(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// External id at a position.
    pub fn external_id(&self, pos: usize) -> u64 {
        self.records[pos].id
    }

    /// Re-creates the id index after deserialization.
    pub fn reindex(self) -> Result<Self> {
        Self::new(self.feature_names, self.records)
    }
}

/// Parses the CSV layout described in the module docs. Errors carry the
/// file line (the header is line 1).
pub fn read_pool_csv<R: Read>(input: R) -> Result<Pool> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let id_col = col("id").ok_or_else(|| Error::Parse { line: 1, message: "missing 'id' column".into() })?;
    let nest_col = col("nest").ok_or_else(|| Error::Parse { line: 1, message: "missing 'nest' column".into() })?;
    let label_col = col("label");
    let feature_cols: Vec<usize> =
        (0..headers.len()).filter(|&k| k != id_col && k != nest_col && Some(k) != label_col).collect();
    let feature_names: Vec<String> = feature_cols.iter().map(|&k| headers[k].to_string()).collect();
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let id: u64 = row[id_col].parse().map_err(|e| Error::Parse { line, message: format!("id '{}': {e}", &row[id_col]) })?;
        if !seen.insert(id) {
            return Err(Error::Validation { line, message: format!("duplicate instance id {id}") });
        }
        let features = feature_cols
            .iter()
            .map(|&k| {
                row[k].parse::<f64>().map_err(|e| Error::Parse { line, message: format!("{} '{}': {e}", &headers[k], &row[k]) })
            })
            .collect::<Result<Vec<f64>>>()?;
        records.push(PoolRecord {
            id,
            nest: row[nest_col].to_string(),
            label: label_col.map(|k| row[k].to_string()).filter(|s| !s.is_empty()),
            features,
        });
    }
    Pool::new(feature_names, records)
}

/// JSON body `{ "feature_names": [...], "instances": [{id, nest, label?, features}] }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolJson {
    #[serde(default)]
    pub feature_names: Vec<String>,
    pub instances: Vec<PoolRecord>,
}

impl TryFrom<PoolJson> for Pool {
    type Error = Error;

    fn try_from(p: PoolJson) -> Result<Self> {
        Pool::new(p.feature_names, p.instances)
    }
}
