use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment_id: String,
    pub config_hash: String,
    pub metric: String,
    pub k: usize,
    pub value: f64,
    pub seed: u64,
}

/// Fails on a repeated `(experiment_id, metric, k, seed)`.
pub fn check_unique(records: &[ResultRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert((&r.experiment_id, &r.metric, r.k, r.seed)) {
            return Err(Error::Invariant(format!(
                "duplicate result ({}, {}, k={}, seed={})",
                r.experiment_id, r.metric, r.k, r.seed
            )));
        }
    }
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_results(path: &Path, records: &[ResultRecord]) -> Result<()> {
    check_unique(records)?;
    write_csv(path, records)
}
