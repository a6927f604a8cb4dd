//! Parameter checkpoints that carry the configuration needed to rebuild the
//! owning model: `<stem>.bin`, `<stem>.manifest.json`, `<stem>.config.json`.

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};
use crate::numcore::ParamSet;

pub fn save<C: Serialize>(params: &ParamSet, config: &C, dir: &Path, stem: &str) -> Result<PathBuf> {
    let bin = params.save(dir, stem)?;
    let cfg = serde_json::to_string_pretty(config)?;
    std::fs::write(dir.join(format!("{stem}.config.json")), cfg + "\n")?;
    Ok(bin)
}

/// Loads a checkpoint, then checks it against `expected`, a freshly
/// initialized parameter set built from the stored config.
pub fn load<C: DeserializeOwned>(
    dir: &Path,
    stem: &str,
    expected: impl FnOnce(&C) -> Result<ParamSet>,
) -> Result<(C, ParamSet)> {
    let cfg_path = dir.join(format!("{stem}.config.json"));
    let config: C = serde_json::from_str(&std::fs::read_to_string(&cfg_path)?)?;
    let params = ParamSet::load(dir, stem)?;
    let reference = expected(&config)?;
    let bad = |reason: String| Error::Checkpoint {
        path: dir.join(format!("{stem}.bin")),
        reason,
    };
    if reference.len() != params.len() {
        return Err(bad(format!(
            "{} tensors stored, {} expected",
            params.len(),
            reference.len()
        )));
    }
    for (name, t) in reference.iter() {
        let got = params
            .get(name)
            .map_err(|_| bad(format!("missing parameter {name}")))?;
        if got.shape() != t.shape() {
            return Err(bad(format!("parameter {name} has shape {:?}", got.shape())));
        }
    }
    Ok((config, params))
}
