//! Named parameter collections and their on-disk checkpoint format.
//!
//! A checkpoint is two files sharing a stem:
//!
//! * `<stem>.bin`: the magic bytes `TGCK`, a little-endian `u32` format
//!   version (currently 1), a `u32` record count, then one record per
//!   tensor in name order. A record is `u32` name length, the UTF-8 name,
//!   `u32` rank, `rank` × `u64` dimensions, and `prod(dims)` × `f64` values,
//!   all little-endian.
//! * `<stem>.manifest.json`: the record list (`name`, `shape`, byte `offset`
//!   of the record inside the `.bin`, record `bytes`) for human inspection.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TGCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Moves every tensor of `other` into `self` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamSet) {
        for (k, v) in other.tensors {
            self.tensors.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Xavier/Glorot uniform matrix with bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_xavier(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        self.insert(
            name,
            Tensor::new(vec![fan_in, fan_out], data).expect("xavier shape"),
        );
    }

    /// Registers every tensor as a named leaf of `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), g.named_leaf(k, v.clone(), requires_grad)))
            .collect();
        BoundParams { vars }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.encode().0
    }

    fn encode(&self) -> (Vec<u8>, Vec<ManifestRecord>) {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut manifest = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = buf.len();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            manifest.push(ManifestRecord {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                bytes: buf.len() - offset,
            });
        }
        (buf, manifest)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let count = r.u32()?;
        let mut out = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| e.to_string())?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
            out.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok(out)
    }

    /// Writes `<stem>.bin` and `<stem>.manifest.json` under `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let (bytes, records) = self.encode();
        let bin = dir.join(format!("{stem}.bin"));
        fs::write(&bin, &bytes)?;
        let manifest = Manifest {
            format: "tokengate-checkpoint".into(),
            version: VERSION,
            parameter_count: self.count(),
            records,
        };
        fs::write(
            dir.join(format!("{stem}.manifest.json")),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(bin)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.bin"));
        let bytes = fs::read(&path)?;
        ParamSet::from_bytes(&bytes).map_err(|reason| Error::Checkpoint { path, reason })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    parameter_count: usize,
    records: Vec<ManifestRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parameters registered on a graph, looked up by name.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
