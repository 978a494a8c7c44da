//! JSON checkpoints. Every named parameter is stored as its shape plus the
//! base64 encoding of its little-endian `f64` bytes, so round-trips are exact.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "model": "adlista",
//!   "layers": 3,
//!   "dims": { "m": 100, "n": 128, "b": 256 },
//!   "share_dictionary": false,
//!   "params":  { "psi.1": { "shape": [128, 256], "data": "<base64>" }, ... },
//!   "buffers": { "head.shift": { ... }, ... },
//!   "settings": { "theta": 0.1, ... }
//! }
//! ```
//!
//! `params` are trained, `buffers` are fixed at initialisation, `settings`
//! hold model-specific scalars (e.g. the ISTA grid choice).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::data::Dims;
use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimsRecord {
    pub m: usize,
    pub n: usize,
    pub b: usize,
}

impl From<Dims> for DimsRecord {
    fn from(d: Dims) -> Self {
        Self { m: d.m, n: d.n, b: d.b }
    }
}

impl From<&DimsRecord> for Dims {
    fn from(d: &DimsRecord) -> Self {
        Dims { m: d.m, n: d.n, b: d.b }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

impl EncodedTensor {
    pub fn encode(t: &Tensor) -> Self {
        let mut bytes = Vec::with_capacity(8 * t.len());
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            shape: t.shape().to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self, name: &str) -> Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Checkpoint(format!("{name}: {} bytes is not a multiple of 8", bytes.len())));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(self.shape.clone(), data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: String,
    pub layers: usize,
    pub dims: DimsRecord,
    #[serde(default)]
    pub share_dictionary: bool,
    pub params: BTreeMap<String, EncodedTensor>,
    #[serde(default)]
    pub buffers: BTreeMap<String, EncodedTensor>,
    #[serde(default)]
    pub settings: BTreeMap<String, f64>,
}

pub fn encode_set(set: &ParamSet) -> BTreeMap<String, EncodedTensor> {
    set.iter().map(|(k, v)| (k.clone(), EncodedTensor::encode(v))).collect()
}

pub fn decode_set(enc: &BTreeMap<String, EncodedTensor>) -> Result<ParamSet> {
    enc.iter().map(|(k, v)| Ok((k.clone(), v.decode(k)?))).collect()
}

impl Checkpoint {
    pub fn new(model: &str, layers: usize, dims: Dims) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            model: model.to_string(),
            layers,
            dims: dims.into(),
            share_dictionary: false,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            settings: BTreeMap::new(),
        }
    }

    pub fn setting(&self, key: &str) -> Result<f64> {
        self.settings
            .get(key)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing setting `{key}`")))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    /// Accepts either the checkpoint file itself or the directory holding it.
    pub fn resolve(path: &Path) -> PathBuf {
        if path.is_dir() {
            path.join(CHECKPOINT_FILE)
        } else {
            path.to_path_buf()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = if path.extension().is_some_and(|e| e == "json") {
            path.to_path_buf()
        } else {
            fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
            path.join(CHECKPOINT_FILE)
        };
        fs::write(&file, self.to_json()?).map_err(|e| Error::io(&file, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = Self::resolve(path);
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        Self::from_json(&text)
    }
}
