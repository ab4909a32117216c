// SPDX-License-Identifier: Apache-2.0

//! Named parameter tensors.
//!
//! A [`ParamStore`] either holds tensors loaded from a BEVT1 directory (a
//! `manifest.json` naming each tensor's file and shape) or synthesizes them
//! deterministically from a seed. Seeded tensors are drawn per name:
//!
//! 1. `key` = first 8 bytes (little-endian u64) of SHA-256(`seed` as 8 LE bytes ‖ UTF-8 name);
//! 2. a xoshiro256++ generator is seeded from `key` through SplitMix64
//!    (`Xoshiro256PlusPlus::seed_from_u64`);
//! 3. each value is `(2u − 1)·b` with `u = (next_u64 >> 11)·2⁻⁵³` and `b = 1/√fan_in`,
//!    rounded to f32 so a saved store reloads bit-identically.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bev::{read_tensor, write_tensor};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/√fan_in, 1/√fan_in]`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format: String,
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    seed: Option<u64>,
    tensors: BTreeMap<String, StoredTensor>,
    zero_prefixes: Vec<String>,
}

/// Uniform stream for one named tensor. `bound` scales the unit interval to `[-bound, bound]`.
pub fn seeded_uniform(seed: u64, name: &str, count: usize, bound: f64) -> Vec<f32> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let key = u64::from_le_bytes(digest[..8].try_into().unwrap());
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(key);
    (0..count)
        .map(|_| {
            let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            ((2.0 * u - 1.0) * bound) as f32
        })
        .collect()
}

impl ParamStore {
    pub fn seeded(seed: u64) -> Self {
        ParamStore {
            seed: Some(seed),
            ..Default::default()
        }
    }

    /// Every tensor whose name starts with `prefix` is forced to zero.
    pub fn with_zeroed(mut self, prefix: impl Into<String>) -> Self {
        self.zero_prefixes.push(prefix.into());
        self
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))
            .map_err(|e| Error::Tensor(e.into()))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("bad parameter manifest: {e}")))?;
        if manifest.format != "BEVT1" {
            return Err(Error::InvalidArgument(format!(
                "unsupported parameter format {}",
                manifest.format
            )));
        }
        let mut tensors = BTreeMap::new();
        for entry in manifest.tensors {
            let (dims, data) = read_tensor(dir.join(&entry.file))?;
            if dims != entry.shape {
                return Err(Error::InvalidArgument(format!(
                    "tensor {} has shape {:?}, manifest says {:?}",
                    entry.name, dims, entry.shape
                )));
            }
            tensors.insert(entry.name, StoredTensor { dims, data });
        }
        Ok(ParamStore {
            seed: None,
            tensors,
            zero_prefixes: Vec::new(),
        })
    }

    /// Writes every tensor fetched or loaded so far, plus the manifest.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::Tensor(e.into()))?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (i, (name, t)) in self.tensors.iter().enumerate() {
            let file = format!("{i:04}.bevt");
            write_tensor(dir.join(&file), &t.dims, &t.data)?;
            entries.push(ManifestEntry {
                name: name.clone(),
                file,
                shape: t.dims.clone(),
            });
        }
        let manifest = Manifest {
            format: "BEVT1".into(),
            tensors: entries,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(dir.join(MANIFEST_FILE), text).map_err(|e| Error::Tensor(e.into()))?;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape("parameter tensor", expected, data.len()));
        }
        self.tensors.insert(name.into(), StoredTensor { dims, data });
        Ok(())
    }

    /// Returns tensor `name` with shape `dims`, generating it when this store is seeded.
    pub fn fetch(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Vec<f64>> {
        let count: usize = dims.iter().product();
        if !self.tensors.contains_key(name) {
            let Some(seed) = self.seed else {
                return Err(Error::MissingParam(name.to_string()));
            };
            let data = match init {
                Init::Uniform { fan_in } => {
                    seeded_uniform(seed, name, count, 1.0 / (fan_in.max(1) as f64).sqrt())
                }
                Init::Zeros => vec![0.0; count],
                Init::Ones => vec![1.0; count],
            };
            let data = if self.zero_prefixes.iter().any(|p| name.starts_with(p.as_str())) {
                vec![0.0; count]
            } else {
                data
            };
            self.tensors.insert(
                name.to_string(),
                StoredTensor {
                    dims: dims.to_vec(),
                    data,
                },
            );
        }
        let t = &self.tensors[name];
        if t.dims != dims {
            return Err(Error::InvalidArgument(format!(
                "tensor {name} has shape {:?}, expected {dims:?}",
                t.dims
            )));
        }
        if self.zero_prefixes.iter().any(|p| name.starts_with(p.as_str())) {
            return Ok(vec![0.0; count]);
        }
        Ok(t.data.iter().map(|&v| v as f64).collect())
    }
}
