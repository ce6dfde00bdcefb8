//! Flat binary parameter container with a JSON manifest.
//!
//! `params.bin` holds every array back to back as little-endian `f64`;
//! `manifest.json` lists names, shapes and byte offsets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "msc-nmt-params/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub numel: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub endianness: String,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub arrays: Vec<ArrayEntry>,
}

pub fn save_params(dir: &Path, store: &ParamStore, config_hash: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(store.num_scalars() * 8);
    let mut arrays = Vec::with_capacity(store.len());
    for p in store.iter() {
        arrays.push(ArrayEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: bytes.len() as u64,
            numel: p.value.numel() as u64,
        });
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        endianness: "little".into(),
        dtype: "f64".into(),
        config_hash: config_hash.map(str::to_owned),
        arrays,
    };
    let bin = dir.join(PARAMS_FILE);
    fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
    let man = dir.join(MANIFEST_FILE);
    fs::write(&man, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&man, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let man = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&man).map_err(|e| Error::io(&man, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unknown format {:?}",
            manifest.format
        )));
    }
    if manifest.endianness != "little" || manifest.dtype != "f64" {
        return Err(Error::Checkpoint(format!(
            "unsupported layout {} {}",
            manifest.endianness, manifest.dtype
        )));
    }
    Ok(manifest)
}

/// Loads the arrays of a checkpoint directory into a fresh store.
pub fn load_params(dir: &Path) -> Result<(ParamStore, Manifest)> {
    let manifest = read_manifest(dir)?;
    let bin = dir.join(PARAMS_FILE);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut store = ParamStore::new();
    for entry in &manifest.arrays {
        let start = entry.offset as usize;
        let end = start + entry.numel as usize * 8;
        let raw = bytes.get(start..end).ok_or_else(|| {
            Error::Checkpoint(format!(
                "array {} runs past end of {}",
                entry.name, PARAMS_FILE
            ))
        })?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    Ok((store, manifest))
}
