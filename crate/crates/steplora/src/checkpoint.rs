//! Checkpoint directories: a JSON manifest plus one raw tensor blob.
//!
//! The manifest carries the schema version, stage tag, tensor index
//! (name, shape, trainable flag, byte offsets), a config snapshot, and the
//! RNG state. The blob concatenates every tensor as little-endian f64 in
//! row-major order, in the manifest's (sorted-name) order. Save, load, save
//! again is byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Stage};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore};
use crate::rng::RngState;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub stage: Stage,
    pub tensors: Vec<TensorMeta>,
    pub config: RunConfig,
    pub rng: RngState,
}

pub fn save(
    dir: &Path,
    store: &ParamStore,
    stage: Stage,
    config: &RunConfig,
    rng: RngState,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for (name, param) in store.iter() {
        let bytes = param.value.to_le_bytes();
        tensors.push(TensorMeta {
            name: name.to_string(),
            rows: param.value.rows(),
            cols: param.value.cols(),
            trainable: param.trainable,
            offset: blob.len() as u64,
            byte_len: bytes.len() as u64,
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        stage,
        tensors,
        config: config.clone(),
        rng,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(ParamStore, Manifest)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::CheckpointCorrupt(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::CheckpointCorrupt(format!("bad manifest: {e}")))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::CheckpointCorrupt(format!(
            "schema version {} unsupported (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let blob = fs::read(dir.join(BLOB_FILE))?;

    let mut expected_len = 0u64;
    let mut store = ParamStore::new();
    for meta in &manifest.tensors {
        let end = meta
            .offset
            .checked_add(meta.byte_len)
            .ok_or_else(|| Error::CheckpointCorrupt("tensor offset overflow".into()))?;
        if meta.offset != expected_len {
            return Err(Error::CheckpointCorrupt(format!(
                "tensor {} offset {} does not follow previous tensor at {}",
                meta.name, meta.offset, expected_len
            )));
        }
        if end > blob.len() as u64 {
            return Err(Error::CheckpointCorrupt(format!(
                "tensor {} extends past the blob ({} > {})",
                meta.name,
                end,
                blob.len()
            )));
        }
        if meta.byte_len != (meta.rows * meta.cols * 8) as u64 {
            return Err(Error::CheckpointCorrupt(format!(
                "tensor {} byte length {} does not match shape {}x{}",
                meta.name, meta.byte_len, meta.rows, meta.cols
            )));
        }
        let m = Matrix::from_le_bytes(
            meta.rows,
            meta.cols,
            &blob[meta.offset as usize..end as usize],
        )?;
        store.insert(&meta.name, m, meta.trainable)?;
        expected_len = end;
    }
    if expected_len != blob.len() as u64 {
        return Err(Error::CheckpointCorrupt(format!(
            "blob has {} trailing bytes",
            blob.len() as u64 - expected_len
        )));
    }
    Ok((store, manifest))
}
