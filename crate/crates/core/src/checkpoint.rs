//! Directory checkpoints: `manifest.json` describing each tensor and
//! `weights.bin` holding the little-endian f32 values back to back.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::ExpansionPlan;
use crate::tensor::Tensor;
use crate::transformer::{check_store, ModelSpec, ParameterStore};

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub byte_length: u64,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<ExpansionPlan>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub plan: Option<ExpansionPlan>,
    pub meta: BTreeMap<String, String>,
    pub store: ParameterStore,
}

impl Checkpoint {
    pub fn plain(spec: ModelSpec, store: ParameterStore) -> Self {
        Checkpoint {
            spec,
            plan: None,
            meta: BTreeMap::new(),
            store,
        }
    }
}

/// Writes `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(ckpt.store.numel() * 4);
    let mut tensors = Vec::with_capacity(ckpt.store.len());
    for (name, entry) in ckpt.store.iter() {
        let offset = blob.len() as u64;
        for v in entry.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: entry.tensor.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            byte_length: blob.len() as u64 - offset,
            frozen: entry.frozen,
        });
    }
    let manifest = Manifest {
        spec: ckpt.spec.clone(),
        plan: ckpt.plan.clone(),
        meta: ckpt.meta.clone(),
        tensors,
    };
    write_atomic(&dir.join(WEIGHTS), &blob)?;
    write_atomic(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).map_err(|e| Error::checkpoint(&path, e.to_string()))?;
    serde_json::from_slice(&text).map_err(|e| Error::checkpoint(&path, e.to_string()))
}

/// Reads a checkpoint, checking that the manifest entries tile the weight file
/// exactly and that every tensor matches the recorded model spec.
pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let wpath = dir.join(WEIGHTS);
    let blob = fs::read(&wpath).map_err(|e| Error::checkpoint(&wpath, e.to_string()))?;
    let bad = |reason: String| Error::checkpoint(&wpath, reason);

    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    let mut store = ParameterStore::new();
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(bad(format!("`{}` has dtype {}, expected f32", e.name, e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if e.byte_length != numel as u64 * 4 {
            return Err(bad(format!(
                "`{}` declares {} bytes for shape {:?}",
                e.name, e.byte_length, e.shape
            )));
        }
        let end = e
            .offset
            .checked_add(e.byte_length)
            .filter(|&end| end <= blob.len() as u64)
            .ok_or_else(|| {
                bad(format!(
                    "`{}` spans past the end of a {}-byte file",
                    e.name,
                    blob.len()
                ))
            })?;
        if store.contains(&e.name) {
            return Err(bad(format!("`{}` listed twice", e.name)));
        }
        let bytes = &blob[e.offset as usize..end as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| bad(format!("`{}`: {err}", e.name)))?;
        store.insert(e.name.clone(), t, e.frozen);
        spans.push((e.offset, end, &e.name));
    }
    spans.sort();
    let mut cursor = 0u64;
    for (start, end, name) in &spans {
        if *start != cursor {
            return Err(bad(format!(
                "`{name}` starts at byte {start}, expected {cursor} (gap or overlap)"
            )));
        }
        cursor = *end;
    }
    if cursor != blob.len() as u64 {
        return Err(bad(format!(
            "manifest covers {cursor} bytes of a {}-byte file",
            blob.len()
        )));
    }
    check_store(&manifest.spec, &store).map_err(|e| bad(e.to_string()))?;
    Ok(Checkpoint {
        spec: manifest.spec,
        plan: manifest.plan,
        meta: manifest.meta,
        store,
    })
}
