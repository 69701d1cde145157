//! Parameter persistence: a flat little-endian fp64 binary plus a JSON
//! manifest of (name, shape, byte offset) entries. The manifest lives next
//! to the binary at `<path>.json`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub total_bytes: usize,
}

/// Manifest path for a checkpoint binary.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (name, t) in params.entries() {
        entries.push(ManifestEntry { name, shape: t.shape().to_vec(), offset: blob.len() });
        for v in t.values() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest { entries, total_bytes: blob.len() };
    fs::write(path, &blob)?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(manifest_path(path), json)?;
    Ok(())
}

pub fn parse_manifest(json: &[u8]) -> Result<Manifest> {
    serde_json::from_slice(json).map_err(|e| Error::data(format!("bad checkpoint manifest: {e}")))
}

/// Rebuild parameters from a manifest and binary blob, validated entry by
/// entry against a structurally initialized template.
pub fn assemble(manifest: &Manifest, blob: &[u8], template: &ModelParams) -> Result<ModelParams> {
    if manifest.total_bytes != blob.len() {
        return Err(Error::data(format!(
            "checkpoint is {} bytes but the manifest declares {}",
            blob.len(),
            manifest.total_bytes
        )));
    }
    let mut by_name: HashMap<&str, &ManifestEntry> = HashMap::new();
    for e in &manifest.entries {
        if by_name.insert(e.name.as_str(), e).is_some() {
            return Err(Error::data(format!("duplicate checkpoint entry '{}'", e.name)));
        }
    }
    let mut out = template.clone();
    let slots = out.entries_mut();
    if manifest.entries.len() != slots.len() {
        return Err(Error::data(format!(
            "checkpoint has {} entries, model needs {}",
            manifest.entries.len(),
            slots.len()
        )));
    }
    for (name, slot) in slots {
        let e = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::data(format!("checkpoint is missing entry '{name}'")))?;
        if e.shape != slot.shape() {
            return Err(Error::data(format!(
                "checkpoint entry '{name}' has shape {:?}, model needs {:?}",
                e.shape,
                slot.shape()
            )));
        }
        let len: usize = e.shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| {
            Error::data(format!("checkpoint entry '{name}' shape overflows"))
        })?;
        let bytes = len
            .checked_mul(8)
            .and_then(|b| e.offset.checked_add(b))
            .ok_or_else(|| Error::data(format!("checkpoint entry '{name}' offset overflows")))?;
        if bytes > blob.len() {
            return Err(Error::data(format!(
                "checkpoint entry '{name}' spans past the end of the binary ({bytes} > {} bytes)",
                blob.len()
            )));
        }
        let mut values = Vec::with_capacity(len);
        for i in 0..len {
            let at = e.offset + i * 8;
            let v = f64::from_le_bytes(blob[at..at + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::data(format!("checkpoint entry '{name}' holds a non-finite value")));
            }
            values.push(v);
        }
        *slot = Tensor::from_vec(&e.shape, values);
    }
    Ok(out)
}

pub fn load(path: &Path, template: &ModelParams) -> Result<ModelParams> {
    let blob = fs::read(path)?;
    let json = fs::read(manifest_path(path))?;
    let manifest = parse_manifest(&json)?;
    assemble(&manifest, &blob, template)
}
