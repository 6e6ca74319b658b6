//! `AEC1` checkpoint files: magic, little-endian `u32` header length, a JSON
//! header, then every parameter as little-endian `f32` at its manifest offset.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AEC1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub final_train_loss: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub spec: ModelSpec,
    pub manifest: Vec<ManifestEntry>,
    pub metadata: CheckpointMeta,
}

fn field(field: &str, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        field: field.into(),
        reason: reason.into(),
    }
}

pub fn encode_checkpoint(model: &Model, meta: CheckpointMeta) -> Result<Vec<u8>> {
    let mut manifest = Vec::new();
    let mut data = Vec::new();
    for (name, t) in model.params().iter() {
        manifest.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: data.len(),
        });
        data.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    let header = serde_json::to_vec(&Header {
        version: FORMAT_VERSION,
        spec: model.spec().clone(),
        manifest,
        metadata: meta,
    })?;
    let len = u32::try_from(header.len()).map_err(|_| field("header", "header exceeds 4 GiB"))?;
    let mut out = Vec::with_capacity(8 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    if bytes.len() < 8 {
        return Err(field("magic", "file is shorter than the fixed preamble"));
    }
    if &bytes[..4] != MAGIC {
        return Err(field("magic", format!("expected {:?}, found {:?}", MAGIC, &bytes[..4])));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes
        .get(8..8 + len)
        .ok_or_else(|| field("header", format!("declared length {len} runs past end of file")))?;
    let value: serde_json::Value =
        serde_json::from_slice(header_bytes).map_err(|e| field("header", format!("invalid JSON: {e}")))?;
    match value.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(field("version", format!("unsupported version {v}, expected {FORMAT_VERSION}"))),
        None => return Err(field("version", "missing")),
    }
    let header: Header = serde_json::from_value(value).map_err(|e| field("header", e.to_string()))?;
    header.spec.validate().map_err(|e| field("spec", e.to_string()))?;

    let data = &bytes[8 + len..];
    let mut params = ParamSet::new();
    let mut expected_end = 0;
    for entry in &header.manifest {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + 4 * n;
        let chunk = data.get(entry.offset..end).ok_or_else(|| {
            field(
                &entry.name,
                format!("needs bytes {}..{end} but the data section has {}", entry.offset, data.len()),
            )
        })?;
        let values = chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let tensor = Tensor::new(&entry.shape, values).map_err(|e| field(&entry.name, e.to_string()))?;
        params.add(entry.name.clone(), tensor).map_err(|e| field(&entry.name, e.to_string()))?;
        expected_end = expected_end.max(end);
    }
    if data.len() != expected_end {
        return Err(field("data", format!("{} trailing bytes after the last parameter", data.len() - expected_end)));
    }
    let model = Model::from_parts(&header.spec, params)?;
    Ok((model, header.metadata))
}

pub fn save_checkpoint(model: &Model, meta: CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
