//! Checkpoint container.
//!
//! Layout: an 8-byte little-endian header length `n`, `n` bytes of UTF-8
//! JSON header, then the payload of little-endian `f32` arrays. Each header
//! entry names an array, its shape, and its byte offset and length within the
//! payload. Optimizer state is not stored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParams, ParamSet};
use crate::error::{Error, Result};

const FORMAT: &str = "adaseg-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    classes: usize,
    heads: usize,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

pub fn write_checkpoint(model: &ModelParams<f32>) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, _, shape, data) in model.params.arrays() {
        let offset = payload.len();
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(Entry {
            name,
            shape,
            offset,
            length: payload.len() - offset,
        });
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        classes: model.classes(),
        heads: model.num_heads(),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

fn bad(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelParams<f32>> {
    if bytes.len() < 8 {
        return Err(bad(0, "checkpoint shorter than its length prefix"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let payload_start = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad(8, format!("header length {header_len} exceeds file")))?;
    let header: Header =
        serde_json::from_slice(&bytes[8..payload_start]).map_err(|e| bad(8, format!("header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad(8, format!("unsupported checkpoint {} v{}", header.format, header.version)));
    }
    if header.heads == 0 || !(2..=254).contains(&header.classes) {
        return Err(bad(8, format!("{} heads over {} classes", header.heads, header.classes)));
    }
    let payload = &bytes[payload_start..];
    let mut params = ParamSet::<f32>::zeros(header.classes, header.heads);
    let expected: Vec<(String, Vec<usize>)> = params.arrays().into_iter().map(|a| (a.0, a.2)).collect();
    if header.tensors.len() != expected.len() {
        return Err(bad(8, "unexpected number of tensors"));
    }
    let mut arrays: Vec<Vec<f32>> = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(bad(8, format!("expected {name} {shape:?}, found {} {:?}", entry.name, entry.shape)));
        }
        let n: usize = shape.iter().product();
        let end = entry.offset.checked_add(entry.length).filter(|&e| e <= payload.len());
        if entry.length != 4 * n || end.is_none() {
            return Err(bad(payload_start + entry.offset, format!("{name}: truncated or mis-sized payload")));
        }
        let raw = &payload[entry.offset..entry.offset + entry.length];
        arrays.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        );
    }
    for ((_, dst), src) in params.arrays_mut().into_iter().zip(arrays) {
        dst.copy_from_slice(&src);
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    ModelParams::from_params(params)
}

pub fn save_checkpoint(model: &ModelParams<f32>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io_path(dir, e))?;
    }
    fs::write(path, write_checkpoint(model)).map_err(|e| Error::io_path(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io_path(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let task = ModelParams::<f32>::init(5, 11).unwrap();
        let sel = task.clone_selector().unwrap();
        for m in [task, sel] {
            let bytes = write_checkpoint(&m);
            let back = read_checkpoint(&bytes).unwrap();
            assert_eq!(back.params, m.params);
            assert_eq!(write_checkpoint(&back), bytes);
        }
    }

    #[test]
    fn header_is_json_with_offsets() {
        let bytes = write_checkpoint(&ModelParams::<f32>::init(3, 1).unwrap());
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        let tensors = header["tensors"].as_array().unwrap();
        assert_eq!(tensors[0]["name"], "backbone.conv1.weight");
        assert_eq!(tensors[0]["shape"], serde_json::json!([16, 3, 3, 3]));
        assert_eq!(tensors[1]["offset"], 16 * 27 * 4);
        let total: u64 = tensors.iter().map(|t| t["length"].as_u64().unwrap()).sum();
        assert_eq!(bytes.len() - 8 - n, total as usize);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = write_checkpoint(&ModelParams::<f32>::init(3, 1).unwrap());
        assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        assert!(matches!(read_checkpoint(&bytes[..4]), Err(Error::Format { offset: 0, .. })));
    }
}
