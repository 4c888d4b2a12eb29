//! PXW1 weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PXW1" | version: u32 | header_len: u64 | header: UTF-8 JSON (header_len bytes)
//! | zero padding to the next 64-byte boundary | tensor payloads
//! ```
//!
//! Tensor `offset`s in the header are relative to the start of the payload
//! section and are multiples of 64. Payloads are row-major little-endian `f32`.
//! Because the payload section itself starts on a 64-byte boundary, every
//! tensor is 64-byte aligned in the file as well.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelDescription, ModelGraph};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PXW1";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
pub const LAYOUT: &str = "channels_first";
pub const TAP_POSITION: &str = "post_activation";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub layout: String,
    pub tap_position: String,
    #[serde(flatten)]
    pub model: ModelDescription,
    pub tensors: Vec<TensorEntry>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

pub fn encode(model: &ModelGraph) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for (name, t) in model.tensors() {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: offset as u64,
        });
        offset = align_up(offset + 4 * t.len());
    }
    let header = ContainerHeader {
        layout: LAYOUT.into(),
        tap_position: TAP_POSITION.into(),
        model: model.description().clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let payload_start = align_up(16 + json.len());
    let mut out = Vec::with_capacity(payload_start + offset);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(payload_start, 0);
    for (entry, t) in header.tensors.iter().zip(model.tensors().values()) {
        out.resize(payload_start + entry.offset as usize, 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.resize(payload_start + offset, 0);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ModelGraph> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::UnrecognizedContainer { found });
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated("fixed preamble is incomplete".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Truncated(format!("header of {header_len} bytes")))?;
    let header: ContainerHeader = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::Header(e.to_string()))?;
    if header.layout != LAYOUT {
        return Err(Error::Header(format!(
            "layout {:?} is not supported (expected {LAYOUT:?})",
            header.layout
        )));
    }
    if header.tap_position != TAP_POSITION {
        return Err(Error::Header(format!(
            "tap_position {:?} is not supported (expected {TAP_POSITION:?})",
            header.tap_position
        )));
    }
    let payload_start = align_up(header_end);
    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        if !(entry.offset as usize).is_multiple_of(ALIGN) {
            return Err(Error::Header(format!(
                "tensor {:?} offset {} is not {ALIGN}-byte aligned",
                entry.name, entry.offset
            )));
        }
        let count: usize = entry.shape.iter().product();
        let start = payload_start + entry.offset as usize;
        let end = start + 4 * count;
        if end > bytes.len() {
            return Err(Error::Truncated(format!(
                "tensor {:?} needs bytes {start}..{end}, file has {}",
                entry.name,
                bytes.len()
            )));
        }
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::Header(format!("tensor {:?}: {e}", entry.name)))?;
        if tensors.insert(entry.name.clone(), t).is_some() {
            return Err(Error::Header(format!("duplicate tensor {:?}", entry.name)));
        }
    }
    ModelGraph::new(header.model, tensors)
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save_model(path: &Path, model: &ModelGraph) -> Result<()> {
    std::fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::ModelBuilder;
    use crate::model::InputSpec;

    fn toy() -> ModelGraph {
        ModelBuilder::new(InputSpec {
            channels: 1,
            height: 4,
            width: 4,
        })
        .conv_with(2, 3, 1, 1, |i| i as f32 * 0.1 - 0.5, |o| o as f32)
        .relu()
        .tap()
        .flatten()
        .build()
        .unwrap()
    }

    #[test]
    fn round_trip_three_layer_model() {
        let model = toy();
        let bytes = encode(&model).unwrap();
        assert_eq!(&bytes[..4], b"PXW1");
        let back = decode(&bytes).unwrap();
        assert_eq!(back.layers().len(), 3);
        assert_eq!(back.tensors(), model.tensors());
        assert_eq!(back.description(), model.description());
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn payloads_are_aligned() {
        let bytes = encode(&toy()).unwrap();
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: ContainerHeader = serde_json::from_slice(&bytes[16..16 + hl]).unwrap();
        let start = align_up(16 + hl);
        for e in &header.tensors {
            assert_eq!((start + e.offset as usize) % 64, 0);
        }
    }

    #[test]
    fn wrong_magic_is_unrecognized() {
        let mut bytes = encode(&toy()).unwrap();
        bytes[0] = b'X';
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("unrecognized container"), "{err}");
    }

    #[test]
    fn bad_version_and_truncation() {
        let mut bytes = encode(&toy()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedVersion(9))));
        let bytes = encode(&toy()).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - ALIGN]), Err(Error::Truncated(_))));
        assert!(matches!(decode(&bytes[..20]), Err(Error::Truncated(_))));
    }

    #[test]
    fn declared_shape_disagreeing_with_stored_tensor() {
        let model = toy();
        let mut header: ContainerHeader = {
            let bytes = encode(&model).unwrap();
            let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
            serde_json::from_slice(&bytes[16..16 + hl]).unwrap()
        };
        if let crate::model::LayerSpec::Conv2d { kernel, .. } = &mut header.model.layers[0] {
            *kernel = 2;
        }
        let mut desc = header.model.clone();
        desc.tap_points = vec![1];
        let err = ModelGraph::new(desc, model.tensors().clone()).unwrap_err();
        assert!(err.to_string().contains("shape mismatch at layer 0"), "{err}");
    }

    #[test]
    fn rejects_other_layouts() {
        let model = toy();
        let bytes = encode(&model).unwrap();
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[16..16 + hl]).unwrap();
        let swapped = text.replace("channels_first", "channels_lastx");
        let mut patched = bytes.clone();
        patched[16..16 + hl].copy_from_slice(swapped.as_bytes());
        assert!(matches!(decode(&patched), Err(Error::Header(_))));
    }
}
