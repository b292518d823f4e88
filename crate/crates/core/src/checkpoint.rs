//! `.ntm` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! u64            manifest byte length (including the trailing '\n')
//! [u8; len]      UTF-8 JSON manifest followed by '\n'
//! [u8; ...]      payload: raw f32 values, tensors concatenated in manifest order
//! ```
//!
//! Offsets in the manifest are relative to the start of the payload and must
//! tile it exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NamedTensorMap, Tensor};

pub const EXTENSION: &str = "ntm";
const DTYPE: &str = "f32";
const PREFIX: usize = 8;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    length: usize,
}

pub fn to_bytes(map: &NamedTensorMap) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(map.len());
    let mut offset = 0;
    for (name, t) in map.iter() {
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let length = t.len() * 4;
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: DTYPE.into(),
            offset,
            length,
        });
        offset += length;
    }
    let manifest = Manifest {
        tensors: entries,
        metadata: map.metadata().clone(),
    };
    let mut json = serde_json::to_vec(&manifest)?;
    json.push(b'\n');

    let mut out = Vec::with_capacity(PREFIX + json.len() + offset);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in map.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<NamedTensorMap> {
    if bytes.len() < PREFIX {
        return Err(Error::Manifest {
            position: bytes.len(),
            message: "file shorter than the 8-byte length prefix".into(),
        });
    }
    let mut prefix = [0u8; PREFIX];
    prefix.copy_from_slice(&bytes[..PREFIX]);
    let manifest_len = u64::from_le_bytes(prefix) as usize;
    let manifest_end = PREFIX.checked_add(manifest_len).filter(|&e| e <= bytes.len());
    let Some(manifest_end) = manifest_end else {
        return Err(Error::Manifest {
            position: PREFIX,
            message: format!("manifest length {manifest_len} exceeds file size {}", bytes.len()),
        });
    };
    let raw = &bytes[PREFIX..manifest_end];
    if raw.last() != Some(&b'\n') {
        return Err(Error::Manifest {
            position: manifest_end.saturating_sub(1),
            message: "manifest is not newline-terminated".into(),
        });
    }
    let manifest: Manifest =
        serde_json::from_slice(&raw[..raw.len() - 1]).map_err(|e| Error::Manifest {
            position: PREFIX + byte_position(raw, e.line(), e.column()),
            message: e.to_string(),
        })?;

    let payload = &bytes[manifest_end..];
    validate_layout(&manifest, payload.len())?;

    let mut map = NamedTensorMap::new();
    for entry in manifest.tensors {
        let chunk = &payload[entry.offset..entry.offset + entry.length];
        let data: Vec<f32> = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(entry.name));
        }
        let tensor = Tensor::new(entry.shape, data)?;
        map.insert(entry.name, tensor)?;
    }
    for (k, v) in manifest.metadata {
        map.set_meta(k, v);
    }
    Ok(map)
}

fn validate_layout(manifest: &Manifest, payload_len: usize) -> Result<()> {
    let mut spans = Vec::with_capacity(manifest.tensors.len());
    let mut declared = 0usize;
    for e in &manifest.tensors {
        if e.dtype != DTYPE {
            return Err(Error::InvalidTensor(format!(
                "tensor `{}` has unsupported dtype `{}`",
                e.name, e.dtype
            )));
        }
        let numel: usize = e.shape.iter().product();
        if e.length != numel * 4 {
            return Err(Error::InvalidTensor(format!(
                "tensor `{}`: shape {:?} needs {} bytes, manifest says {}",
                e.name,
                e.shape,
                numel * 4,
                e.length
            )));
        }
        declared += e.length;
        spans.push((e.offset, e.length));
    }
    if declared != payload_len {
        return Err(Error::LengthMismatch {
            expected: declared,
            found: payload_len,
        });
    }
    spans.sort_unstable();
    let mut cursor = 0;
    for (offset, length) in spans {
        if offset != cursor {
            return Err(Error::InvalidTensor(format!(
                "payload spans overlap or leave a gap at byte {cursor}"
            )));
        }
        cursor += length;
    }
    Ok(())
}

fn byte_position(raw: &[u8], line: usize, column: usize) -> usize {
    let mut pos = 0;
    for _ in 1..line {
        match raw[pos..].iter().position(|&b| b == b'\n') {
            Some(i) => pos += i + 1,
            None => return raw.len(),
        }
    }
    (pos + column.saturating_sub(1)).min(raw.len())
}

pub fn save_checkpoint(map: &NamedTensorMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(map)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NamedTensorMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_encoding_is_ieee_le() {
        let mut m = NamedTensorMap::new();
        m.insert("w", Tensor::vector(&[1.0, 2.0]).unwrap()).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let payload = &bytes[bytes.len() - 8..];
        assert_eq!(payload, &[0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40]);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.get("w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn empty_map_has_empty_payload() {
        let bytes = to_bytes(&NamedTensorMap::new()).unwrap();
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + len);
        assert_eq!(bytes[8 + len - 1], b'\n');
        assert!(from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn truncated_payload_is_length_mismatch() {
        let manifest = br#"{"tensors":[{"name":"w","shape":[3],"dtype":"f32","offset":0,"length":12}]}
"#;
        let mut bytes = (manifest.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(manifest);
        bytes.extend_from_slice(&[0u8; 8]);
        let err = from_bytes(&bytes).unwrap_err();
        assert!(
            matches!(err, Error::LengthMismatch { expected: 12, found: 8 }),
            "{err}"
        );
    }

    #[test]
    fn malformed_manifest_reports_position() {
        let manifest = b"{\"tensors\": [oops]}\n";
        let mut bytes = (manifest.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(manifest);
        match from_bytes(&bytes).unwrap_err() {
            Error::Manifest { position, .. } => assert!((8..8 + manifest.len()).contains(&position)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn overlapping_offsets_rejected() {
        let manifest = br#"{"tensors":[{"name":"a","shape":[1],"dtype":"f32","offset":0,"length":4},{"name":"b","shape":[1],"dtype":"f32","offset":0,"length":4}]}
"#;
        let mut bytes = (manifest.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(manifest);
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(from_bytes(&bytes).is_err());
    }

    #[test]
    fn metadata_survives() {
        let mut m = NamedTensorMap::new();
        m.insert("x", Tensor::vector(&[0.5]).unwrap()).unwrap();
        m.set_meta("kind", "task_vector");
        let back = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back.meta("kind"), Some("task_vector"));
    }
}
