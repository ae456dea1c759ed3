//! Checkpoint serialization.
//!
//! Layout: one line of JSON (no interior newlines) holding the version, an
//! opaque config value, and a parameter manifest with shapes and byte
//! offsets; then little-endian f32 arrays packed in manifest order. Offsets
//! are relative to the first byte after the header's terminating newline.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use super::params::ParameterStore;
use super::tensor::{Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing header line")]
    MissingHeader,
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("manifest entry {name:?}: {reason}")]
    BadManifest { name: String, reason: String },
    #[error("payload is {actual} bytes, manifest wants {expected}")]
    PayloadSize { expected: usize, actual: usize },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Element count.
    pub len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub config: serde_json::Value,
    pub params: Vec<ManifestEntry>,
}

/// Serializes a parameter store (values cast to f32) behind a JSON header.
pub fn to_bytes<S: Scalar>(store: &ParameterStore<S>, config: serde_json::Value) -> Vec<u8> {
    let mut params = Vec::with_capacity(store.len());
    let mut offset = 0usize;
    for (path, p) in store.iter() {
        let len = p.value.numel();
        params.push(ManifestEntry {
            name: path.to_string(),
            shape: p.value.shape().to_vec(),
            offset,
            len,
        });
        offset += len * 4;
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        config,
        params,
    };
    let mut out = serde_json::to_string(&header)
        .expect("header serialization cannot fail")
        .into_bytes();
    out.push(b'\n');
    out.reserve(offset);
    for (_, p) in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

/// Parses checkpoint bytes into the header and named tensors. Strict about
/// every length and offset; never panics on hostile input.
pub fn from_bytes<S: Scalar>(
    bytes: &[u8],
) -> Result<(Header, BTreeMap<String, Tensor<S>>), CheckpointError> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(CheckpointError::MissingHeader)?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(header.version));
    }
    let payload = &bytes[newline + 1..];
    let mut tensors = BTreeMap::new();
    let mut expected = 0usize;
    for entry in &header.params {
        let numel: usize = entry.shape.iter().try_fold(1usize, |acc, &d| {
            acc.checked_mul(d)
        })
        .ok_or_else(|| CheckpointError::BadManifest {
            name: entry.name.clone(),
            reason: "shape overflows".into(),
        })?;
        if numel != entry.len {
            return Err(CheckpointError::BadManifest {
                name: entry.name.clone(),
                reason: format!("shape {:?} disagrees with len {}", entry.shape, entry.len),
            });
        }
        if entry.offset != expected {
            return Err(CheckpointError::BadManifest {
                name: entry.name.clone(),
                reason: format!("offset {} is not contiguous (expected {expected})", entry.offset),
            });
        }
        let nbytes = entry
            .len
            .checked_mul(4)
            .ok_or_else(|| CheckpointError::BadManifest {
                name: entry.name.clone(),
                reason: "byte length overflows".into(),
            })?;
        let end = entry
            .offset
            .checked_add(nbytes)
            .ok_or_else(|| CheckpointError::BadManifest {
                name: entry.name.clone(),
                reason: "offset overflows".into(),
            })?;
        if end > payload.len() {
            return Err(CheckpointError::PayloadSize {
                expected: end,
                actual: payload.len(),
            });
        }
        if tensors.contains_key(&entry.name) {
            return Err(CheckpointError::BadManifest {
                name: entry.name.clone(),
                reason: "duplicate parameter name".into(),
            });
        }
        let mut data = Vec::with_capacity(entry.len);
        for chunk in payload[entry.offset..end].chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            data.push(S::from_f64(v as f64));
        }
        let tensor = Tensor::from_vec(&entry.shape, data).map_err(|e| {
            CheckpointError::BadManifest {
                name: entry.name.clone(),
                reason: e.to_string(),
            }
        })?;
        tensors.insert(entry.name.clone(), tensor);
        expected = end;
    }
    if expected != payload.len() {
        return Err(CheckpointError::PayloadSize {
            expected,
            actual: payload.len(),
        });
    }
    Ok((header, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> ParameterStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new(1);
        store.insert("b.bias", Tensor::rand_uniform(&mut rng, &[3], -1.0, 1.0));
        store.insert("a.weight", Tensor::rand_uniform(&mut rng, &[2, 3], -1.0, 1.0));
        store
    }

    #[test]
    fn round_trip_preserves_values_and_config() {
        let store = sample_store();
        let config = serde_json::json!({"d_model": 16, "note": "test"});
        let bytes = to_bytes(&store, config.clone());
        let (header, tensors) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(header.version, CHECKPOINT_VERSION);
        assert_eq!(header.config, config);
        assert_eq!(header.params.len(), 2);
        // manifest order is sorted by path
        assert_eq!(header.params[0].name, "a.weight");
        for (path, p) in store.iter() {
            assert_eq!(tensors[path], p.value);
        }
    }

    #[test]
    fn identical_stores_serialize_identically() {
        let a = to_bytes(&sample_store(), serde_json::json!({}));
        let b = to_bytes(&sample_store(), serde_json::json!({}));
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = to_bytes(&sample_store(), serde_json::json!({}));
        let cut = &bytes[..bytes.len() - 2];
        assert!(matches!(
            from_bytes::<f32>(cut),
            Err(CheckpointError::PayloadSize { .. })
        ));
    }

    #[test]
    fn garbage_is_rejected_not_panicked() {
        assert!(from_bytes::<f32>(b"").is_err());
        assert!(from_bytes::<f32>(b"not json\n").is_err());
        assert!(from_bytes::<f32>(b"{\"version\":9,\"config\":null,\"params\":[]}\n").is_err());
        // shape/len disagreement
        let bad = b"{\"version\":1,\"config\":null,\"params\":[{\"name\":\"w\",\"shape\":[2],\"offset\":0,\"len\":3}]}\n\x00\x00\x00\x00";
        assert!(from_bytes::<f32>(bad).is_err());
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = to_bytes(&sample_store(), serde_json::json!({}));
        bytes.extend_from_slice(&[0u8; 4]);
        assert!(matches!(
            from_bytes::<f32>(&bytes),
            Err(CheckpointError::PayloadSize { .. })
        ));
    }
}
