//! Checkpoint container.
//!
//! Layout: the 8-byte magic `XFERCKPT`, a little-endian u64 manifest length,
//! the JSON manifest, then every parameter as little-endian f64 in manifest
//! order. The manifest records offsets, shapes and a SHA-256 of the blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::util;

const MAGIC: &[u8; 8] = b"XFERCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

/// Descriptive fields stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `"classifier"` or `"mlm"`.
    pub kind: String,
    /// Architecture config of the model, as JSON.
    pub model: serde_json::Value,
    pub seed: u64,
    pub config_hash: String,
    pub vocab_fingerprint: String,
    /// Free-form tag, e.g. the target domain of a language model.
    pub tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    #[serde(flatten)]
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
    blob_bytes: usize,
    blob_sha256: String,
}

pub fn encode(meta: &CheckpointMeta, params: &ParamSet) -> Result<Vec<u8>> {
    if let Some(bad) = params.first_non_finite() {
        return Err(Error::NonFinite(format!("parameter {bad}")));
    }
    let mut blob = Vec::with_capacity(params.num_params() * 8);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        meta: meta.clone(),
        params: entries,
        blob_bytes: blob.len(),
        blob_sha256: util::sha256_hex(&blob),
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(CheckpointMeta, ParamSet)> {
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if len > body.len() {
        return Err(bad("truncated manifest".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let blob = &body[len..];
    if blob.len() != manifest.blob_bytes {
        return Err(bad(format!(
            "blob is {} bytes, manifest says {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    if util::sha256_hex(blob) != manifest.blob_sha256 {
        return Err(bad("blob checksum mismatch".into()));
    }

    let mut params = ParamSet::new();
    let mut expected_offset = 0;
    for entry in &manifest.params {
        if entry.offset != expected_offset {
            return Err(bad(format!("parameter {} has offset {}, expected {expected_offset}", entry.name, entry.offset)));
        }
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n * 8;
        if end > blob.len() {
            return Err(bad(format!("parameter {} runs past the blob", entry.name)));
        }
        let data: Vec<f64> = blob[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("parameter {} holds non-finite values", entry.name)));
        }
        params
            .insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)
            .map_err(|e| bad(e.to_string()))?;
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(bad("trailing bytes after last parameter".into()));
    }
    Ok((manifest.meta, params))
}

pub fn save(path: &Path, meta: &CheckpointMeta, params: &ParamSet) -> Result<()> {
    util::write_atomic(path, &encode(meta, params)?)
}

pub fn load(path: &Path) -> Result<(CheckpointMeta, ParamSet)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (CheckpointMeta, ParamSet) {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 1e-300]).unwrap())
            .unwrap();
        p.insert("b", Tensor::scalar(0.25)).unwrap();
        let meta = CheckpointMeta {
            kind: "classifier".into(),
            model: serde_json::json!({"hidden": 4}),
            seed: 7,
            config_hash: "abc".into(),
            vocab_fingerprint: "def".into(),
            tag: Some("health".into()),
        };
        (meta, p)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (meta, p) = sample();
        let bytes = encode(&meta, &p).unwrap();
        let (m2, p2) = decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(p2, p);
        assert_eq!(encode(&m2, &p2).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let (meta, p) = sample();
        let bytes = encode(&meta, &p).unwrap();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(matches!(
            decode(&flipped, Path::new("x")),
            Err(Error::Checkpoint { .. })
        ));
        assert!(decode(&bytes[..bytes.len() - 8], Path::new("x")).is_err());
        assert!(decode(b"garbage", Path::new("x")).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'Y';
        assert!(decode(&bad_magic, Path::new("x")).is_err());
    }

    #[test]
    fn manifest_shape_tampering_is_detected() {
        let (meta, p) = sample();
        let bytes = encode(&meta, &p).unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = String::from_utf8(bytes[16..16 + len].to_vec()).unwrap();
        let tampered = json.replacen("\"shape\": [\n        2,\n        2\n      ]", "\"shape\": [\n        2,\n        1\n      ]", 1);
        assert_ne!(tampered, json);
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(tampered.len() as u64).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[16 + len..]);
        assert!(decode(&out, Path::new("x")).is_err());
    }
}
