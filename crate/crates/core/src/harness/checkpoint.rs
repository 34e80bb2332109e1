use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::models::{Architecture, ModelParams};
use crate::rng::RngState;
use crate::scalar::Scalar;

use super::HarnessError;

pub const MAGIC: &[u8; 5] = b"HYPB1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where one tensor lives in the payload. Offsets are in bytes from the payload start.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    /// SHA-256 of the tensor's little-endian bytes.
    pub sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    arch: Architecture,
    meta: serde_json::Value,
    manifest: Vec<ManifestEntry>,
    rng: Option<RngState>,
    step: usize,
}

/// Named tensors plus enough context to rebuild the object they came from.
///
/// On disk: the magic bytes, a little-endian `u64` header length, the JSON
/// header, then every tensor as little-endian `f64` in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    /// Kind-specific fields (run configuration, asset type, ...).
    pub meta: serde_json::Value,
    pub tensors: IndexMap<String, Tensor<f64>>,
    pub rng: Option<RngState>,
    pub step: usize,
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn tensor_bytes(t: &Tensor<f64>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Checkpoint {
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), offset, sha256: digest(&tensor_bytes(t)) };
                offset += 8 * t.numel() as u64;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            arch: self.arch.clone(),
            meta: self.meta.clone(),
            manifest: self.manifest(),
            rng: self.rng.clone(),
            step: self.step,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(13 + header.len() + 8 * self.tensors.values().map(Tensor::numel).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            out.extend(tensor_bytes(t));
        }
        out
    }

    /// Parses and validates a serialized checkpoint. `what` names the source in errors.
    pub fn from_bytes(bytes: &[u8], what: &Path) -> Result<Self, HarnessError> {
        let bad = |detail: String| HarnessError::Checkpoint { path: what.to_path_buf(), detail };
        if bytes.len() < 13 || &bytes[..5] != MAGIC {
            return Err(bad("not a checkpoint (bad magic bytes)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
        let body = &bytes[13..];
        if hlen > body.len() as u64 {
            return Err(bad(format!("truncated header ({hlen} bytes declared, {} present)", body.len())));
        }
        let (head, payload) = body.split_at(hlen as usize);
        let version: u32 = serde_json::from_slice::<serde_json::Value>(head)
            .ok()
            .and_then(|v| v.get("version")?.as_u64())
            .ok_or_else(|| bad("header has no version".into()))? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {version} (expected {CHECKPOINT_VERSION})")));
        }
        let header: Header = serde_json::from_slice(head).map_err(|e| bad(format!("corrupt header: {e}")))?;
        let mut expected = 0u64;
        let mut tensors = IndexMap::new();
        for e in &header.manifest {
            if e.offset != expected {
                let kind = if e.offset < expected { "overlaps its predecessor" } else { "leaves a gap" };
                return Err(bad(format!("corrupt manifest: `{}` at offset {} {kind} (expected {expected})", e.name, e.offset)));
            }
            let len = 8 * e.shape.iter().product::<usize>() as u64;
            let end = expected + len;
            if end > payload.len() as u64 {
                return Err(bad(format!("truncated payload: `{}` needs bytes {expected}..{end}, file has {}", e.name, payload.len())));
            }
            let raw = &payload[expected as usize..end as usize];
            if digest(raw) != e.sha256 {
                return Err(bad(format!("checksum mismatch for `{}`", e.name)));
            }
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| bad(format!("`{}`: {err}", e.name)))?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(bad(format!("duplicate tensor `{}`", e.name)));
            }
            expected = end;
        }
        if expected != payload.len() as u64 {
            return Err(bad(format!("{} trailing payload bytes", payload.len() as u64 - expected)));
        }
        Ok(Self { arch: header.arch, meta: header.meta, tensors, rng: header.rng, step: header.step })
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(HarnessError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let bytes = std::fs::read(path).map_err(HarnessError::io(path))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta.get("kind")?.as_str()
    }
}

pub(crate) fn to_f64<T: Scalar>(t: &Tensor<T>) -> Tensor<f64> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.f64()).collect()).expect("same shape")
}

pub(crate) fn from_f64<T: Scalar>(t: &Tensor<f64>) -> Tensor<T> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| T::of(v)).collect()).expect("same shape")
}

/// Stores a single network as a `params` checkpoint tagged with `asset`.
pub fn save_params<T: Scalar>(params: &ModelParams<T>, asset: &str, path: &Path) -> Result<(), HarnessError> {
    Checkpoint {
        arch: params.arch().clone(),
        meta: serde_json::json!({ "kind": "params", "asset": asset }),
        tensors: params.tensors().iter().map(|(k, t)| (k.clone(), to_f64(t))).collect(),
        rng: None,
        step: 0,
    }
    .save(path)
}

pub fn load_params<T: Scalar>(path: &Path) -> Result<ModelParams<T>, HarnessError> {
    let ck = Checkpoint::load(path)?;
    if ck.kind() != Some("params") {
        return Err(HarnessError::Checkpoint { path: path.to_path_buf(), detail: format!("expected a network checkpoint, found {:?}", ck.kind()) });
    }
    let tensors = ck.tensors.iter().map(|(k, t)| (k.clone(), from_f64(t))).collect();
    Ok(ModelParams::new(ck.arch, tensors)?)
}
