//! Single-file model checkpoints.
//!
//! Layout: one JSON header line followed by the raw tensors, each as
//! row-major 32-bit little-endian floats in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    /// Model-specific extras (e.g. the speaker label order).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// SHA-256 hex of a config's canonical JSON form.
pub fn config_hash<C: Serialize>(cfg: &C) -> Result<String> {
    let v = serde_json::to_value(cfg)?;
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
}

pub fn encode<C: Serialize>(kind: &str, cfg: &C, extra: serde_json::Value, params: &ParamStore) -> Result<Vec<u8>> {
    let tensors = params
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.to_string(),
            shape: [t.rows(), t.cols()],
        })
        .collect();
    let header = Header {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        config_hash: config_hash(cfg)?,
        config: serde_json::to_value(cfg)?,
        extra,
        tensors,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for (_, t) in params.iter() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save<C: Serialize>(
    path: &Path,
    kind: &str,
    cfg: &C,
    extra: serde_json::Value,
    params: &ParamStore,
) -> Result<()> {
    let bytes = encode(kind, cfg, extra, params)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// Parsed checkpoint: header plus tensors by header order.
pub struct Loaded {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

impl Loaded {
    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.header.config.clone()).map_err(|e| Error::Format(format!("checkpoint config: {e}")))
    }

    /// Copies tensor values into a store built from the same config. Names
    /// and shapes must match exactly.
    pub fn restore_into(&self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.tensors.len() {
            bail!(
                Format,
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                params.len()
            );
        }
        for (entry, t) in self.header.tensors.iter().zip(&self.tensors) {
            let Some(id) = params.find(&entry.name) else {
                bail!(Format, "checkpoint tensor {} unknown to the model", entry.name);
            };
            let dst = params.get_mut(id);
            if dst.shape() != t.shape() {
                bail!(
                    Format,
                    "tensor {}: shape {:?} vs model {:?}",
                    entry.name,
                    t.shape(),
                    dst.shape()
                );
            }
            *dst = t.clone();
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Loaded> {
    let Some(nl) = bytes.iter().position(|&b| b == b'\n') else {
        bail!(Format, "checkpoint header is not terminated");
    };
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        bail!(Format, "unsupported checkpoint schema {}", header.schema_version);
    }
    let mut body = &bytes[nl + 1..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n = e.shape[0] * e.shape[1];
        if body.len() < n * 4 {
            bail!(Format, "checkpoint truncated in tensor {}", e.name);
        }
        let data = body[..n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push(Tensor::from_vec(e.shape[0], e.shape[1], data));
        body = &body[n * 4..];
    }
    if !body.is_empty() {
        bail!(Format, "{} trailing bytes after checkpoint tensors", body.len());
    }
    Ok(Loaded { header, tensors })
}

pub fn load(path: &Path, expected_kind: &str) -> Result<Loaded> {
    let bytes = fs::read(path).map_err(|e| Error::State(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let loaded = decode(&bytes)?;
    if loaded.header.kind != expected_kind {
        bail!(
            Format,
            "{} holds a {} checkpoint, expected {expected_kind}",
            path.display(),
            loaded.header.kind
        );
    }
    let hash = config_hash(&loaded.header.config)?;
    if hash != loaded.header.config_hash {
        bail!(Format, "{}: config hash mismatch", path.display());
    }
    Ok(loaded)
}

/// Header of a checkpoint file without validating its tensors.
pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(|e| Error::State(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let Some(nl) = bytes.iter().position(|&b| b == b'\n') else {
        bail!(Format, "checkpoint header is not terminated");
    };
    serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))
}

/// SHA-256 hex of a checkpoint file.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Writes a training-state file: a JSON header line, then each block as
/// raw 64-bit little-endian floats. Unlike checkpoints, values are exact.
pub fn save_state(path: &Path, header: &serde_json::Value, blocks: &[Vec<f64>]) -> Result<()> {
    let wrapped = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "block_lengths": blocks.iter().map(Vec::len).collect::<Vec<_>>(),
        "meta": header,
    });
    let mut out = serde_json::to_vec(&wrapped)?;
    out.push(b'\n');
    for b in blocks {
        for v in b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, out)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<(serde_json::Value, Vec<Vec<f64>>)> {
    let bytes = fs::read(path).map_err(|e| Error::State(format!("cannot read state {}: {e}", path.display())))?;
    let Some(nl) = bytes.iter().position(|&b| b == b'\n') else {
        bail!(Format, "state header is not terminated");
    };
    #[derive(Deserialize)]
    struct Wrapped {
        schema_version: u32,
        block_lengths: Vec<usize>,
        meta: serde_json::Value,
    }
    let w: Wrapped = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Format(format!("state header: {e}")))?;
    if w.schema_version != SCHEMA_VERSION {
        bail!(Format, "unsupported state schema {}", w.schema_version);
    }
    let mut body = &bytes[nl + 1..];
    let mut blocks = Vec::with_capacity(w.block_lengths.len());
    for n in w.block_lengths {
        if body.len() < n * 8 {
            bail!(Format, "state file truncated");
        }
        blocks.push(
            body[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        );
        body = &body[n * 8..];
    }
    if !body.is_empty() {
        bail!(Format, "{} trailing bytes in state file", body.len());
    }
    Ok((w.meta, blocks))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.add("a", Tensor::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.25]));
        p.add("b", Tensor::row_vector(&[3.0]));
        p
    }

    #[test]
    fn round_trip() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("m.ckpt");
        save(
            &path,
            "toy",
            &serde_json::json!({"w": 2}),
            serde_json::Value::Null,
            &store(),
        )
        .unwrap();
        let l = load(&path, "toy").unwrap();
        let mut fresh = store();
        fresh.get_mut(fresh.find("a").unwrap()).scale_in_place(0.0);
        l.restore_into(&mut fresh).unwrap();
        assert_eq!(fresh, store());
        assert_eq!(l.header.tensors[0].shape, [2, 2]);
    }

    #[test]
    fn wrong_kind_and_truncation_are_format_errors() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("m.ckpt");
        save(&path, "toy", &1, serde_json::Value::Null, &store()).unwrap();
        assert!(matches!(load(&path, "asr"), Err(Error::Format(_))));
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn state_files_are_exact() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("s.state");
        let blocks = vec![vec![0.1, 1.0 / 3.0, -2e-300], vec![], vec![f64::MAX]];
        save_state(&path, &serde_json::json!({"epoch": 4}), &blocks).unwrap();
        let (meta, back) = load_state(&path).unwrap();
        assert_eq!(meta["epoch"], 4);
        assert_eq!(back, blocks);
    }

    #[test]
    fn tampered_config_is_detected() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("m.ckpt");
        save(
            &path,
            "toy",
            &serde_json::json!({"w": 2}),
            serde_json::Value::Null,
            &store(),
        )
        .unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let at = bytes.windows(5).position(|w| w == b"\"w\":2").unwrap();
        bytes[at + 4] = b'3';
        fs::write(&path, bytes).unwrap();
        assert!(load(&path, "toy").is_err());
    }
}
