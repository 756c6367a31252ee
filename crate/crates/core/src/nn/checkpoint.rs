//! Checkpoint file: 8-byte magic, u32 LE header length, JSON header, then
//! every parameter as little-endian f32 in [`Module::params`] order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncDec, Module, PatchClassifier};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FTCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: String,
    pub arch: serde_json::Value,
    pub param_lens: Vec<usize>,
    pub param_hash: String,
    pub config_hash: String,
}

pub fn save_checkpoint<M: Module + ?Sized>(path: &Path, model: &M, config_hash: &str) -> Result<()> {
    let header = CheckpointHeader {
        kind: model.kind().to_string(),
        arch: model.arch(),
        param_lens: model.params().iter().map(|p| p.len()).collect(),
        param_hash: model.param_hash(),
        config_hash: config_hash.to_string(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(12 + json.len() + 4 * model.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in model.params() {
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads only the header.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse(&bytes)?.0)
}

fn parse(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + n)
        .ok_or_else(|| Error::CorruptCheckpoint("header truncated".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)
        .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    Ok((header, &bytes[12 + n..]))
}

/// Loads parameters into `model`, which must have the same kind and layout.
pub fn load_checkpoint<M: Module + ?Sized>(path: &Path, model: &mut M) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, payload) = parse(&bytes)?;
    if header.kind != model.kind() || header.arch != model.arch() {
        return Err(Error::CorruptCheckpoint(format!(
            "checkpoint is {} {}, expected {} {}",
            header.kind,
            header.arch,
            model.kind(),
            model.arch()
        )));
    }
    let lens: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    if lens != header.param_lens {
        return Err(Error::CorruptCheckpoint("parameter layout differs".into()));
    }
    let total: usize = lens.iter().sum();
    if payload.len() != 4 * total {
        return Err(Error::CorruptCheckpoint(format!(
            "expected {} parameter bytes, found {}",
            4 * total,
            payload.len()
        )));
    }
    let mut chunks = payload.chunks_exact(4);
    for p in model.params_mut() {
        for v in p.iter_mut() {
            *v = f32::from_le_bytes(chunks.next().unwrap().try_into().unwrap());
        }
    }
    if model.param_hash() != header.param_hash {
        return Err(Error::CorruptCheckpoint("parameter hash mismatch".into()));
    }
    Ok(header)
}

fn arch_fields(path: &Path, h: &CheckpointHeader, kind: &str) -> Result<(usize, [f32; 2])> {
    let bad = |m: &str| Error::CorruptCheckpoint(format!("{}: {m}", path.display()));
    if h.kind != kind {
        return Err(bad(&format!("holds a {}, expected a {kind}", h.kind)));
    }
    let width = h.arch["width"].as_u64().filter(|&w| w > 0).ok_or_else(|| bad("arch has no width"))?;
    let norm: [f32; 2] = serde_json::from_value(h.arch["input_norm"].clone()).map_err(|_| bad("arch has no input_norm"))?;
    if !(norm[1] > 0.0) {
        return Err(bad("input_norm scale must be > 0"));
    }
    Ok((width as usize, norm))
}

/// Builds an encoder-decoder of the stored architecture and loads it.
pub fn load_encdec(path: &Path) -> Result<(EncDec, CheckpointHeader)> {
    let h = read_checkpoint_header(path)?;
    let (width, [shift, scale]) = arch_fields(path, &h, "encdec")?;
    let mut m = EncDec::new(width, 0, 1.0, 0.0).with_input_norm(shift, scale);
    let h = load_checkpoint(path, &mut m)?;
    Ok((m, h))
}

/// Builds a patch classifier of the stored architecture and loads it.
pub fn load_classifier(path: &Path) -> Result<(PatchClassifier, CheckpointHeader)> {
    let h = read_checkpoint_header(path)?;
    let (width, [shift, scale]) = arch_fields(path, &h, "patch-classifier")?;
    let mut m = PatchClassifier::new(width, 0).with_input_norm(shift, scale);
    let h = load_checkpoint(path, &mut m)?;
    Ok((m, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        let net = EncDec::new(3, 42, 0.1, -1.0);
        save_checkpoint(&path, &net, "abc").unwrap();
        let mut other = EncDec::new(3, 0, 1.0, 0.0);
        let h = load_checkpoint(&path, &mut other).unwrap();
        assert_eq!(h.config_hash, "abc");
        assert_eq!(other, net);
        assert_eq!(other.param_hash(), net.param_hash());
    }

    #[test]
    fn loaders_rebuild_the_stored_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("s.ckpt"), dir.path().join("c.ckpt"));
        let net = EncDec::new(3, 42, 0.1, -1.0).with_input_norm(0.37, 0.21);
        let cls = PatchClassifier::new(2, 5).with_input_norm(0.1, 0.3);
        save_checkpoint(&a, &net, "h").unwrap();
        save_checkpoint(&b, &cls, "h").unwrap();
        assert_eq!(load_encdec(&a).unwrap().0, net);
        assert_eq!(load_classifier(&b).unwrap().0, cls);
        assert!(matches!(load_encdec(&b), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn rejects_wrong_kind_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&path, &PatchClassifier::new(2, 1), "").unwrap();
        let mut net = EncDec::new(2, 1, 1.0, 0.0);
        assert!(matches!(load_checkpoint(&path, &mut net), Err(Error::CorruptCheckpoint(_))));

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let mut c = PatchClassifier::new(2, 1);
        assert!(matches!(load_checkpoint(&path, &mut c), Err(Error::CorruptCheckpoint(_))));
        fs::write(&path, b"nonsense").unwrap();
        assert!(matches!(load_checkpoint(&path, &mut c), Err(Error::CorruptCheckpoint(_))));
    }
}
