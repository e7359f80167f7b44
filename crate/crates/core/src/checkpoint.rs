//! Binary checkpoints.
//!
//! Layout: `MAGIC`, a little-endian u64 header length, a JSON header
//! `{format_version, config, manifest: [{name, shape, offset}]}`, then every
//! tensor as raw little-endian f64. Offsets are in bytes from the start of
//! the data section.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DualPathModel, ModelConfig, ParamSet};

pub const MAGIC: &[u8; 8] = b"ACRODIS\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: ModelConfig,
    pub manifest: Vec<ManifestEntry>,
}

pub fn to_bytes(model: &DualPathModel) -> Vec<u8> {
    let mut manifest = Vec::new();
    let mut data = Vec::new();
    for (name, _, t) in model.params.named() {
        manifest.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            offset: data.len() as u64,
        });
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        manifest,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let bad = |d: &str| Error::malformed("checkpoint", d);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json)?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format_version {}", header.format_version)));
    }
    Ok((header, &bytes[16 + len..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<DualPathModel> {
    let bad = |d: String| Error::malformed("checkpoint", d);
    let (header, data) = read_header(bytes)?;
    header.config.validate()?;
    let mut params = ParamSet::zeros(&header.config);
    let entries: BTreeMap<&str, &ManifestEntry> = header.manifest.iter().map(|e| (e.name.as_str(), e)).collect();
    if entries.len() != header.manifest.len() {
        return Err(bad("duplicate tensor names".into()));
    }
    let mut used = 0;
    for (name, _, t) in params.named_mut() {
        let e = entries.get(name.as_str()).ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if e.shape != t.shape() {
            return Err(bad(format!("{name}: shape {:?}, expected {:?}", e.shape, t.shape())));
        }
        let start = e.offset as usize;
        let raw = data
            .get(start..start + 8 * t.len())
            .ok_or_else(|| bad(format!("{name}: data out of range")))?;
        for (v, b) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
        used += 1;
    }
    if used != entries.len() {
        return Err(bad("manifest has tensors the config does not define".into()));
    }
    Ok(DualPathModel {
        config: header.config,
        params,
    })
}

pub fn save(model: &DualPathModel, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<DualPathModel> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PathMode;

    #[test]
    fn roundtrip_is_exact() {
        let m = DualPathModel::new(ModelConfig::toy(300, 200, PathMode::Dual), 9).unwrap();
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back), bytes);
        let (h, _) = read_header(&bytes).unwrap();
        assert_eq!(h.format_version, 1);
        assert!(h.manifest.iter().any(|e| e.name == "a.token_embedding"));
    }

    #[test]
    fn single_path_roundtrip() {
        let m = DualPathModel::new(ModelConfig::toy(100, 80, PathMode::BOnly), 1).unwrap();
        assert_eq!(from_bytes(&to_bytes(&m)).unwrap(), m);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let m = DualPathModel::new(ModelConfig::toy(100, 80, PathMode::AOnly), 1).unwrap();
        let bytes = to_bytes(&m);
        assert!(from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(from_bytes(b"nope").is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(from_bytes(&wrong).is_err());
    }
}
