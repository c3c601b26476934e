//! Versioned binary container for parameter arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes   "NAUGCKPT"
//! version u32       CONTAINER_VERSION
//! hlen    u64       length of the JSON header
//! header  hlen      UTF-8 JSON: {"kind", "meta", "blocks": [lengths]}
//! data    8·Σ len   f64 little-endian, blocks back to back
//! ```
//!
//! Floats are stored as raw bits, so a save/load round trip is bit-exact.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AppearanceTable, FieldConfig, RadianceField};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NAUGCKPT";
pub const CONTAINER_VERSION: u32 = 1;
pub const FIELD_KIND: &str = "radiance-field";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    blocks: Vec<usize>,
}

pub fn write_container(path: &Path, kind: &str, meta: Value, blocks: &[&[f64]]) -> Result<()> {
    let header = Header {
        kind: kind.to_string(),
        meta,
        blocks: blocks.iter().map(|b| b.len()).collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for block in blocks {
        for v in *block {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_container(path: &Path, kind: &str) -> Result<(Value, Vec<Vec<f64>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CONTAINER_VERSION {
        return Err(corrupt(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(corrupt("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    if header.kind != kind {
        return Err(corrupt(&format!("expected a {kind} checkpoint, found {}", header.kind)));
    }
    let data = &body[hlen..];
    let total: usize = header.blocks.iter().sum();
    if data.len() != total * 8 {
        return Err(corrupt("data length does not match the block table"));
    }
    let mut values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let blocks = header
        .blocks
        .iter()
        .map(|&n| values.by_ref().take(n).collect())
        .collect();
    Ok((header.meta, blocks))
}

#[derive(Serialize, Deserialize)]
struct FieldMeta {
    config: FieldConfig,
    labels: Vec<String>,
}

impl RadianceField {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(FieldMeta {
            config: self.config.clone(),
            labels: self.appearance.labels.clone(),
        })
        .map_err(|e| Error::Data(e.to_string()))?;
        let blocks: Vec<&[f64]> = self.param_slices().into_iter().map(|(_, s)| s).collect();
        write_container(path, FIELD_KIND, meta, &blocks)
    }

    pub fn load(path: &Path) -> Result<RadianceField> {
        let (meta, blocks) = read_container(path, FIELD_KIND)?;
        Self::from_parts(meta, blocks)
            .map_err(|m| Error::Data(format!("{}: {m}", path.display())))
    }

    /// Rebuilds a field from checkpoint metadata and flat parameter blocks.
    pub(crate) fn from_parts(meta: Value, blocks: Vec<Vec<f64>>) -> std::result::Result<Self, String> {
        let meta: FieldMeta = serde_json::from_value(meta).map_err(|e| e.to_string())?;
        meta.config.validate().map_err(|e| e.to_string())?;
        let mut field = RadianceField::new(meta.config, meta.labels, 0).map_err(|e| e.to_string())?;
        let mut slots = field.param_slices_mut();
        if slots.len() != blocks.len() {
            return Err(format!("expected {} blocks, found {}", slots.len(), blocks.len()));
        }
        for (k, ((_, dst), src)) in slots.iter_mut().zip(&blocks).enumerate() {
            if dst.len() != src.len() {
                return Err(format!("block {k}: expected {} values, found {}", dst.len(), src.len()));
            }
            dst.copy_from_slice(src);
        }
        Ok(field)
    }
}

impl AppearanceTable {
    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) || rows.len() != labels.len() {
            return Err(Error::Data("ragged appearance table".into()));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let embeddings = Array2::from_shape_vec((labels.len(), dim), flat)
            .map_err(|e| Error::Data(e.to_string()))?;
        Ok(Self { embeddings, labels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_round_trip_is_bit_exact() {
        let config = FieldConfig {
            resolutions: vec![4, 6],
            features: 2,
            density_hidden: vec![8],
            density_features: 3,
            color_hidden: vec![8],
            appearance_dim: 2,
            sh_degree: 1,
            scene_bound: 0.7,
        };
        let field = RadianceField::new(config, vec!["a".into(), "b".into()], 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ckpt");
        field.save(&path).unwrap();
        let back = RadianceField::load(&path).unwrap();
        assert_eq!(field, back);
        let bytes = fs::read(&path).unwrap();
        back.save(&path).unwrap();
        assert_eq!(bytes, fs::read(&path).unwrap());
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(RadianceField::load(&path).is_err());
        write_container(&path, "other", Value::Null, &[&[1.0, 2.0]]).unwrap();
        assert!(RadianceField::load(&path).is_err());
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(read_container(&path, "other").is_err());
    }
}
