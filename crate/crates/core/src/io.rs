//! On-disk formats: LDNF field files, JSON documents and checkpoints.
//!
//! An LDNF file is the magic `LDNF`, a `u32` version, a `u32` rank, the
//! `u32` dimensions and then the row-major values as `f64`, everything
//! little-endian regardless of the host.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::lordnet::ParamSet;
use crate::model::{ModelConfig, Network};

pub const FIELD_MAGIC: &[u8; 4] = b"LDNF";
pub const FIELD_VERSION: u32 = 1;

pub fn encode_field(f: &Field) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * f.ndim() + 8 * f.len());
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&FIELD_VERSION.to_le_bytes());
    out.extend_from_slice(&(f.ndim() as u32).to_le_bytes());
    for &d in f.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in f.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_field(bytes: &[u8], path: &Path) -> Result<Field> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| bad(format!("truncated header at byte {at}")))
    };
    if bytes.len() < 12 || &bytes[..4] != FIELD_MAGIC {
        return Err(bad("missing LDNF magic".into()));
    }
    let version = word(4)?;
    if version != FIELD_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let ndim = word(8)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for k in 0..ndim {
        shape.push(word(12 + 4 * k)? as usize);
    }
    let start = 12 + 4 * ndim;
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| bad("dimension product overflows".into()))?;
    let payload = &bytes[start.min(bytes.len())..];
    if Some(payload.len()) != count.checked_mul(8) {
        return Err(bad(format!(
            "payload has {} bytes, dimensions {shape:?} need {}",
            payload.len(),
            count.saturating_mul(8)
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Field::new(shape, data)
}

pub fn write_field(path: &Path, f: &Field) -> Result<()> {
    write_bytes(path, &encode_field(f))
}

pub fn read_field(path: &Path) -> Result<Field> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_field(&bytes, path)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

/// Parses JSON, reporting the path of the offending key on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().to_string())
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text)
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set, in
/// which case the old contents are removed first.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                return Err(Error::config(
                    "output_dir",
                    format!("{} already exists; pass --force to overwrite", dir.display()),
                ));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Training iterations completed when the checkpoint was written.
    pub iteration: usize,
    pub params: Vec<ParamEntry>,
}

/// Writes `manifest.json` and one `params/<name>.ldnf` per parameter.
pub fn save_checkpoint(dir: &Path, net: &Network, iteration: usize) -> Result<()> {
    let mut entries = Vec::with_capacity(net.params.len());
    for (name, f) in &net.params {
        let file = PathBuf::from("params").join(format!("{name}.ldnf"));
        write_field(&dir.join(&file), f)?;
        entries.push(ParamEntry {
            name: name.clone(),
            shape: f.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        format_version: FIELD_VERSION,
        model: net.config.clone(),
        iteration,
        params: entries,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Network, usize)> {
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    let mut params = ParamSet::new();
    for e in &manifest.params {
        let f = read_field(&dir.join(&e.file))?;
        if f.shape() != e.shape.as_slice() {
            return Err(Error::config(
                "checkpoint",
                format!("`{}` has shape {:?}, manifest says {:?}", e.name, f.shape(), e.shape),
            ));
        }
        params.insert(e.name.clone(), f);
    }
    Ok((Network::from_parts(manifest.model, params)?, manifest.iteration))
}
