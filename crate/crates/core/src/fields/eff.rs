//! EFF ensemble file format.
//!
//! Little-endian layout:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `ENSF` |
//! | 4     | u32 version (1) |
//! | 16    | u32 T, M, H, W |
//! | 4 + n | u32 name length, UTF-8 variable name |
//! | 4·T·M·H·W | f32 values, `[day][member][row][col]` |
//!
//! Day labels (and the optional seasonal phase) live in a JSON sidecar at
//! `<path>.meta.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EnsembleDataset;
use crate::error::{Error, Result};

pub const EFF_MAGIC: [u8; 4] = *b"ENSF";
pub const EFF_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    day_labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    season_phase: Option<Vec<f64>>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Serializes the dataset to EFF bytes (values cast to f32).
pub fn encode(ds: &EnsembleDataset) -> Vec<u8> {
    let name = ds.variable_name.as_bytes();
    let mut out = Vec::with_capacity(32 + name.len() + 4 * ds.values().len());
    out.extend_from_slice(&EFF_MAGIC);
    for v in [
        EFF_VERSION,
        ds.n_days as u32,
        ds.n_members as u32,
        ds.height as u32,
        ds.width as u32,
        name.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(name);
    for &v in ds.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::TruncatedPayload {
                expected: end,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses EFF bytes; day labels default to integer indices.
pub fn decode(bytes: &[u8]) -> Result<EnsembleDataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != EFF_MAGIC {
        return Err(Error::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = r.u32()?;
    if version != EFF_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: EFF_VERSION,
        });
    }
    let (t, m, h, w) = (
        r.u32()? as usize,
        r.u32()? as usize,
        r.u32()? as usize,
        r.u32()? as usize,
    );
    let name_len = r.u32()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|e| Error::InvalidArgument(format!("variable name is not UTF-8: {e}")))?;
    let count = t
        .checked_mul(m)
        .and_then(|x| x.checked_mul(h))
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| Error::InvalidArgument("header dimensions overflow".into()))?;
    let payload = r.take(4 * count)?;
    let mut values = Vec::with_capacity(count);
    for (i, c) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(Error::NonFiniteValue(i));
        }
        values.push(f64::from(v));
    }
    EnsembleDataset::new(name, t, m, h, w, values)
}

/// Writes the EFF file and its metadata sidecar.
pub fn write_eff(ds: &EnsembleDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(ds))?;
    let meta = Sidecar {
        day_labels: ds.day_labels.clone(),
        season_phase: ds.season_phase.clone(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Reads an EFF file, picking up the sidecar when present.
pub fn read_eff(path: impl AsRef<Path>) -> Result<EnsembleDataset> {
    let path = path.as_ref();
    let mut ds = decode(&std::fs::read(path)?)?;
    let side = sidecar_path(path);
    if side.exists() {
        let meta: Sidecar = serde_json::from_str(&std::fs::read_to_string(side)?)?;
        ds = ds.with_day_labels(meta.day_labels)?;
        if let Some(p) = meta.season_phase {
            ds = ds.with_season_phase(p)?;
        }
    }
    Ok(ds)
}
