//! Variable snapshots on disk.
//!
//! A checkpoint `id` is two files in one directory: `payload-<id>.bin`, the
//! concatenated little-endian variable payloads, and `manifest-<id>`, one
//! tab-separated line per variable:
//!
//! ```text
//! name  dtype  shape  offset  length  crc32c
//! x     f64    [4]    0       32      1a2b3c4d
//! ```
//!
//! The payload is written and renamed into place first; the manifest is
//! renamed last, so a checkpoint exists exactly when its manifest does.

use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use flowhpc_core::{DType, Shape, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {id}: manifest missing in {dir}")]
    ManifestMissing { id: u64, dir: PathBuf },
    #[error("checkpoint {id}: checksum mismatch for `{name}`")]
    ChecksumMismatch { id: u64, name: String },
    #[error("checkpoint {id}: malformed manifest line {line}: {reason}")]
    Malformed { id: u64, line: usize, reason: String },
    #[error("variable name `{0}` cannot be stored in a manifest")]
    InvalidName(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Shape,
    pub offset: u64,
    pub length: u64,
    pub crc32c: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointManifest {
    pub id: u64,
    pub entries: Vec<ManifestEntry>,
}

pub fn manifest_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("manifest-{id}"))
}

pub fn payload_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("payload-{id}.bin"))
}

fn format_shape(s: &Shape) -> String {
    let dims: Vec<String> = s.dims().iter().map(ToString::to_string).collect();
    format!("[{}]", dims.join(","))
}

fn parse_shape(s: &str) -> Option<Shape> {
    let inner = s.strip_prefix('[')?.strip_suffix(']')?;
    let dims = if inner.is_empty() {
        Vec::new()
    } else {
        inner.split(',').map(|d| d.parse().ok()).collect::<Option<Vec<usize>>>()?
    };
    Shape::new(dims).ok()
}

fn sync_dir(dir: &Path) {
    // Best effort: not every filesystem supports syncing a directory handle.
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

impl CheckpointManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{:08x}\n",
                e.name,
                e.dtype.name(),
                format_shape(&e.shape),
                e.offset,
                e.length,
                e.crc32c
            ));
        }
        out
    }

    pub fn parse(id: u64, text: &str) -> Result<CheckpointManifest, CheckpointError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |reason: &str| CheckpointError::Malformed { id, line: i + 1, reason: reason.into() };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            let entry = ManifestEntry {
                name: f[0].to_string(),
                dtype: DType::from_name(f[1]).ok_or_else(|| bad("unknown dtype"))?,
                shape: parse_shape(f[2]).ok_or_else(|| bad("bad shape"))?,
                offset: f[3].parse().map_err(|_| bad("bad offset"))?,
                length: f[4].parse().map_err(|_| bad("bad length"))?,
                crc32c: u32::from_str_radix(f[5], 16).map_err(|_| bad("bad checksum"))?,
            };
            if entry.length != (entry.shape.num_elements() * entry.dtype.size_of()) as u64 {
                return Err(bad("length does not match shape"));
            }
            entries.push(entry);
        }
        Ok(CheckpointManifest { id, entries })
    }
}

/// Write `variables` as checkpoint `id` in `dir`.
pub fn save(dir: &Path, id: u64, variables: &[(String, Tensor)]) -> Result<CheckpointManifest, CheckpointError> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(variables.len());
    let payload_tmp = dir.join(format!(".payload-{id}.bin.tmp"));
    {
        let mut f = File::create(&payload_tmp)?;
        let mut offset = 0u64;
        for (name, t) in variables {
            if name.is_empty() || name.contains(['\t', '\n', '\r']) {
                return Err(CheckpointError::InvalidName(name.clone()));
            }
            let bytes = t.le_bytes();
            f.write_all(&bytes)?;
            entries.push(ManifestEntry {
                name: name.clone(),
                dtype: t.dtype(),
                shape: t.shape().clone(),
                offset,
                length: bytes.len() as u64,
                crc32c: crc32c::crc32c(&bytes),
            });
            offset += bytes.len() as u64;
        }
        f.sync_all()?;
    }
    fs::rename(&payload_tmp, payload_path(dir, id))?;

    let manifest = CheckpointManifest { id, entries };
    let manifest_tmp = dir.join(format!(".manifest-{id}.tmp"));
    {
        let mut f = File::create(&manifest_tmp)?;
        f.write_all(manifest.to_text().as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&manifest_tmp, manifest_path(dir, id))?;
    sync_dir(dir);
    Ok(manifest)
}

pub fn read_manifest(dir: &Path, id: u64) -> Result<CheckpointManifest, CheckpointError> {
    let text = match fs::read_to_string(manifest_path(dir, id)) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CheckpointError::ManifestMissing { id, dir: dir.to_path_buf() })
        }
        Err(e) => return Err(e.into()),
    };
    CheckpointManifest::parse(id, &text)
}

/// Load checkpoint `id`, verifying every checksum.
pub fn restore(dir: &Path, id: u64) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let manifest = read_manifest(dir, id)?;
    let mut f = File::open(payload_path(dir, id))?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let mut buf = vec![0u8; e.length as usize];
        f.seek(SeekFrom::Start(e.offset))?;
        f.read_exact(&mut buf)?;
        if crc32c::crc32c(&buf) != e.crc32c {
            return Err(CheckpointError::ChecksumMismatch { id, name: e.name.clone() });
        }
        let t = Tensor::from_le_bytes(e.dtype, e.shape.clone(), &buf)
            .map_err(|err| CheckpointError::Malformed { id, line: 0, reason: err.to_string() })?;
        out.push((e.name.clone(), t));
    }
    Ok(out)
}

/// Ids of complete checkpoints in `dir`, ascending.
pub fn list(dir: &Path) -> Result<Vec<u64>, CheckpointError> {
    let mut ids = Vec::new();
    let rd = match fs::read_dir(dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(ids),
        Err(e) => return Err(e.into()),
    };
    for entry in rd {
        let name = entry?.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_prefix("manifest-")).and_then(|n| n.parse().ok()) {
            ids.push(id);
        }
    }
    ids.sort_unstable();
    Ok(ids)
}
