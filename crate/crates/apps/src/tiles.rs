//! TIL1 tile files.
//!
//! Layout: magic `TIL1`, dtype u8, tile row u32, tile col u32, edge u32, then
//! the raw little-endian row-major payload of an `edge × edge` matrix.
//! `edge = 0` marks a non-square tile: `rows u32, cols u32` follow, and
//! `cols = 0` means a rank-1 vector of `rows` elements.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use flowhpc_core::codec;
use flowhpc_core::{DType, Shape, Tensor};

use crate::error::AppError;

pub const MAGIC: &[u8; 4] = b"TIL1";

#[derive(Clone, Debug, PartialEq)]
pub struct TileRecord {
    pub row: u32,
    pub col: u32,
    pub tensor: Tensor,
}

fn u32_of(v: usize, path: &Path) -> Result<u32, AppError> {
    u32::try_from(v).map_err(|_| AppError::BadTile { path: path.to_path_buf(), reason: format!("extent {v} exceeds u32") })
}

pub fn encode_header(row: u32, col: u32, t: &Tensor, path: &Path) -> Result<Vec<u8>, AppError> {
    let mut h = Vec::with_capacity(25);
    h.extend_from_slice(MAGIC);
    h.push(t.dtype().tag());
    codec::put_u32(&mut h, row);
    codec::put_u32(&mut h, col);
    let dims = t.shape().dims();
    match dims {
        [r, c] if r == c && *r > 0 => codec::put_u32(&mut h, u32_of(*r, path)?),
        [r, c] if *r > 0 && *c > 0 => {
            codec::put_u32(&mut h, 0);
            codec::put_u32(&mut h, u32_of(*r, path)?);
            codec::put_u32(&mut h, u32_of(*c, path)?);
        }
        [n] => {
            codec::put_u32(&mut h, 0);
            codec::put_u32(&mut h, u32_of(*n, path)?);
            codec::put_u32(&mut h, 0);
        }
        _ => {
            return Err(AppError::BadTile {
                path: path.to_path_buf(),
                reason: format!("shape {} has no tile encoding", t.shape()),
            })
        }
    }
    Ok(h)
}

pub fn write_tile(path: &Path, row: u32, col: u32, t: &Tensor) -> Result<(), AppError> {
    let header = encode_header(row, col, t, path)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&header)?;
    w.write_all(&t.le_bytes())?;
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(())
}

pub fn read_tile(path: &Path) -> Result<TileRecord, AppError> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(AppError::MissingTileFile(path.to_path_buf())),
        Err(e) => return Err(e.into()),
    };
    let file_len = f.metadata()?.len();
    let mut r = BufReader::new(f);
    let bad = |reason: String| AppError::BadTile { path: path.to_path_buf(), reason };
    let mut fixed = [0u8; 17];
    r.read_exact(&mut fixed).map_err(|_| bad("truncated header".into()))?;
    if &fixed[..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let dtype = DType::from_tag(fixed[4]).map_err(|e| bad(e.to_string()))?;
    let word = |i: usize| u32::from_le_bytes(fixed[i..i + 4].try_into().unwrap());
    let (row, col, edge) = (word(5), word(9), word(13));
    let (shape, header_len) = if edge > 0 {
        (Shape::matrix(edge as usize, edge as usize), 17)
    } else {
        let mut ext = [0u8; 8];
        r.read_exact(&mut ext).map_err(|_| bad("truncated header".into()))?;
        let rows = u32::from_le_bytes(ext[..4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(ext[4..].try_into().unwrap()) as usize;
        (if cols == 0 { Shape::vector(rows) } else { Shape::matrix(rows, cols) }, 25)
    };
    let expected = (shape.num_elements() * dtype.size_of()) as u64;
    if file_len != header_len + expected {
        return Err(bad(format!("payload is {} bytes, header implies {expected}", file_len.saturating_sub(header_len))));
    }
    let mut t = Tensor::zeros(dtype, shape);
    match t.le_bytes_mut() {
        Some(buf) => r.read_exact(buf)?,
        None => unreachable!("fresh tensor"),
    }
    Ok(TileRecord { row, col, tensor: t })
}

/// One recorded tile file access.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileAccess {
    pub actor: String,
    pub file: String,
    pub write: bool,
}

pub type AuditLog = Arc<Mutex<Vec<TileAccess>>>;

/// Tile directory with optional access auditing.
#[derive(Clone, Debug)]
pub struct TileStore {
    dir: PathBuf,
    actor: String,
    audit: Option<AuditLog>,
}

impl TileStore {
    pub fn new(dir: impl Into<PathBuf>) -> TileStore {
        TileStore { dir: dir.into(), actor: String::new(), audit: None }
    }

    /// Record every access under `actor` in `log`.
    pub fn audited(dir: impl Into<PathBuf>, actor: impl Into<String>, log: AuditLog) -> TileStore {
        TileStore { dir: dir.into(), actor: actor.into(), audit: Some(log) }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn note(&self, file: &str, write: bool) {
        if let Some(log) = &self.audit {
            log.lock().unwrap().push(TileAccess { actor: self.actor.clone(), file: file.to_string(), write });
        }
    }

    pub fn read(&self, file: &str) -> Result<TileRecord, AppError> {
        self.note(file, false);
        read_tile(&self.path(file))
    }

    pub fn write(&self, file: &str, row: u32, col: u32, t: &Tensor) -> Result<(), AppError> {
        fs::create_dir_all(&self.dir)?;
        self.note(file, true);
        write_tile(&self.path(file), row, col, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowhpc_core::random::random_uniform;

    #[test]
    fn square_rectangular_and_vector_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (i, t) in [
            random_uniform(&Shape::matrix(4, 4), DType::F32, 1),
            random_uniform(&Shape::matrix(3, 5), DType::F64, 2),
            random_uniform(&Shape::vector(8), DType::C128, 3),
        ]
        .into_iter()
        .enumerate()
        {
            let p = dir.path().join(format!("t{i}.til"));
            write_tile(&p, 2, 7, &t).unwrap();
            let back = read_tile(&p).unwrap();
            assert_eq!((back.row, back.col), (2, 7));
            assert!(back.tensor.bit_identical(&t));
        }
    }

    #[test]
    fn square_header_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.til");
        write_tile(&p, 1, 2, &Tensor::identity_f32(2)).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..17], &[b'T', b'I', b'L', b'1', 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(bytes.len(), 17 + 16);
    }

    #[test]
    fn truncated_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.til");
        write_tile(&p, 0, 0, &Tensor::identity_f32(3)).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_tile(&p), Err(AppError::BadTile { .. })));
        assert!(matches!(read_tile(&dir.path().join("nope.til")), Err(AppError::MissingTileFile(_))));
    }
}
