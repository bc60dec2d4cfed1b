//! Binary parameter checkpoints.
//!
//! Little-endian layout: magic `GNSP`, version `u32 = 1`, tensor count `u32`,
//! then per tensor: name length `u32`, UTF-8 name, rank `u32`, dims
//! `u32 × rank`, `f32` data. Values are widened back to `f64` on load.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{ParamStore, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"GNSP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("unsupported tensor rank {rank} for `{name}`")]
    Rank { name: String, rank: u32 },
    #[error("tensor name is not UTF-8")]
    Name,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn put_u32(w: &mut impl Write, x: u32) -> io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint(store: &ParamStore, w: &mut impl Write) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, store.len() as u32)?;
    for (name, t) in store.iter() {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, 2)?;
        put_u32(w, t.rows() as u32)?;
        put_u32(w, t.cols() as u32)?;
        let mut buf = Vec::with_capacity(t.data().len() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Read a checkpoint. Rank-1 tensors load as a single row; the store seed is
/// set to 0 since checkpoints do not carry it.
pub fn read_checkpoint(r: &mut impl Read) -> Result<ParamStore, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = get_u32(r)?;
    let mut store = ParamStore::new(0);
    for _ in 0..count {
        let len = get_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Name)?;
        let rank = get_u32(r)?;
        let dims: Vec<usize> = (0..rank)
            .map(|_| get_u32(r).map(|d| d as usize))
            .collect::<Result<_, _>>()?;
        let (rows, cols) = match dims.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => return Err(CheckpointError::Rank { name, rank }),
        };
        let mut raw = vec![0u8; rows * cols * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        store.insert(&name, Tensor::new(rows, cols, data)?)?;
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_checkpoint(store, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore, CheckpointError> {
    let bytes = fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}
