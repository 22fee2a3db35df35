//! Flat binary parameter snapshots.
//!
//! Layout: `AFCK`, version `u32`, tensor count `u32`, then for each tensor a
//! `u16` name length, the UTF-8 name, `u32` rows, `u32` cols and the values
//! as little-endian `f64`. All integers are little-endian.

use std::path::Path;

use crate::error::{AfError, Result};
use crate::numcore::{Matrix, ParamStore};
use crate::synthdata::ByteReader;

const MAGIC: &[u8; 4] = b"AFCK";
pub const VERSION: u32 = 1;

pub fn to_bytes(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 8 * store.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, m) in store.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| AfError::Format(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(AfError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(AfError::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| AfError::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if store.find(&name).is_some() {
            return Err(AfError::Format(format!("duplicate tensor {name}")));
        }
        store.add(name, Matrix::from_vec(rows, cols, data)?);
    }
    if r.pos != bytes.len() {
        return Err(AfError::Format("trailing bytes after the last tensor".into()));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(store)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    from_bytes(&std::fs::read(path)?)
}
