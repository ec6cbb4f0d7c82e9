//! Binary parameter checkpoints.
//!
//! Layout: magic `UCLP`, `u32` version, `u32` segment count, then for every
//! segment its name, rank, shape and values (all little endian), followed by
//! a trailing `u64` value count used as a truncation check.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::{LayoutBuilder, ParamLayout, ParamVector};

const MAGIC: &[u8; 4] = b"UCLP";
const VERSION: u32 = 1;

pub fn write_params<W: Write>(w: &mut W, params: &ParamVector) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let layout = params.layout();
    w.write_all(&(layout.segments().len() as u32).to_le_bytes())?;
    for seg in layout.segments() {
        let name = seg.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(seg.shape.len() as u32).to_le_bytes())?;
        for &d in &seg.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &params.values()[seg.offset..seg.offset + seg.len] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

/// Reads a checkpoint, rebuilding the layout stored in it.
pub fn read_params<R: Read>(r: &mut R) -> Result<ParamVector> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a parameter checkpoint".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n_seg = read_u32(r)? as usize;
    let mut builder = LayoutBuilder::new();
    let mut values = Vec::new();
    for _ in 0..n_seg {
        let name_len = read_u32(r)? as usize;
        if name_len > 4096 {
            return Err(Error::Format("segment name too long".into()));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("segment name is not utf-8".into()))?;
        let rank = read_u32(r)? as usize;
        if rank > 3 {
            return Err(Error::Format(format!("segment `{name}` has rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<_>>()?;
        let len: usize = shape.iter().product();
        for _ in 0..len {
            values.push(f64::from_le_bytes(read_u64(r)?.to_le_bytes()));
        }
        builder.push(name, &shape);
    }
    let total = read_u64(r)? as usize;
    if total != values.len() {
        return Err(Error::Format(format!(
            "value count {} does not match trailer {total}",
            values.len()
        )));
    }
    ParamVector::from_values(builder.finish(), values)
}

/// Writes to a temporary file next to `path` and renames it into place.
pub fn save_params(path: &Path, params: &ParamVector) -> Result<()> {
    let mut buf = Vec::new();
    write_params(&mut buf, params)?;
    write_atomic(path, &buf)
}

/// Loads a checkpoint and checks it against the expected architecture.
pub fn load_params(path: &Path, layout: &Arc<ParamLayout>) -> Result<ParamVector> {
    let bytes = std::fs::read(path)?;
    let loaded = read_params(&mut bytes.as_slice())?;
    if loaded.layout().as_ref() != layout.as_ref() {
        return Err(Error::Format(format!(
            "{} was written for a different architecture",
            path.display()
        )));
    }
    ParamVector::from_values(layout.clone(), loaded.values().to_vec())
}
