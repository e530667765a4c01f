//! Binary checkpoint format.
//!
//! ```text
//! magic    b"PCNCKPT\0"
//! version  u32 LE
//! count    u32 LE
//! count x { name_len u32 | name utf8 | ndim u32 | dims u32 x ndim | payload f32 LE x prod(dims) }
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PCNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes every entry without reference to a model layout.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let remaining = bytes.len() - r.position() as usize;
        if n.checked_mul(4).is_none_or(|b| b > remaining) {
            return Err(Error::Format(format!("truncated payload for {name}")));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b)?;
            data.push(f32::from_le_bytes(b));
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    if (r.position() as usize) != bytes.len() {
        return Err(Error::Format("trailing bytes after last entry".into()));
    }
    Ok(entries)
}

pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

/// Loads into an existing layout. Every name must be present with the same
/// shape; nothing is modified unless the whole file validates.
pub fn load_into(params: &mut ParamSet, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_bytes_into(params, &bytes)
}

pub fn load_bytes_into(params: &mut ParamSet, bytes: &[u8]) -> Result<()> {
    let entries = decode(bytes)?;
    if entries.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            entries.len(),
            params.len()
        )));
    }
    let mut staged = params.clone();
    for (name, t) in entries {
        let id = staged
            .id(&name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        let dst = staged.get_mut(id);
        if dst.shape() != t.shape() {
            return Err(Error::dim("checkpoint", dst.shape(), t.shape()));
        }
        dst.data_mut().copy_from_slice(t.data());
    }
    *params = staged;
    Ok(())
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("unexpected end of checkpoint".into()))
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
