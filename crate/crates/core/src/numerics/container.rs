//! Binary container for named parameter tensors.
//!
//! Layout (all integers little-endian u32 unless noted):
//!
//! ```text
//! magic   4 bytes  "PSVD"
//! version u32      currently 1
//! count   u32      number of tensors
//! then per tensor:
//!   name_len u32, name (UTF-8)
//!   rank     u32, extents (u32 each)
//!   values   f32 little-endian, row-major, product(extents) of them
//! ```
//!
//! Round-trips are bitwise: the f32 payload is written verbatim.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::params::Parameter;
use crate::numerics::tensor::Tensor;

/// File signature of the parameter container.
pub const PARAMS_MAGIC: [u8; 4] = *b"PSVD";
/// Current container version.
pub const PARAMS_VERSION: u32 = 1;

/// Writes parameters in their given order.
pub fn save_params(path: &Path, params: &[&Parameter]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);

    w.write_all(&PARAMS_MAGIC).map_err(io)?;
    w.write_all(&PARAMS_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(params.len() as u32).to_le_bytes()).map_err(io)?;
    for p in params {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name).map_err(io)?;
        w.write_all(&(p.value.shape().len() as u32).to_le_bytes()).map_err(io)?;
        for &extent in p.value.shape() {
            w.write_all(&(extent as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads a parameter container, returning `(name, tensor)` pairs in
/// file order.
pub fn load_params(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let magic = read_bytes::<4>(&mut r, path)?;
    if magic != PARAMS_MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}", magic)));
    }
    let version = read_u32(&mut r, path)?;
    if version != PARAMS_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r, path)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(|e| Error::io(path, e))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
        let rank = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0f32; len];
        let mut buf = [0u8; 4];
        for v in &mut data {
            r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            *v = f32::from_le_bytes(buf);
        }
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    // Trailing garbage means the writer and reader disagree on layout.
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(out),
        Ok(_) => Err(Error::format(path, "trailing bytes after last tensor")),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    Ok(u32::from_le_bytes(read_bytes::<4>(r, path)?))
}

fn read_bytes<const N: usize>(r: &mut impl Read, path: &Path) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}
