//! The IRDT binary tensor file format.
//!
//! Layout: magic `IRDT`, u8 version (1), u8 dtype (0 = f64, 1 = f32),
//! u8 ndim, then ndim little-endian u32 extents, then the row-major
//! little-endian payload. Every tensor that crosses a process or file
//! boundary in this crate goes through this format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"IRDT";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }
}

/// Writes a tensor as f64 payload, the default precision.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_tensor_as(path, t, Dtype::F64)
}

/// Writes a tensor with an explicit payload precision. f32 narrows on write
/// and widens back on read; it exists only for compact interchange.
pub fn write_tensor_as(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&[VERSION, dtype.code()]).map_err(io)?;
    if t.ndim() > u8::MAX as usize {
        return Err(Error::format(path, format!("ndim {} exceeds u8", t.ndim())));
    }
    w.write_all(&[t.ndim() as u8]).map_err(io)?;
    for &e in t.shape() {
        if e > u32::MAX as usize {
            return Err(Error::format(path, format!("extent {e} exceeds u32")));
        }
        w.write_all(&(e as u32).to_le_bytes()).map_err(io)?;
    }
    match dtype {
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_tensor_from(&mut r, path)
}

fn read_tensor_from(r: &mut impl Read, path: &Path) -> Result<Tensor> {
    let io = |e| Error::io(path, e);
    let mut head = [0u8; 7];
    r.read_exact(&mut head).map_err(io)?;
    if &head[0..4] != MAGIC {
        return Err(Error::format(path, "bad magic, not an IRDT file"));
    }
    if head[4] != VERSION {
        return Err(Error::format(path, format!("unsupported version {}", head[4])));
    }
    let dtype = match head[5] {
        0 => Dtype::F64,
        1 => Dtype::F32,
        d => return Err(Error::format(path, format!("unknown dtype code {d}"))),
    };
    let ndim = head[6] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf).map_err(io)?;
        shape.push(u32::from_le_bytes(buf) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    match dtype {
        Dtype::F64 => {
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf).map_err(io)?;
                data.push(f64::from_le_bytes(buf));
            }
        }
        Dtype::F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf).map_err(io)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
    }
    // trailing garbage means the file was not produced by this writer
    let mut probe = [0u8; 1];
    if r.read(&mut probe).map_err(io)? != 0 {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Tensor::from_vec(shape, data)
}
