//! Binary container for one 2-D tensor, dense `f32` or NF4-quantized.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MRAGTNSR" | version u32 | dtype u8 | rows u64 | cols u64 | payload
//! ```
//!
//! The dense payload is `rows * cols` row-major `f32`. The NF4 payload is
//! `block_size u32 | dq u8 | codes (u64 len + bytes)` followed by either
//! `u64 n + n f32` scales or `meta_block u32 | u64 n + n i8 | u64 m + m f32`.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::nf4::{Absmax, DoubleQuant, QuantError, QuantizedTensor};

pub const MAGIC: &[u8; 8] = b"MRAGTNSR";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_NF4: u8 = 1;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("not a tensor file (bad magic)")]
    BadMagic,
    #[error("unsupported tensor file version {0}")]
    Version(u32),
    #[error("unknown dtype tag {0}")]
    DType(u8),
    #[error("malformed tensor file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Dense { rows: usize, cols: usize, data: Vec<f32> },
    Nf4(QuantizedTensor),
}

impl Tensor {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Tensor::Dense { rows, cols, .. } => (*rows, *cols),
            Tensor::Nf4(q) => (q.rows, q.cols),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    put_u64(out, vs.len() as u64);
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let (rows, cols) = t.shape();
    match t {
        Tensor::Dense { data, .. } => {
            out.push(DTYPE_F32);
            put_u64(&mut out, rows as u64);
            put_u64(&mut out, cols as u64);
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Tensor::Nf4(q) => {
            out.push(DTYPE_NF4);
            put_u64(&mut out, rows as u64);
            put_u64(&mut out, cols as u64);
            put_u32(&mut out, q.block_size as u32);
            match &q.absmax {
                Absmax::Plain(scales) => {
                    out.push(0);
                    put_u64(&mut out, q.codes.len() as u64);
                    out.extend_from_slice(&q.codes);
                    put_f32s(&mut out, scales);
                }
                Absmax::Double(dq) => {
                    out.push(1);
                    put_u64(&mut out, q.codes.len() as u64);
                    out.extend_from_slice(&q.codes);
                    put_u32(&mut out, dq.meta_block as u32);
                    put_u64(&mut out, dq.q8_codes.len() as u64);
                    out.extend(dq.q8_codes.iter().map(|&c| c as u8));
                    put_f32s(&mut out, &dq.meta_scales);
                }
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorFileError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| TensorFileError::Malformed(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TensorFileError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, TensorFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TensorFileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, TensorFileError> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| TensorFileError::Malformed(format!("length {n} exceeds file size")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, TensorFileError> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| TensorFileError::Malformed("overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(buf: &[u8]) -> Result<Tensor, TensorFileError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8).map_err(|_| TensorFileError::BadMagic)? != MAGIC {
        return Err(TensorFileError::BadMagic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(TensorFileError::Version(version));
    }
    let dtype = c.u8()?;
    let rows = usize::try_from(c.u64()?).map_err(|_| TensorFileError::Malformed("rows overflow".into()))?;
    let cols = usize::try_from(c.u64()?).map_err(|_| TensorFileError::Malformed("cols overflow".into()))?;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| TensorFileError::Malformed("shape overflow".into()))?;
    let tensor = match dtype {
        DTYPE_F32 => Tensor::Dense {
            rows,
            cols,
            data: c.f32s(n)?,
        },
        DTYPE_NF4 => {
            let block_size = c.u32()? as usize;
            let dq = c.u8()?;
            let ncodes = c.len()?;
            let codes = c.take(ncodes)?.to_vec();
            let absmax = match dq {
                0 => {
                    let k = c.len()?;
                    Absmax::Plain(c.f32s(k)?)
                }
                1 => {
                    let meta_block = c.u32()? as usize;
                    let k = c.len()?;
                    let q8_codes = c.take(k)?.iter().map(|&b| b as i8).collect();
                    let m = c.len()?;
                    Absmax::Double(DoubleQuant {
                        q8_codes,
                        meta_block,
                        meta_scales: c.f32s(m)?,
                    })
                }
                other => return Err(TensorFileError::Malformed(format!("bad double-quant flag {other}"))),
            };
            let q = QuantizedTensor {
                rows,
                cols,
                block_size,
                codes,
                absmax,
            };
            q.validate()?;
            Tensor::Nf4(q)
        }
        other => return Err(TensorFileError::DType(other)),
    };
    if c.pos != buf.len() {
        return Err(TensorFileError::Malformed(format!(
            "{} trailing bytes",
            buf.len() - c.pos
        )));
    }
    Ok(tensor)
}

pub fn write(path: &Path, t: &Tensor) -> Result<(), TensorFileError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(t))?;
    f.sync_all()?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor, TensorFileError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}
