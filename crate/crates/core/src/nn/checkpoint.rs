//! Binary weight-file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  b"CSTSCKPT"
//! version  u32      1
//! dtype    u8       4 = f32, 8 = f64
//! meta_len u32      followed by UTF-8 JSON metadata
//! count    u32      number of named tensors, then per tensor:
//!   name_len u32, name bytes, ndim u32, dims (u64 each), raw LE data
//! ```
//!
//! Values round-trip bit-exactly: raw IEEE bytes are stored unmodified.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 8] = b"CSTSCKPT";
const VERSION: u32 = 1;

pub fn write_checkpoint<T: Element, W: Write>(
    mut w: W,
    meta_json: &str,
    tensors: &[(String, Tensor<T>)],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(T::DTYPE_TAG);
    let meta = meta_json.as_bytes();
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut buf);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<T: Element, R: Read>(mut r: R) -> Result<(String, Vec<(String, Tensor<T>)>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = Cursor::new(&buf);
    if cur.take_bytes(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = cur.take_u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let dtype = cur.take_bytes(1)?[0];
    if dtype != T::DTYPE_TAG {
        return Err(Error::Checkpoint(format!(
            "checkpoint dtype tag {dtype} does not match requested precision ({})",
            T::DTYPE_TAG
        )));
    }
    let meta_len = cur.take_u32()? as usize;
    let meta = String::from_utf8(cur.take_bytes(meta_len)?.to_vec())
        .map_err(|e| Error::Checkpoint(format!("metadata is not UTF-8: {e}")))?;
    let count = cur.take_u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.take_u32()? as usize;
        let name = String::from_utf8(cur.take_bytes(name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?;
        let ndim = cur.take_u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.take_u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take_bytes(numel * T::BYTE_WIDTH)?;
        let data = raw
            .chunks_exact(T::BYTE_WIDTH)
            .map(T::read_le)
            .collect::<Vec<_>>();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok((meta, tensors))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take_bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take_bytes(4)?.try_into().unwrap()))
    }

    fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take_bytes(8)?.try_into().unwrap()))
    }
}
