//! `TTEN` binary tensor container: magic, version, dtype, rank, little-endian
//! `u32` dims, then the raw little-endian `f32` payload.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const TTEN_MAGIC: &[u8; 4] = b"TTEN";
pub const TTEN_VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::ShapeMismatch("rank > 255".into()))?;
    w.write_all(TTEN_MAGIC)?;
    w.write_all(&[TTEN_VERSION, DTYPE_F32, rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::ShapeMismatch(format!("dim {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::CorruptTensor(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 7];
    read_exact(r, &mut head, "header")?;
    if &head[..4] != TTEN_MAGIC {
        return Err(Error::CorruptTensor("bad magic".into()));
    }
    if head[4] != TTEN_VERSION {
        return Err(Error::VersionMismatch(format!("tensor version {}", head[4])));
    }
    if head[5] != DTYPE_F32 {
        return Err(Error::VersionMismatch(format!("tensor dtype {}", head[5])));
    }
    let rank = head[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 4];
        read_exact(r, &mut d, "dims")?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0 && n <= (1 << 31))
        .ok_or_else(|| Error::CorruptTensor(format!("implausible shape {shape:?}")))?;
    let mut raw = vec![0u8; numel * 4];
    read_exact(r, &mut raw, "payload")?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(shape, data).map_err(|e| Error::CorruptTensor(e.to_string()))
}
