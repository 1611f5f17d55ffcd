//! CMOT1 binary tensor records.
//!
//! Layout: 5-byte magic `CMOT1`, u8 dtype (0 = f32, 1 = f64), u8 rank,
//! rank little-endian u32 extents, then the row-major little-endian payload.
//! Used for weights, datasets and test fixtures.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: &[u8; 5] = b"CMOT1";

pub fn write_record<W: Write, T: Scalar>(w: &mut W, tensor: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(7 + 4 * tensor.rank() + tensor.numel() * T::WIDTH);
    buf.extend_from_slice(MAGIC);
    buf.push(T::DTYPE as u8);
    buf.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)
        .map_err(|e| Error::Format(format!("tensor write failed: {e}")))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::UnexpectedEnd(what.to_string())
        } else {
            Error::Format(format!("tensor read failed: {e}"))
        }
    })
}

pub fn read_record<R: Read, T: Scalar>(r: &mut R) -> Result<Tensor<T>> {
    let mut magic = [0u8; 5];
    read_exact(r, &mut magic, "tensor magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad tensor magic {:?}, expected CMOT1",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut head = [0u8; 2];
    read_exact(r, &mut head, "tensor header")?;
    let dtype = Dtype::from_code(head[0])?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "tensor dtype {:?} does not match requested {:?}",
            dtype,
            T::DTYPE
        )));
    }
    let rank = head[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut ext = [0u8; 4];
        read_exact(r, &mut ext, "tensor extents")?;
        shape.push(u32::from_le_bytes(ext) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * T::WIDTH];
    read_exact(r, &mut payload, "tensor payload")?;
    let data = payload
        .chunks_exact(T::WIDTH)
        .map(T::read_le)
        .collect::<Vec<T>>();
    Tensor::new(shape, data)
}

pub fn write_file<T: Scalar>(path: &Path, tensor: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_record(&mut buf, tensor)?;
    super::write_atomic(path, &buf)
}

pub fn read_file<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_record(&mut bytes.as_slice())
}
