//! Binary tensor encoding: rank (u32), dims (u32 each), then f32 values,
//! all little-endian.

use std::io::{self, Read, Write};

use eendcd_core::numerics::Tensor;

const MAX_RANK: u32 = 8;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> io::Result<()> {
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.data().len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn invalid(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

pub fn read_tensor<R: Read>(r: &mut R) -> io::Result<Tensor<f32>> {
    let rank = read_u32(r)?;
    if rank == 0 || rank > MAX_RANK {
        return Err(invalid(format!("tensor rank {rank} out of range")));
    }
    let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<io::Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= u32::MAX as usize)
        .ok_or_else(|| invalid(format!("tensor shape {shape:?} too large")))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(&shape, data).map_err(|e| invalid(e.to_string()))
}
