//! Packed float32 tensor blocks: `MMEB0001`, u32 count, u32 dim, then
//! `count * dim` little-endian f32 values row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const BLOCK_MAGIC: &[u8; 8] = b"MMEB0001";
const HEADER_LEN: usize = 16;

pub fn write_block(path: &Path, m: &Matrix) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + m.data().len() * 4);
    buf.extend_from_slice(BLOCK_MAGIC);
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_block(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path)?;
    decode_block(&bytes, &path.display().to_string())
}

pub fn decode_block(bytes: &[u8], name: &str) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Length(format!(
            "{name}: {} bytes is shorter than the block header",
            bytes.len()
        )));
    }
    if &bytes[..8] != BLOCK_MAGIC {
        return Err(Error::Format(format!(
            "{name}: expected magic MMEB0001, found {:?}",
            String::from_utf8_lossy(&bytes[..8])
        )));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = HEADER_LEN + count * dim * 4;
    if bytes.len() != expected {
        return Err(Error::Length(format!(
            "{name}: header declares {count}x{dim} values ({expected} bytes), file has {} bytes",
            bytes.len()
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Matrix::from_vec(count, dim, data)
}
