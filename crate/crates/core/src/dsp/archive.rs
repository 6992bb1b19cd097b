//! LMFB archive format: `"LMFB" | version u32 | T u32 | n_mels u32 |
//! T * n_mels f32 | crc32 u32`, little-endian, row-major by frame. The
//! trailing CRC-32 covers every preceding byte.

use std::path::Path;

use super::LmfbMatrix;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LMFB";
const VERSION: u32 = 1;
const HEADER: usize = 16;
const TRAILER: usize = 4;
const KIND: &str = "LMFB archive";

pub fn encode_lmfb(m: &LmfbMatrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER + 4 * m.values.len() + TRAILER);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.frames as u32).to_le_bytes());
    buf.extend_from_slice(&(m.n_mels as u32).to_le_bytes());
    for v in &m.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn decode_lmfb(bytes: &[u8]) -> Result<LmfbMatrix> {
    if bytes.len() < HEADER {
        return Err(Error::corrupt(KIND, format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::corrupt(KIND, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(Error::corrupt(KIND, format!("unsupported version {version}")));
    }
    let (frames, n_mels) = (word(8) as usize, word(12) as usize);
    let expected = frames
        .checked_mul(n_mels)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER + TRAILER))
        .ok_or_else(|| Error::corrupt(KIND, "header dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(Error::corrupt(
            KIND,
            format!("{frames}x{n_mels} needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let body = &bytes[..expected - TRAILER];
    if crc32fast::hash(body) != word(expected - TRAILER) {
        return Err(Error::corrupt(KIND, "checksum mismatch"));
    }
    let values: Vec<f32> = body[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::corrupt(KIND, format!("non-finite value at index {i}")));
    }
    LmfbMatrix::new(frames, n_mels, values)
}

pub fn write_lmfb(path: &Path, m: &LmfbMatrix) -> Result<()> {
    std::fs::write(path, encode_lmfb(m)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_lmfb(path: &Path) -> Result<LmfbMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_lmfb(&bytes)
}
