//! IDX file parsing (the MNIST container format), gzip or raw.

use crate::error::{Error, Result};
use flate2::read::GzDecoder;
use std::io::Read;
use std::path::Path;

const MAGIC_IMAGES: u32 = 0x0000_0803;
const MAGIC_LABELS: u32 = 0x0000_0801;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|source| Error::DataIo {
        path: path.to_path_buf(),
        source,
    })?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|source| Error::DataIo { path: path.to_path_buf(), source })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data(format!("{}: truncated header", path.display())))
}

pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

/// Parse an images file (magic 0x00000803): big-endian header
/// [magic, n, rows, cols] followed by n*rows*cols bytes.
pub fn read_images(path: &Path) -> Result<IdxImages> {
    let bytes = read_bytes(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != MAGIC_IMAGES {
        return Err(Error::Data(format!(
            "{}: magic {magic:#010x}, expected {MAGIC_IMAGES:#010x} (images)",
            path.display()
        )));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: {} bytes, header promises {expected}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(IdxImages { count, rows, cols, pixels: bytes[16..].to_vec() })
}

/// Parse a labels file (magic 0x00000801).
pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_bytes(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != MAGIC_LABELS {
        return Err(Error::Data(format!(
            "{}: magic {magic:#010x}, expected {MAGIC_LABELS:#010x} (labels)",
            path.display()
        )));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    if bytes.len() != 8 + count {
        return Err(Error::Data(format!(
            "{}: {} bytes, header promises {}",
            path.display(),
            bytes.len(),
            8 + count
        )));
    }
    Ok(bytes[8..].to_vec())
}
