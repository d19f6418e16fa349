//! The MMT1 tensor file format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "MMTENS01"            8-byte magic
//! rank: u32
//! extents: rank x u64
//! data: numel x f32     row-major
//! ```
//!
//! Values are stored at 32-bit precision; reading widens back to `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"MMTENS01";

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let shape = tensor.shape();
    let mut out = Vec::with_capacity(12 + 8 * shape.len() + 4 * tensor.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &extent in shape {
        out.extend_from_slice(&(extent as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let bad = |msg: String| Error::Format {
        path: origin.to_path_buf(),
        msg,
    };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("missing MMTENS01 magic".into()));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = 12 + 8 * rank;
    if bytes.len() < header {
        return Err(bad(format!("truncated header for rank {rank}")));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            let at = 12 + 8 * i;
            u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize
        })
        .collect();
    let n = numel(&shape);
    if bytes.len() != header + 4 * n {
        return Err(bad(format!(
            "expected {} data bytes for shape {shape:?}, found {}",
            4 * n,
            bytes.len() - header
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(shape, data)
}

/// Writes bytes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp_name = path.as_os_str().to_owned();
    tmp_name.push(".tmp");
    let tmp = Path::new(&tmp_name);
    let mut file = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(tmp, e))?;
    file.sync_all().map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write(path: &Path, tensor: &Tensor) -> Result<Vec<u8>> {
    let bytes = encode(tensor);
    write_atomic(path, &bytes)?;
    Ok(bytes)
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
