//! Minimal named-tensor weight file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "SADVT001"                      8 bytes
//! u64    JSON header length              metadata: model config + vocab
//! bytes  JSON header
//! u32    tensor count
//! entry  u16 name_len | name utf8 | u8 ndim | u32 dims[ndim] | f32 data
//! ```
//!
//! Weights are stored as f32 and widened to f64 on load.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SADVT001";

#[derive(Debug, thiserror::Error)]
pub enum TensorIoError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor {name}: expected {expected} values, file has {found}")]
    ShapeMismatch {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("missing tensor {0}")]
    Missing(String),
}

pub struct TensorFile {
    pub header_json: String,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn write_tensors(
    path: &Path,
    header_json: &str,
    tensors: &[(String, Vec<usize>, Vec<f64>)],
) -> Result<(), TensorIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let hdr = header_json.as_bytes();
    w.write_all(&(hdr.len() as u64).to_le_bytes())?;
    w.write_all(hdr)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, dims, data) in tensors {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[dims.len() as u8])?;
        for &d in dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<TensorFile, TensorIoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorIoError::BadMagic);
    }
    let hdr_len = read_u64(&mut r)? as usize;
    let mut hdr = vec![0u8; hdr_len];
    r.read_exact(&mut hdr)?;
    let header_json =
        String::from_utf8(hdr).map_err(|e| TensorIoError::Header(e.to_string()))?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut nb = vec![0u8; name_len];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb).map_err(|e| TensorIoError::Header(e.to_string()))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut dims = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            dims.push(read_u32(&mut r)? as usize);
        }
        let total: usize = dims.iter().product();
        let mut data = Vec::with_capacity(total);
        let mut buf = [0u8; 4];
        for _ in 0..total {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        tensors.push((name, dims, data));
    }
    Ok(TensorFile {
        header_json,
        tensors,
    })
}

fn read_u16(r: &mut impl Read) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
