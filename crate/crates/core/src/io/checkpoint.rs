//! Weight checkpoints: magic "MCKP", u32 version = 1, a UTF-8 metadata
//! block (the run configuration that produced the weights), then named
//! tensors sorted by name. Per tensor: u32 name length, name bytes, u32
//! rank, u32 dims, raw little-endian f64 data. Round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::io::features::Cursor;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"MCKP";
pub const VERSION: u32 = 1;

pub fn save(path: &Path, meta: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    bytes.extend_from_slice(meta.as_bytes());
    bytes.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            bytes.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(String, BTreeMap<String, Tensor>)> {
    let bytes = fs::read(path)?;
    let mut cursor = Cursor::new(path, &bytes);
    if cursor.take(4)? != MAGIC {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            expected: "MCKP",
        });
    }
    let version = cursor.u32()?;
    if version != VERSION {
        return Err(Error::BadVersion {
            path: path.display().to_string(),
            found: version,
            expected: VERSION,
        });
    }
    let meta_len = cursor.u32()? as usize;
    let meta = String::from_utf8(cursor.take(meta_len)?.to_vec()).map_err(|_| Error::Format {
        path: path.display().to_string(),
        reason: "metadata is not UTF-8".into(),
    })?;
    let count = cursor.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = cursor.u32()? as usize;
        let name =
            String::from_utf8(cursor.take(name_len)?.to_vec()).map_err(|_| Error::Format {
                path: path.display().to_string(),
                reason: "tensor name is not UTF-8".into(),
            })?;
        let rank = cursor.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cursor.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(cursor.f64()?);
        }
        if tensors.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("duplicate tensor name {name}"),
            });
        }
    }
    cursor.finish()?;
    Ok((meta, tensors))
}
