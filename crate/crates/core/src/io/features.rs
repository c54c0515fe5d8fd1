//! Feature matrix files: magic "MCAF", u32 version = 1, u32 rows, u32 cols,
//! then rows*cols little-endian f64 values in row-major order. All integers
//! little-endian. Round-trips are bit-exact, so files written by any
//! conforming writer load identically.

use crate::error::{Error, Result};
use crate::feature::FeatureSet;
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"MCAF";
pub const VERSION: u32 = 1;

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    if features.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "write_features",
            shape: features.shape().to_vec(),
            reason: "feature files hold rank-2 matrices".to_string(),
        });
    }
    let rows = features.rows() as u32;
    let cols = features.cols() as u32;
    let mut bytes = Vec::with_capacity(16 + features.numel() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&rows.to_le_bytes());
    bytes.extend_from_slice(&cols.to_le_bytes());
    for v in features.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureSet> {
    let bytes = fs::read(path)?;
    let mut cursor = Cursor::new(path, &bytes);
    let magic = cursor.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            expected: "MCAF",
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
    let rows = cursor.u32()? as usize;
    let cols = cursor.u32()? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(cursor.f64()?);
    }
    cursor.finish()?;
    FeatureSet::dense(Tensor::from_vec(&[rows, cols], data)?)
}

/// Byte reader shared by the binary formats; every short read is a
/// truncation error naming the file.
pub(crate) struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(path: &'a Path, bytes: &'a [u8]) -> Cursor<'a> {
        Cursor { path, bytes, at: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.display().to_string(),
            });
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reject trailing bytes so a payload can't silently carry extra data.
    pub(crate) fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::Format {
                path: self.path.display().to_string(),
                reason: format!("{} trailing bytes", self.bytes.len() - self.at),
            });
        }
        Ok(())
    }
}
