//! Native volume format (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "NEUROVOL"
//! version  u32      1
//! extents  3 x u64  D, H, W
//! payload  D*H*W little-endian f32, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NATIVE_MAGIC: &[u8; 8] = b"NEUROVOL";
pub const NATIVE_VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 24;

/// Write a `[D, H, W]` or `[1, D, H, W]` volume.
pub fn write_native(path: &Path, volume: &Tensor<f32>) -> Result<()> {
    let dims: [usize; 3] = match volume.shape() {
        [d, h, w] | [1, d, h, w] => [*d, *h, *w],
        other => {
            return Err(Error::InvalidShape {
                shape: other.to_vec(),
                reason: "native volumes are 3-D".into(),
            })
        }
    };
    let mut buf = Vec::with_capacity(HEADER + 4 * volume.len());
    buf.extend_from_slice(NATIVE_MAGIC);
    buf.extend_from_slice(&NATIVE_VERSION.to_le_bytes());
    for d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in volume.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read a native volume as `[D, H, W]`.
pub fn read_native(path: &Path) -> Result<Tensor<f32>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf).map_err(|e| match e {
        Error::Truncated { detail, .. } => Error::Truncated {
            what: path.display().to_string(),
            detail,
        },
        other => other,
    })
}

fn decode(buf: &[u8]) -> Result<Tensor<f32>> {
    if buf.len() < 8 || &buf[..8] != NATIVE_MAGIC {
        return Err(Error::BadMagic {
            what: "native volume",
            found: buf[..buf.len().min(8)].to_vec(),
        });
    }
    if buf.len() < HEADER {
        return Err(Error::Truncated {
            what: "native volume".into(),
            detail: format!("header needs {HEADER} bytes, file has {}", buf.len()),
        });
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
    if version != NATIVE_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "native volume",
            found: version,
            expected: NATIVE_VERSION,
        });
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 12 + 8 * i;
        *d = u64::from_le_bytes(buf[at..at + 8].try_into().expect("8 bytes")) as usize;
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::invalid(format!("native volume extents {dims:?} overflow")))?;
    let payload = &buf[HEADER..];
    if payload.len() != 4 * n {
        return Err(Error::Truncated {
            what: "native volume".into(),
            detail: format!("extents {dims:?} need {} payload bytes, found {}", 4 * n, payload.len()),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(&dims, data)
}
