//! Uncompressed NIfTI-1 (single-file `n+1` and header/image pair `ni1`),
//! rank 3, int16 or float32 payloads. Orientation fields are ignored.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NIFTI_HEADER_SIZE: usize = 348;
const SINGLE_FILE_OFFSET: usize = 352;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDatatype {
    Int16,
    Float32,
}

impl NiftiDatatype {
    fn code(self) -> i16 {
        match self {
            NiftiDatatype::Int16 => 4,
            NiftiDatatype::Float32 => 16,
        }
    }

    fn bitpix(self) -> i16 {
        match self {
            NiftiDatatype::Int16 => 16,
            NiftiDatatype::Float32 => 32,
        }
    }

    fn from_code(code: i16) -> Result<Self> {
        match code {
            4 => Ok(NiftiDatatype::Int16),
            16 => Ok(NiftiDatatype::Float32),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }
}

/// The header fields this reader understands.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    /// `dim[1..=3]`, i.e. (x, y, z).
    pub dims: [usize; 3],
    pub datatype: NiftiDatatype,
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub big_endian: bool,
    /// `ni1` header/image pair instead of a single `n+1` file.
    pub pair: bool,
}

impl NiftiHeader {
    pub fn new(dims: [usize; 3], datatype: NiftiDatatype) -> Self {
        Self {
            dims,
            datatype,
            vox_offset: SINGLE_FILE_OFFSET as f32,
            scl_slope: 0.0,
            scl_inter: 0.0,
            big_endian: false,
            pair: false,
        }
    }

    /// The 348-byte header, followed by the 4-byte extension flag for
    /// single-file images.
    pub fn encode(&self) -> Vec<u8> {
        let be = self.big_endian;
        let mut h = vec![0u8; NIFTI_HEADER_SIZE];
        let put_i16 = |h: &mut [u8], at: usize, v: i16| {
            h[at..at + 2].copy_from_slice(&if be { v.to_be_bytes() } else { v.to_le_bytes() })
        };
        let put_i32 = |h: &mut [u8], at: usize, v: i32| {
            h[at..at + 4].copy_from_slice(&if be { v.to_be_bytes() } else { v.to_le_bytes() })
        };
        let put_f32 = |h: &mut [u8], at: usize, v: f32| {
            h[at..at + 4].copy_from_slice(&if be { v.to_be_bytes() } else { v.to_le_bytes() })
        };
        put_i32(&mut h, 0, NIFTI_HEADER_SIZE as i32);
        put_i16(&mut h, 40, 3);
        for (i, &d) in self.dims.iter().enumerate() {
            put_i16(&mut h, 42 + 2 * i, d as i16);
        }
        for i in 4..8 {
            put_i16(&mut h, 40 + 2 * i, 1);
        }
        put_i16(&mut h, 70, self.datatype.code());
        put_i16(&mut h, 72, self.datatype.bitpix());
        for i in 0..8 {
            put_f32(&mut h, 76 + 4 * i, 1.0);
        }
        put_f32(&mut h, 108, self.vox_offset);
        put_f32(&mut h, 112, self.scl_slope);
        put_f32(&mut h, 116, self.scl_inter);
        h[344..348].copy_from_slice(if self.pair { b"ni1\0" } else { b"n+1\0" });
        if !self.pair {
            h.extend_from_slice(&[0; 4]);
        }
        h
    }

    fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < NIFTI_HEADER_SIZE {
            return Err(Error::Truncated {
                what: "NIfTI header".into(),
                detail: format!("need {NIFTI_HEADER_SIZE} bytes, found {}", buf.len()),
            });
        }
        let magic = &buf[344..348];
        let pair = match magic {
            b"n+1\0" => false,
            b"ni1\0" => true,
            _ => {
                return Err(Error::BadMagic {
                    what: "NIfTI-1 header",
                    found: magic.to_vec(),
                })
            }
        };
        let dim0_le = i16::from_le_bytes([buf[40], buf[41]]);
        let big_endian = !(1..=7).contains(&dim0_le);
        let i16_at = |at: usize| {
            let b = [buf[at], buf[at + 1]];
            if big_endian {
                i16::from_be_bytes(b)
            } else {
                i16::from_le_bytes(b)
            }
        };
        let f32_at = |at: usize| {
            let b = buf[at..at + 4].try_into().expect("4 bytes");
            if big_endian {
                f32::from_be_bytes(b)
            } else {
                f32::from_le_bytes(b)
            }
        };
        let rank = i16_at(40);
        if !(1..=7).contains(&rank) {
            return Err(Error::invalid(format!("NIfTI dim[0] = {rank} in either byte order")));
        }
        if rank != 3 {
            return Err(Error::UnsupportedRank(rank as usize));
        }
        let mut dims = [0usize; 3];
        for (i, d) in dims.iter_mut().enumerate() {
            let v = i16_at(42 + 2 * i);
            if v < 1 {
                return Err(Error::InvalidShape {
                    shape: vec![],
                    reason: format!("NIfTI dim[{}] = {v}", i + 1),
                });
            }
            *d = v as usize;
        }
        let datatype = NiftiDatatype::from_code(i16_at(70))?;
        Ok(Self {
            dims,
            datatype,
            vox_offset: f32_at(108),
            scl_slope: f32_at(112),
            scl_inter: f32_at(116),
            big_endian,
            pair,
        })
    }

    fn voxels(&self) -> usize {
        self.dims.iter().product()
    }
}

fn image_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("img")
}

/// Read a NIfTI-1 volume as `[z, y, x]` f32 (file voxel order), applying
/// `scl_slope` / `scl_inter` when the slope is non-zero.
pub fn read_nifti1(path: &Path) -> Result<Tensor<f32>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = NiftiHeader::decode(&buf)?;
    let (payload_src, offset) = if header.pair {
        let img = image_path(path);
        (fs::read(&img).map_err(|e| Error::io(&img, e))?, header.vox_offset.max(0.0) as usize)
    } else {
        (buf, (header.vox_offset as usize).max(NIFTI_HEADER_SIZE))
    };
    let width = (header.datatype.bitpix() / 8) as usize;
    let need = header.voxels() * width;
    let available = payload_src.len().saturating_sub(offset);
    if available < need {
        return Err(Error::Truncated {
            what: format!("NIfTI payload of {}", path.display()),
            detail: format!("{:?} {:?} needs {need} bytes at offset {offset}, found {available}", header.dims, header.datatype),
        });
    }
    let raw = &payload_src[offset..offset + need];
    let be = header.big_endian;
    let mut data: Vec<f32> = match header.datatype {
        NiftiDatatype::Int16 => raw
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                f32::from(if be { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) })
            })
            .collect(),
        NiftiDatatype::Float32 => raw
            .chunks_exact(4)
            .map(|c| {
                let b = c.try_into().expect("4 bytes");
                if be {
                    f32::from_be_bytes(b)
                } else {
                    f32::from_le_bytes(b)
                }
            })
            .collect(),
    };
    let (slope, inter) = (header.scl_slope, header.scl_inter);
    if slope != 0.0 && slope.is_finite() {
        let inter = if inter.is_finite() { inter } else { 0.0 };
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    let [x, y, z] = header.dims;
    Tensor::new(&[z, y, x], data)
}

/// Write `volume` (`[z, y, x]` or `[1, z, y, x]`) with the given header
/// settings; `header.dims` is taken from the volume. Int16 payloads store
/// `round((v - inter) / slope)` (slope 0 meaning 1).
pub fn write_nifti1(path: &Path, header: &NiftiHeader, volume: &Tensor<f32>) -> Result<()> {
    let [z, y, x] = match volume.shape() {
        [a, b, c] | [1, a, b, c] => [*a, *b, *c],
        other => return Err(Error::UnsupportedRank(other.len())),
    };
    if [x, y, z].iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::invalid("NIfTI-1 extents must fit in int16"));
    }
    let mut header = header.clone();
    header.dims = [x, y, z];
    if !header.pair {
        header.vox_offset = header.vox_offset.max(SINGLE_FILE_OFFSET as f32);
    }
    let be = header.big_endian;
    let mut payload = Vec::with_capacity(volume.len() * 4);
    match header.datatype {
        NiftiDatatype::Float32 => {
            for &v in volume.data() {
                payload.extend_from_slice(&if be { v.to_be_bytes() } else { v.to_le_bytes() });
            }
        }
        NiftiDatatype::Int16 => {
            let slope = if header.scl_slope == 0.0 { 1.0 } else { header.scl_slope };
            for &v in volume.data() {
                let q = ((v - header.scl_inter) / slope).round();
                if !(f32::from(i16::MIN)..=f32::from(i16::MAX)).contains(&q) {
                    return Err(Error::invalid(format!("value {v} does not fit int16 with the given scaling")));
                }
                let q = q as i16;
                payload.extend_from_slice(&if be { q.to_be_bytes() } else { q.to_le_bytes() });
            }
        }
    }
    let mut head = header.encode();
    if header.pair {
        fs::write(path, head).map_err(|e| Error::io(path, e))?;
        let img = image_path(path);
        let mut body = vec![0u8; header.vox_offset as usize];
        body.extend_from_slice(&payload);
        fs::write(&img, body).map_err(|e| Error::io(&img, e))
    } else {
        head.resize(header.vox_offset as usize, 0);
        head.extend_from_slice(&payload);
        fs::write(path, head).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor<f32> {
        let n = shape.iter().product::<usize>();
        Tensor::new(shape, (0..n).map(|i| i as f32 * 0.25 - 3.0).collect()).unwrap()
    }

    #[test]
    fn float32_round_trip_both_byte_orders() {
        let dir = tempfile::tempdir().unwrap();
        let v = ramp(&[4, 4, 4]);
        for be in [false, true] {
            let path = dir.path().join(format!("v{be}.nii"));
            let h = NiftiHeader { big_endian: be, ..NiftiHeader::new([0; 3], NiftiDatatype::Float32) };
            write_nifti1(&path, &h, &v).unwrap();
            let back = read_nifti1(&path).unwrap();
            assert_eq!(back.shape(), v.shape());
            assert_eq!(back.data(), v.data());
        }
    }

    #[test]
    fn anisotropic_extents_keep_voxel_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.nii");
        let v = ramp(&[2, 3, 5]);
        write_nifti1(&path, &NiftiHeader::new([0; 3], NiftiDatatype::Float32), &v).unwrap();
        let raw = fs::read(&path).unwrap();
        assert_eq!(i16::from_le_bytes([raw[42], raw[43]]), 5);
        assert_eq!(i16::from_le_bytes([raw[46], raw[47]]), 2);
        let back = read_nifti1(&path).unwrap();
        assert_eq!(back.shape(), &[2, 3, 5]);
        assert_eq!(back.data(), v.data());
    }

    #[test]
    fn int16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.nii");
        // stored value 3 everywhere, slope 2, intercept 1
        let h = NiftiHeader { scl_slope: 2.0, scl_inter: 1.0, ..NiftiHeader::new([0; 3], NiftiDatatype::Int16) };
        write_nifti1(&path, &h, &Tensor::full(&[2, 2, 2], 7.0).unwrap()).unwrap();
        let raw = fs::read(&path).unwrap();
        assert_eq!(i16::from_le_bytes([raw[352], raw[353]]), 3);
        let back = read_nifti1(&path).unwrap();
        assert!(back.data().iter().all(|&x| x == 7.0));
    }

    #[test]
    fn header_image_pair() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.hdr");
        let h = NiftiHeader { pair: true, vox_offset: 0.0, ..NiftiHeader::new([0; 3], NiftiDatatype::Float32) };
        let v = ramp(&[3, 3, 3]);
        write_nifti1(&path, &h, &v).unwrap();
        assert!(dir.path().join("p.img").exists());
        assert_eq!(read_nifti1(&path).unwrap().data(), v.data());
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.nii");
        write_nifti1(&path, &NiftiHeader::new([0; 3], NiftiDatatype::Float32), &ramp(&[4, 4, 4])).unwrap();
        let good = fs::read(&path).unwrap();
        let check = |bytes: &[u8]| {
            fs::write(&path, bytes).unwrap();
            read_nifti1(&path).unwrap_err()
        };

        let mut bad = good.clone();
        bad[344..348].copy_from_slice(b"XXXX");
        assert!(matches!(check(&bad), Error::BadMagic { .. }));

        let mut bad = good.clone();
        bad[70..72].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(check(&bad), Error::UnsupportedDatatype(2)));

        let mut bad = good.clone();
        bad[40..42].copy_from_slice(&4i16.to_le_bytes());
        assert!(matches!(check(&bad), Error::UnsupportedRank(4)));

        assert!(matches!(check(&good[..good.len() - 1]), Error::Truncated { .. }));
        assert!(matches!(check(&good[..100]), Error::Truncated { .. }));
    }
}
