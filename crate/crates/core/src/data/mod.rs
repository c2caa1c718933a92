//! Volume ingestion, manifests, split enforcement, augmentation and
//! synthetic data.
//!
//! Volumes are `Tensor<f32>` of shape `[1, D, H, W]`. Files keep their voxel
//! order: for NIfTI the fastest-varying file axis (x, sagittal) becomes the
//! last tensor axis, so tensor axis 1 is axial (z), 2 coronal (y) and 3
//! sagittal (x).

mod augment;
mod manifest;
mod native;
mod nifti;
mod synth;

pub use augment::{center_crop, crop_at, gaussian_blur, gaussian_kernel, random_crop, Crop};
pub use manifest::{check_leakage, subsample, ClassCounts, Manifest, ManifestRow, MANIFEST_HEADER};
pub use native::{read_native, write_native, NATIVE_MAGIC, NATIVE_VERSION};
pub use nifti::{read_nifti1, write_nifti1, NiftiDatatype, NiftiHeader, NIFTI_HEADER_SIZE};
pub use synth::{assign_splits, generate_synthetic, write_synthetic, SynthConfig, SynthSample};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Diagnostic class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    CN = 0,
    MCI = 1,
    AD = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::CN, Label::MCI, Label::AD];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Label::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("class index {i} out of range (0..3)")))
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::CN => "CN",
            Label::MCI => "MCI",
            Label::AD => "AD",
        })
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "CN" => Ok(Label::CN),
            "MCI" => Ok(Label::MCI),
            "AD" => Ok(Label::AD),
            other => Err(Error::invalid(format!("unknown label `{other}` (CN, MCI, AD)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}` (train, val, test)"))),
        }
    }
}

/// One scan with its metadata.
#[derive(Debug, Clone)]
pub struct VolumeSample {
    pub volume: Tensor<f32>,
    pub label: Label,
    pub age: f64,
    pub subject_id: String,
    pub split: Split,
}

impl VolumeSample {
    pub fn validate(&self) -> Result<()> {
        if self.volume.rank() != 4 || self.volume.shape()[0] != 1 {
            return Err(Error::InvalidShape {
                shape: self.volume.shape().to_vec(),
                reason: format!("sample `{}` must be [1, D, H, W]", self.subject_id),
            });
        }
        if !self.volume.is_finite() {
            return Err(Error::Numeric(format!("sample `{}` has non-finite voxels", self.subject_id)));
        }
        if !(0.0..=crate::ops::age::MAX_AGE).contains(&self.age) {
            return Err(Error::invalid(format!("sample `{}` has age {} outside [0, 120]", self.subject_id, self.age)));
        }
        Ok(())
    }
}

/// Per-volume z-score.
pub fn intensity_normalize(volume: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = volume.len() as f64;
    let mean = volume.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = volume.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::Numeric("cannot z-score a constant volume".into()));
    }
    Ok(volume.map(|v| ((f64::from(v) - mean) / std) as f32))
}

/// Read a volume by extension: `.nii` / `.hdr` as NIfTI-1, anything else in
/// the native format. Rank-3 files come back as `[1, D, H, W]`.
pub fn read_volume(path: &Path) -> Result<Tensor<f32>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let v = if ext.eq_ignore_ascii_case("nii") || ext.eq_ignore_ascii_case("hdr") {
        read_nifti1(path)?
    } else {
        read_native(path)?
    };
    let s = v.shape().to_vec();
    v.reshape(&[1, s[0], s[1], s[2]])
}

/// Materialize every row of one split, optionally z-scoring each volume.
pub fn load_samples(manifest: &Manifest, split: Split, normalize: bool) -> Result<Vec<VolumeSample>> {
    manifest
        .rows()
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            let path = manifest.resolve(&r.path);
            let mut volume = read_volume(&path)?;
            if normalize {
                volume = intensity_normalize(&volume)?;
            }
            let sample = VolumeSample {
                volume,
                label: r.label,
                age: r.age,
                subject_id: r.subject_id.clone(),
                split: r.split,
            };
            sample.validate()?;
            Ok(sample)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Rng, Stream};
    use crate::tensor::Init;

    fn moments(t: &Tensor<f32>) -> (f64, f64) {
        let n = t.len() as f64;
        let m = t.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let v = t.data().iter().map(|&x| (f64::from(x) - m).powi(2)).sum::<f64>() / n;
        (m, v.sqrt())
    }

    #[test]
    fn zscore_moments_and_affine_invariance() {
        let x = Tensor::<f32>::init(Init::Uniform(-3.0, 5.0), &[1, 6, 7, 8], &mut Rng::new(3).stream(Stream::Test, 0)).unwrap();
        let z = intensity_normalize(&x).unwrap();
        let (m, s) = moments(&z);
        assert!(m.abs() < 1e-5);
        assert!((s - 1.0).abs() < 1e-4);
        let y = intensity_normalize(&x.map(|v| 2.5 * v + 7.0)).unwrap();
        for (a, b) in z.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zscore_rejects_constant() {
        let x = Tensor::<f32>::full(&[1, 3, 3, 3], 4.0).unwrap();
        assert!(matches!(intensity_normalize(&x), Err(Error::Numeric(_))));
    }

    #[test]
    fn label_and_split_text() {
        for l in Label::ALL {
            assert_eq!(l.to_string().parse::<Label>().unwrap(), l);
            assert_eq!(Label::from_index(l.index()).unwrap(), l);
        }
        for s in Split::ALL {
            assert_eq!(s.to_string().parse::<Split>().unwrap(), s);
        }
        assert!("cn".parse::<Label>().is_err());
        assert!(Label::from_index(3).is_err());
    }
}
