//! Desk-scale stand-in data: a bright ellipsoidal "brain" with a darker
//! central cavity whose radius grows from CN to MCI to AD, plus Gaussian
//! noise.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{write_native, Label, Manifest, ManifestRow, Split};
use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;

/// Cavity radius, as a fraction of the brain's semi-axes, per class.
const CAVITY: [(f64, f64); 3] = [(0.20, 0.28), (0.36, 0.44), (0.52, 0.60)];
/// Age mean and standard deviation per class (training-cohort values).
const AGES: [(f64, f64); 3] = [(77.0, 5.4), (75.9, 7.3), (76.7, 7.4)];
const BRAIN: f32 = 1.0;
const CAVITY_LEVEL: f32 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub extent: usize,
    /// Standard deviation of the additive noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 8,
            extent: 96,
            noise: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub subject_id: String,
    pub label: Label,
    pub age: f64,
    /// `[1, e, e, e]`.
    pub volume: Tensor<f32>,
    /// Cavity radius fraction actually drawn.
    pub cavity: f64,
}

fn render(extent: usize, cavity: f64, noise: f64, rng: &mut impl rand::RngCore) -> Result<Tensor<f32>> {
    let e = extent as f64;
    let c = (e - 1.0) / 2.0;
    let axes = [0.42 * e, 0.38 * e, 0.34 * e];
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(extent.pow(3));
    for z in 0..extent {
        for y in 0..extent {
            for x in 0..extent {
                let q = [z, y, x]
                    .iter()
                    .zip(&axes)
                    .map(|(&i, &a)| ((i as f64 - c) / a).powi(2))
                    .sum::<f64>();
                let base = if q <= cavity * cavity {
                    CAVITY_LEVEL
                } else if q <= 1.0 {
                    BRAIN
                } else {
                    0.0
                };
                let n = if noise > 0.0 { normal.sample(rng) as f32 } else { 0.0 };
                data.push(base + n);
            }
        }
    }
    Tensor::new(&[1, extent, extent, extent], data)
}

/// `n_per_class` subjects per class, one volume each, in class-major order.
/// Sample `i` draws everything from its own stream, so the dataset is a
/// pure function of the seed.
pub fn generate_synthetic(cfg: &SynthConfig, rng: &Rng) -> Result<Vec<SynthSample>> {
    if cfg.extent < 16 {
        return Err(Error::invalid(format!("synthetic extent must be >= 16, got {}", cfg.extent)));
    }
    if !(cfg.noise >= 0.0) {
        return Err(Error::invalid(format!("noise must be >= 0, got {}", cfg.noise)));
    }
    (0..3 * cfg.n_per_class)
        .into_par_iter()
        .map(|i| {
            let label = Label::ALL[i / cfg.n_per_class];
            let c = label.index();
            let mut r = rng.stream(Stream::Synth, i as u64);
            let (lo, hi) = CAVITY[c];
            let cavity = r.random_range(lo..hi);
            let (mean, std) = AGES[c];
            let age = Normal::new(mean, std).expect("valid age distribution").sample(&mut r);
            let age = (age.clamp(50.0, 100.0) * 10.0).round() / 10.0;
            let volume = render(cfg.extent, cavity, cfg.noise, &mut r)?;
            Ok(SynthSample {
                subject_id: format!("syn-{}-{:03}", label.to_string().to_lowercase(), i % cfg.n_per_class),
                label,
                age,
                volume,
                cavity,
            })
        })
        .collect()
}

/// Subject split per class: `round(0.15 n)` validation, `round(0.15 n)`
/// test, the rest training; assignment shuffled by the split stream.
pub fn assign_splits(samples: &[SynthSample], rng: &Rng) -> Vec<Split> {
    let mut out = vec![Split::Train; samples.len()];
    for label in Label::ALL {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == label).collect();
        idx.shuffle(&mut rng.stream(Stream::Split, label.index() as u64));
        let n = idx.len();
        let n_eval = (0.15 * n as f64).round() as usize;
        for (k, &i) in idx.iter().enumerate() {
            out[i] = if k < n_eval {
                Split::Val
            } else if k < 2 * n_eval {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    out
}

/// Write every sample as `<subject_id>.vol` plus `manifest.csv` into `dir`.
pub fn write_synthetic(samples: &[SynthSample], dir: &Path, rng: &Rng) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let splits = assign_splits(samples, rng);
    let mut rows = Vec::with_capacity(samples.len());
    for (s, split) in samples.iter().zip(splits) {
        let file = format!("{}.vol", s.subject_id);
        write_native(&dir.join(&file), &s.volume)?;
        rows.push(ManifestRow {
            subject_id: s.subject_id.clone(),
            path: file.into(),
            label: s.label,
            age: s.age,
            split,
        });
    }
    let manifest = Manifest::new(rows, dir, false)?;
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cavity_voxels(v: &Tensor<f32>) -> usize {
        v.data().iter().filter(|&&x| x > 0.1 && x < 0.6).count()
    }

    #[test]
    fn balanced_and_deterministic() {
        let cfg = SynthConfig { n_per_class: 8, extent: 16, noise: 0.1 };
        let a = generate_synthetic(&cfg, &Rng::new(5)).unwrap();
        assert_eq!(a.len(), 24);
        for l in Label::ALL {
            assert_eq!(a.iter().filter(|s| s.label == l).count(), 8);
        }
        let b = generate_synthetic(&cfg, &Rng::new(5)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.volume.data(), y.volume.data());
            assert_eq!((x.age, &x.subject_id), (y.age, &y.subject_id));
        }
        let c = generate_synthetic(&cfg, &Rng::new(6)).unwrap();
        assert_ne!(a[0].volume.data(), c[0].volume.data());
        assert!(a.iter().all(|s| (50.0..=100.0).contains(&s.age)));
    }

    #[test]
    fn noiseless_classes_separate_by_cavity_volume() {
        let cfg = SynthConfig { n_per_class: 6, extent: 24, noise: 0.0 };
        let samples = generate_synthetic(&cfg, &Rng::new(1)).unwrap();
        let vols: Vec<(usize, Label)> = samples.iter().map(|s| (cavity_voxels(&s.volume), s.label)).collect();
        let max_of = |l: Label| vols.iter().filter(|v| v.1 == l).map(|v| v.0).max().unwrap();
        let min_of = |l: Label| vols.iter().filter(|v| v.1 == l).map(|v| v.0).min().unwrap();
        assert!(max_of(Label::CN) < min_of(Label::MCI));
        assert!(max_of(Label::MCI) < min_of(Label::AD));
        // thresholding classifier halfway between the class ranges
        let t1 = (max_of(Label::CN) + min_of(Label::MCI)) / 2;
        let t2 = (max_of(Label::MCI) + min_of(Label::AD)) / 2;
        let correct = vols
            .iter()
            .filter(|(v, l)| {
                let pred = if *v <= t1 { Label::CN } else if *v <= t2 { Label::MCI } else { Label::AD };
                pred == *l
            })
            .count();
        assert_eq!(correct, vols.len());
    }

    #[test]
    fn writes_disjoint_seventy_fifteen_fifteen() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { n_per_class: 20, extent: 16, noise: 0.1 };
        let samples = generate_synthetic(&cfg, &Rng::new(2)).unwrap();
        let m = write_synthetic(&samples, dir.path(), &Rng::new(2)).unwrap();
        let counts = m.counts();
        assert_eq!(counts[&Split::Train].subjects, [14, 14, 14]);
        assert_eq!(counts[&Split::Val].subjects, [3, 3, 3]);
        assert_eq!(counts[&Split::Test].subjects, [3, 3, 3]);
        let back = Manifest::load(&dir.path().join("manifest.csv"), false).unwrap();
        assert_eq!(back.rows(), m.rows());
        let loaded = crate::data::load_samples(&back, Split::Val, false).unwrap();
        assert_eq!(loaded.len(), 9);
        assert_eq!(loaded[0].volume.shape(), &[1, 16, 16, 16]);
    }

    #[test]
    fn rejects_tiny_extent() {
        assert!(generate_synthetic(&SynthConfig { extent: 15, ..Default::default() }, &Rng::new(0)).is_err());
    }
}
