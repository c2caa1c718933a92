//! Gradient-magnitude saliency: `|d score_c / d input|` per voxel, where
//! `score_c` is the pre-softmax logit of the target class.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{gaussian_blur, write_native};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::ops::Mode;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_SMOOTHING: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap<T: Scalar = f32> {
    /// `[D, H, W]`, non-negative.
    pub values: Tensor<T>,
    /// Class the gradient was taken for; `None` once maps are aggregated.
    pub target: Option<usize>,
    /// Gaussian smoothing applied so far.
    pub sigma: f64,
}

/// Saliency of one volume (`[1, D, H, W]` or `[D, H, W]`, cubic with the
/// network's crop extent) for `target`.
pub fn saliency<T: Scalar>(net: &Network<T>, volume: &Tensor<T>, age: Option<f64>, target: usize) -> Result<SaliencyMap<T>> {
    let classes = net.config().num_classes;
    if target >= classes {
        return Err(Error::invalid(format!("target class {target} out of range (0..{classes})")));
    }
    let c = net.config().crop_extent;
    let spatial = match volume.shape() {
        [1, d, h, w] | [d, h, w] => [*d, *h, *w],
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "saliency input must be [1, D, H, W] or [D, H, W]".into(),
            })
        }
    };
    if spatial != [c, c, c] {
        return Err(Error::InvalidShape {
            shape: volume.shape().to_vec(),
            reason: format!("saliency input must match the network crop extent {c}"),
        });
    }
    let x = volume.reshape(&[1, 1, c, c, c])?;
    let ages = age.map(|a| [a]);
    let (logits, tape) = net.forward(&x, ages.as_ref().map(|a| &a[..]), Mode::Eval)?;
    let mut onehot = Tensor::<T>::zeros(logits.shape())?;
    onehot.data_mut()[target] = T::one();
    let grads = net.backward(&tape, &onehot)?;
    Ok(SaliencyMap {
        values: grads.input.reshape(&spatial)?.map(|v| v.abs()),
        target: Some(target),
        sigma: 0.0,
    })
}

/// Voxelwise mean of the maps after scaling each to a maximum of 1. An
/// all-zero map contributes zeros.
pub fn aggregate(maps: &[SaliencyMap]) -> Result<SaliencyMap> {
    let first = maps.first().ok_or_else(|| Error::invalid("cannot aggregate an empty list of maps"))?;
    let shape = first.values.shape().to_vec();
    let mut acc = vec![0.0f64; first.values.len()];
    for m in maps {
        if m.values.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "aggregate",
                left: shape,
                right: m.values.shape().to_vec(),
            });
        }
        let max = m.values.data().iter().fold(0.0f32, |a, &b| a.max(b));
        if max > 0.0 {
            for (a, &v) in acc.iter_mut().zip(m.values.data()) {
                *a += f64::from(v / max);
            }
        }
    }
    let k = maps.len() as f64;
    Ok(SaliencyMap {
        values: Tensor::new(&shape, acc.into_iter().map(|a| (a / k) as f32).collect())?,
        target: None,
        sigma: first.sigma,
    })
}

pub fn smooth(map: &SaliencyMap, sigma: f64) -> Result<SaliencyMap> {
    Ok(SaliencyMap {
        // clamp guards against -0.0 and rounding noise around exact zeros
        values: gaussian_blur(&map.values, sigma)?.map(|v| v.max(0.0)),
        target: map.target,
        sigma: map.sigma + sigma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    /// Map axis (`[D, H, W]` = axial, coronal, sagittal) held fixed.
    pub fn axis(self) -> usize {
        match self {
            Plane::Axial => 0,
            Plane::Coronal => 1,
            Plane::Sagittal => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

/// A slice to export: plane and index along the plane's axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct View {
    pub plane: Plane,
    pub index: usize,
}

impl View {
    pub const fn new(plane: Plane, index: usize) -> Self {
        Self { plane, index }
    }
}

pub const DEFAULT_VIEWS: [View; 4] = [
    View::new(Plane::Axial, 50),
    View::new(Plane::Axial, 26),
    View::new(Plane::Coronal, 56),
    View::new(Plane::Sagittal, 26),
];

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.plane.name(), self.index)
    }
}

/// Parses `axial50`, `coronal:56` or `sagittal 26`.
impl FromStr for View {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let split = s.find(|c: char| c.is_ascii_digit()).unwrap_or(s.len());
        let (name, idx) = s.split_at(split);
        let plane = match name.trim_end_matches([':', ' ', '_']) {
            "axial" => Plane::Axial,
            "coronal" => Plane::Coronal,
            "sagittal" => Plane::Sagittal,
            other => return Err(Error::invalid(format!("unknown plane `{other}` (axial, coronal, sagittal)"))),
        };
        let index = idx.parse().map_err(|_| Error::invalid(format!("bad slice index in view `{s}`")))?;
        Ok(View { plane, index })
    }
}

/// Extract a 2D slice as (rows, cols, row-major values).
pub fn slice(values: &Tensor<f32>, view: View) -> Result<(usize, usize, Vec<f32>)> {
    let [d, h, w] = match values.shape() {
        [d, h, w] => [*d, *h, *w],
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "slices need a [D, H, W] map".into(),
            })
        }
    };
    let extent = [d, h, w][view.plane.axis()];
    if view.index >= extent {
        return Err(Error::invalid(format!("{view} is out of range (extent {extent})")));
    }
    let v = values.data();
    let at = |z: usize, y: usize, x: usize| v[(z * h + y) * w + x];
    let i = view.index;
    Ok(match view.plane {
        Plane::Axial => (h, w, (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| at(i, y, x)).collect()),
        Plane::Coronal => (d, w, (0..d).flat_map(|z| (0..w).map(move |x| (z, x))).map(|(z, x)| at(z, i, x)).collect()),
        Plane::Sagittal => (d, h, (0..d).flat_map(|z| (0..h).map(move |y| (z, y))).map(|(z, y)| at(z, y, i)).collect()),
    })
}

/// Binary PGM with per-image min-max scaling; a constant image is all 0.
pub fn encode_pgm(rows: usize, cols: usize, values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if range > 0.0 {
            (((v - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// Write `<prefix>_<view>.pgm` per view. Returns the paths written.
pub fn export_slices(map: &SaliencyMap, views: &[View], prefix: &Path) -> Result<Vec<PathBuf>> {
    let encoded = views
        .iter()
        .map(|&v| slice(&map.values, v).map(|(r, c, s)| (v, encode_pgm(r, c, &s))))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let stem = stem(prefix);
    let mut written = Vec::with_capacity(views.len());
    for (view, bytes) in encoded {
        let path = prefix.with_file_name(format!("{stem}_{view}.pgm"));
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

fn stem(prefix: &Path) -> &str {
    prefix.file_name().and_then(|s| s.to_str()).unwrap_or("saliency")
}

/// [`export_slices`] plus the full map as `<prefix>.vol`.
pub fn export_map(map: &SaliencyMap, views: &[View], prefix: &Path) -> Result<Vec<PathBuf>> {
    let mut written = export_slices(map, views, prefix)?;
    let vol = prefix.with_file_name(format!("{}.vol", stem(prefix)));
    write_native(&vol, &map.values)?;
    written.push(vol);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::read_native;
    use crate::model::{AgeMode, ModelConfig};
    use crate::rng::{Rng, Stream};
    use crate::tensor::Init;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn tiny() -> ModelConfig {
        ModelConfig {
            crop_extent: 87,
            ..Default::default()
        }
    }

    fn random_map(shape: &[usize], seed: u64) -> SaliencyMap {
        let values = Tensor::init(Init::Uniform(0.0, 2.0), shape, &mut Rng::new(seed).stream(Stream::Test, 0)).unwrap();
        SaliencyMap { values, target: Some(0), sigma: 0.0 }
    }

    #[test]
    fn zero_network_gives_zero_map() {
        let mut net = Network::<f32>::build(&tiny(), &Rng::new(0)).unwrap();
        net.for_each_param_mut(|_, p| p.fill(0.0));
        let x = Tensor::<f32>::init(Init::Uniform(-1.0, 1.0), &[1, 87, 87, 87], &mut Rng::new(1).stream(Stream::Test, 0)).unwrap();
        let m = saliency(&net, &x, None, 2).unwrap();
        assert_eq!(m.values.shape(), &[87, 87, 87]);
        assert!(m.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_target_and_extent() {
        let net = Network::<f32>::build(&tiny(), &Rng::new(0)).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 87, 87, 87]).unwrap();
        assert!(saliency(&net, &x, None, 3).is_err());
        let y = Tensor::<f32>::zeros(&[1, 88, 88, 88]).unwrap();
        assert!(saliency(&net, &y, None, 0).is_err());
    }

    #[test]
    fn matches_finite_differences_and_ignores_target_bias() {
        let cfg = ModelConfig { age_mode: AgeMode::Encoded, ..tiny() };
        let rng = Rng::new(4);
        let mut net = Network::<f64>::build(&cfg, &rng).unwrap();
        let mut r = rng.stream(Stream::Test, 9);
        let x = Tensor::<f64>::init(Init::Uniform(-1.0, 1.0), &[1, 87, 87, 87], &mut r).unwrap();
        let target = 1;
        let age = Some(71.5);
        let m = saliency(&net, &x, age, target).unwrap();
        assert!(m.values.data().iter().all(|&v| v >= 0.0));

        let x5 = x.reshape(&[1, 1, 87, 87, 87]).unwrap();
        let (_, base) = net.forward(&x5, Some(&[71.5]), Mode::Eval).unwrap();
        let score = |i: usize, delta: f64| {
            let mut p = x5.clone();
            p.data_mut()[i] += delta;
            let (logits, tape) = net.forward(&p, Some(&[71.5]), Mode::Eval).unwrap();
            (logits.data()[target], tape)
        };
        let h = 1e-3;
        let mut checked = 0;
        while checked < 10 {
            let i = r.random_range(0..x.len());
            let (up, tu) = score(i, h);
            let (down, td) = score(i, -h);
            if !base.same_routing(&tu) || !base.same_routing(&td) {
                continue;
            }
            let numeric = ((up - down) / (2.0 * h)).abs();
            let analytic = m.values.data()[i];
            let rel = (analytic - numeric).abs() / analytic.max(numeric).max(1e-6);
            assert!(rel < 1e-3, "voxel {i}: analytic {analytic} numeric {numeric}");
            checked += 1;
        }

        let name = "fc2.bias";
        let mut b = net.params()[name].clone();
        b.data_mut()[target] += 3.0;
        net.set_tensor(name, b).unwrap();
        assert_eq!(saliency(&net, &x, age, target).unwrap().values, m.values);
    }

    #[test]
    fn aggregate_normalizes_and_rejects_bad_input() {
        let a = random_map(&[4, 5, 6], 1);
        let one = aggregate(std::slice::from_ref(&a)).unwrap();
        let max = a.values.data().iter().fold(0.0f32, |m, &v| m.max(v));
        for (o, v) in one.values.data().iter().zip(a.values.data()) {
            assert!((o - v / max).abs() < 1e-6);
        }
        let twice = aggregate(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(twice.values, one.values);
        assert!(aggregate(&[]).is_err());
        assert!(aggregate(&[a, random_map(&[4, 5, 7], 2)]).is_err());
        let zero = SaliencyMap { values: Tensor::zeros(&[2, 2, 2]).unwrap(), target: None, sigma: 0.0 };
        assert!(aggregate(&[zero]).unwrap().values.data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn aggregate_is_permutation_invariant_and_bounded(k in 1usize..6, seed in any::<u64>()) {
            let maps: Vec<SaliencyMap> = (0..k).map(|i| random_map(&[3, 4, 5], seed.wrapping_add(i as u64))).collect();
            let fwd = aggregate(&maps).unwrap();
            let mut rev = maps.clone();
            rev.reverse();
            let back = aggregate(&rev).unwrap();
            for (a, b) in fwd.values.data().iter().zip(back.values.data()) {
                prop_assert!((a - b).abs() < 1e-6);
                prop_assert!((0.0..=1.0 + 1e-6).contains(a));
            }
        }
    }

    #[test]
    fn smoothing_conserves_interior_mass() {
        let mut values = Tensor::<f32>::zeros(&[20, 20, 20]).unwrap();
        let mut r = Rng::new(5).stream(Stream::Test, 0);
        for z in 8..12 {
            for y in 8..12 {
                for x in 8..12 {
                    values.data_mut()[(z * 20 + y) * 20 + x] = r.random_range(0.0..1.0);
                }
            }
        }
        let m = SaliencyMap { values, target: Some(0), sigma: 0.0 };
        let s = smooth(&m, DEFAULT_SMOOTHING).unwrap();
        let before: f64 = m.values.data().iter().map(|&v| f64::from(v)).sum();
        let after: f64 = s.values.data().iter().map(|&v| f64::from(v)).sum();
        assert!((before - after).abs() / before < 1e-4);
        assert!(s.values.data().iter().all(|&v| v >= 0.0));
        assert_eq!(s.sigma, DEFAULT_SMOOTHING);
        assert_eq!(smooth(&m, 0.0).unwrap().values, m.values);
    }

    #[test]
    fn views_parse_and_print() {
        for v in DEFAULT_VIEWS {
            assert_eq!(v.to_string().parse::<View>().unwrap(), v);
        }
        assert_eq!("Coronal:56".parse::<View>().unwrap(), View::new(Plane::Coronal, 56));
        assert!("oblique3".parse::<View>().is_err());
        assert!("axial".parse::<View>().is_err());
    }

    #[test]
    fn slices_follow_axis_layout() {
        let values = Tensor::new(&[2, 3, 4], (0..24).map(|v| v as f32).collect()).unwrap();
        assert_eq!(slice(&values, View::new(Plane::Axial, 1)).unwrap(), (3, 4, (12..24).map(|v| v as f32).collect()));
        assert_eq!(slice(&values, View::new(Plane::Coronal, 2)).unwrap(), (2, 4, vec![8., 9., 10., 11., 20., 21., 22., 23.]));
        assert_eq!(slice(&values, View::new(Plane::Sagittal, 3)).unwrap(), (2, 3, vec![3., 7., 11., 15., 19., 23.]));
        assert!(slice(&values, View::new(Plane::Axial, 2)).is_err());
    }

    #[test]
    fn pgm_scaling() {
        let img = encode_pgm(1, 3, &[2.0, 3.0, 4.0]);
        assert_eq!(&img[..11], b"P5\n3 1\n255\n");
        assert_eq!(&img[11..], &[0, 128, 255]);
        assert_eq!(&encode_pgm(2, 2, &[5.0; 4])[11..], &[0, 0, 0, 0]);
    }

    #[test]
    fn exports_default_views_on_full_extent() {
        let dir = tempfile::tempdir().unwrap();
        let m = random_map(&[96, 96, 96], 3);
        let paths = export_map(&m, &DEFAULT_VIEWS, &dir.path().join("agg")).unwrap();
        assert_eq!(paths.len(), 5);
        let axial = std::fs::read(dir.path().join("agg_axial50.pgm")).unwrap();
        assert!(axial.starts_with(b"P5\n96 96\n255\n"));
        assert_eq!(axial.len(), 13 + 96 * 96);
        assert_eq!(read_native(&dir.path().join("agg.vol")).unwrap(), m.values);
        assert!(export_slices(&m, &[View::new(Plane::Sagittal, 96)], &dir.path().join("bad")).is_err());
    }
}
