use rand::{Rng as _, RngCore};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Leading extent (product of all but the last three axes) and the three
/// spatial extents.
fn split_spatial(shape: &[usize]) -> Result<(usize, [usize; 3])> {
    if shape.len() < 3 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "volume needs at least three axes".into(),
        });
    }
    let r = shape.len();
    Ok((shape[..r - 3].iter().product(), [shape[r - 3], shape[r - 2], shape[r - 1]]))
}

/// Unnormalized Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("blur sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vec![1.0]);
    }
    let r = (3.0 * sigma).ceil() as i64;
    Ok((-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect())
}

/// Separable 3-D Gaussian blur over the last three axes. Taps falling
/// outside the volume are dropped and the remaining weights renormalized,
/// so constant volumes are preserved up to the border.
pub fn gaussian_blur(volume: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    let kernel = gaussian_kernel(sigma)?;
    if kernel.len() == 1 {
        return Ok(volume.clone());
    }
    let (lead, dims) = split_spatial(volume.shape())?;
    let r = (kernel.len() / 2) as isize;
    let mut buf: Vec<f64> = volume.data().iter().map(|&v| f64::from(v)).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let vol = dims.iter().product::<usize>();
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        // weight sum for each output position along this axis
        let norms: Vec<f64> = (0..n as isize)
            .map(|i| {
                (-r..=r)
                    .filter(|&t| (0..n as isize).contains(&(i + t)))
                    .map(|t| kernel[(t + r) as usize])
                    .sum()
            })
            .collect();
        for b in 0..lead {
            let base = b * vol;
            for start in 0..vol {
                // visit each line once, from its first element
                if (start / stride) % n != 0 {
                    continue;
                }
                line.clear();
                line.extend((0..n).map(|i| buf[base + start + i * stride]));
                for i in 0..n as isize {
                    let mut acc = 0.0;
                    for t in -r..=r {
                        let j = i + t;
                        if (0..n as isize).contains(&j) {
                            acc += kernel[(t + r) as usize] * line[j as usize];
                        }
                    }
                    buf[base + start + i as usize * stride] = acc / norms[i as usize];
                }
            }
        }
    }
    Tensor::new(volume.shape(), buf.into_iter().map(|v| v as f32).collect())
}

/// Offsets of a cubic crop along the last three axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub offsets: [usize; 3],
    pub extent: usize,
}

fn check_extent(dims: [usize; 3], extent: usize) -> Result<()> {
    if extent == 0 || dims.iter().any(|&d| d < extent) {
        return Err(Error::invalid(format!("crop extent {extent} does not fit volume extents {dims:?}")));
    }
    Ok(())
}

pub fn crop_at(volume: &Tensor<f32>, crop: Crop) -> Result<Tensor<f32>> {
    let (lead, dims) = split_spatial(volume.shape())?;
    let e = crop.extent;
    check_extent(dims, e)?;
    for (a, (&o, &d)) in crop.offsets.iter().zip(&dims).enumerate() {
        if o + e > d {
            return Err(Error::invalid(format!("crop offset {o} + {e} exceeds extent {d} on axis {a}")));
        }
    }
    let [od, oh, ow] = crop.offsets;
    let vol = dims.iter().product::<usize>();
    let src = volume.data();
    let mut out = Vec::with_capacity(lead * e * e * e);
    for b in 0..lead {
        for z in od..od + e {
            for y in oh..oh + e {
                let at = b * vol + (z * dims[1] + y) * dims[2] + ow;
                out.extend_from_slice(&src[at..at + e]);
            }
        }
    }
    let mut shape = volume.shape().to_vec();
    let r = shape.len();
    shape[r - 3..].fill(e);
    Tensor::new(&shape, out)
}

/// Offsets `floor((in - extent) / 2)` per axis.
pub fn center_crop(volume: &Tensor<f32>, extent: usize) -> Result<(Tensor<f32>, Crop)> {
    let (_, dims) = split_spatial(volume.shape())?;
    check_extent(dims, extent)?;
    let crop = Crop {
        offsets: dims.map(|d| (d - extent) / 2),
        extent,
    };
    Ok((crop_at(volume, crop)?, crop))
}

/// Offsets uniform over all valid positions, drawn in axis order.
pub fn random_crop(volume: &Tensor<f32>, extent: usize, rng: &mut impl RngCore) -> Result<(Tensor<f32>, Crop)> {
    let (_, dims) = split_spatial(volume.shape())?;
    check_extent(dims, extent)?;
    let crop = Crop {
        offsets: dims.map(|d| rng.random_range(0..=d - extent)),
        extent,
    };
    Ok((crop_at(volume, crop)?, crop))
}
