//! Unpadded 3D max pooling.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `floor((in - k)/s) + 1`, or `None` if the window does not fit.
pub fn pool_out_extent(input: usize, k: usize, s: usize) -> Option<usize> {
    (k >= 1 && s >= 1 && k <= input).then(|| (input - k) / s + 1)
}

/// Forward result: pooled values plus, for each output element, the flat
/// input offset its value came from.
#[derive(Debug, Clone)]
pub struct PoolOutput<T: Scalar> {
    pub y: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// Max over each `k^3` window with stride `s`. Ties resolve to the first
/// maximal element in row-major window order.
pub fn maxpool3d_forward<T: Scalar>(x: &Tensor<T>, k: usize, s: usize) -> Result<PoolOutput<T>> {
    let xs = x.shape();
    if xs.len() != 5 {
        return Err(Error::invalid(format!(
            "maxpool3d expects [N,C,D,H,W], got {xs:?}"
        )));
    }
    let mut o = [0usize; 3];
    for a in 0..3 {
        o[a] = pool_out_extent(xs[2 + a], k, s).ok_or_else(|| {
            Error::invalid(format!(
                "maxpool3d k{k}-s{s}: window larger than input extent {} on axis {a}",
                xs[2 + a]
            ))
        })?;
    }
    let (id, ih, iw) = (xs[2], xs[3], xs[4]);
    let planes = xs[0] * xs[1];
    let in_vol = id * ih * iw;
    let out_vol = o[0] * o[1] * o[2];
    let data = x.data();
    let mut y = Vec::with_capacity(planes * out_vol);
    let mut argmax = Vec::with_capacity(planes * out_vol);
    for pl in 0..planes {
        let base = pl * in_vol;
        for oz in 0..o[0] {
            for oy in 0..o[1] {
                for ox in 0..o[2] {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for kz in 0..k {
                        for ky in 0..k {
                            let row = base + ((oz * s + kz) * ih + oy * s + ky) * iw + ox * s;
                            for kx in 0..k {
                                let v = data[row + kx];
                                if best_i == usize::MAX || v > best {
                                    best = v;
                                    best_i = row + kx;
                                }
                            }
                        }
                    }
                    y.push(best);
                    argmax.push(best_i);
                }
            }
        }
    }
    Ok(PoolOutput {
        y: Tensor::from_parts(vec![xs[0], xs[1], o[0], o[1], o[2]], y),
        argmax,
    })
}

/// Route each upstream gradient to its recorded argmax, accumulating on
/// overlapping windows.
pub fn maxpool3d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::invalid(format!(
            "maxpool3d_backward: {} indices for {} upstream gradients",
            argmax.len(),
            grad_out.len()
        )));
    }
    let n: usize = input_shape.iter().product();
    let mut gx = vec![T::zero(); n];
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        if i >= n {
            return Err(Error::invalid(format!(
                "maxpool3d_backward: index {i} out of range for input of {n} elements"
            )));
        }
        gx[i] = gx[i] + g;
    }
    Tensor::new(input_shape, gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Rng, Stream};
    use crate::tensor::Init;

    #[test]
    fn table2_pool_extents() {
        assert_eq!(pool_out_extent(96, 3, 2), Some(47));
        assert_eq!(pool_out_extent(43, 3, 2), Some(21));
        assert_eq!(pool_out_extent(17, 3, 2), Some(8));
        // final pool of the backbone: the floor formula gives 1, not the printed 5
        assert_eq!(pool_out_extent(6, 5, 2), Some(1));
        assert_eq!(pool_out_extent(4, 5, 2), None);
    }

    #[test]
    fn pooled_shape_by_forward() {
        let x = Tensor::<f32>::zeros(&[1, 1, 43, 43, 43]).unwrap();
        assert_eq!(maxpool3d_forward(&x, 3, 2).unwrap().y.shape(), &[1, 1, 21, 21, 21]);
    }

    #[test]
    fn constant_input_picks_first_element() {
        let x = Tensor::<f64>::full(&[1, 2, 5, 5, 5], 3.0).unwrap();
        let out = maxpool3d_forward(&x, 3, 2).unwrap();
        assert!(out.y.data().iter().all(|&v| v == 3.0));
        // first output of plane 1 starts at that plane's origin
        assert_eq!(out.argmax[0], 0);
        assert_eq!(out.argmax[8], 125);
        // second window along W starts two columns in
        assert_eq!(out.argmax[1], 2);
    }

    #[test]
    fn non_overlapping_routing_conserves_mass() {
        let mut s = Rng::new(1).stream(Stream::Test, 0);
        let x = Tensor::<f64>::init(Init::Uniform(-1.0, 1.0), &[2, 1, 6, 6, 6], &mut s).unwrap();
        let out = maxpool3d_forward(&x, 2, 2).unwrap();
        let g = Tensor::<f64>::init(Init::Uniform(-1.0, 1.0), out.y.shape(), &mut s).unwrap();
        let gx = maxpool3d_backward(&g, &out.argmax, x.shape()).unwrap();
        assert!((gx.sum_all() - g.sum_all()).abs() < 1e-12);

        let zero = Tensor::<f64>::zeros(out.y.shape()).unwrap();
        let gx0 = maxpool3d_backward(&zero, &out.argmax, x.shape()).unwrap();
        assert!(gx0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn errors() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 4, 4]).unwrap();
        assert!(maxpool3d_forward(&x, 3, 2).is_err());
        let g = Tensor::<f32>::ones(&[1]).unwrap();
        assert!(maxpool3d_backward(&g, &[100], &[1, 1, 2, 2, 2]).is_err());
    }
}
