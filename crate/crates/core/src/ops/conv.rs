//! 3D cross-correlation with cubic kernels, padding, stride and dilation.
//!
//! Both passes unroll input patches into a column buffer (im2col) and hand
//! the contraction to GEMM. Output positions are processed in depth slabs so
//! the column buffer stays bounded for wide layers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Upper bound on column-buffer elements per slab.
const COL_BUDGET: usize = 1 << 24;

/// Cubic convolution hyper-parameters, named as in `k3-c32-p0-s1-d2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub k: usize,
    pub c_out: usize,
    pub p: usize,
    pub s: usize,
    pub d: usize,
}

impl ConvSpec {
    pub fn new(k: usize, c_out: usize, p: usize, s: usize, d: usize) -> Result<Self> {
        let spec = Self { k, c_out, p, s, d };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.s == 0 || self.d == 0 || self.c_out == 0 {
            return Err(Error::invalid(format!(
                "conv spec needs k, c, s, d >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// `d*(k-1) + 1`.
    pub fn effective_kernel(&self) -> usize {
        self.d * (self.k - 1) + 1
    }

    /// Output extent along one axis, or `None` if the dilated kernel does
    /// not fit in the padded input.
    pub fn out_extent(&self, input: usize) -> Option<usize> {
        conv_out_extent(input, self.k, self.p, self.s, self.d)
    }
}

impl std::fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "k{}-c{}-p{}-s{}-d{}", self.k, self.c_out, self.p, self.s, self.d)
    }
}

/// `floor((in + 2p - d(k-1) - 1)/s) + 1`, or `None` when that is not positive.
pub fn conv_out_extent(input: usize, k: usize, p: usize, s: usize, d: usize) -> Option<usize> {
    let padded = input + 2 * p;
    let eff = d * (k - 1) + 1;
    if k == 0 || s == 0 || d == 0 || eff > padded {
        return None;
    }
    Some((padded - eff) / s + 1)
}

/// Gradients of [`conv3d_forward`].
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar> {
    pub x: Tensor<T>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c_in: usize,
    c_out: usize,
    input: [usize; 3],
    output: [usize; 3],
    k: usize,
    p: usize,
    s: usize,
    d: usize,
}

impl Geometry {
    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k * self.k
    }
    /// Output depth slices per slab.
    fn slab(&self) -> usize {
        let per_slice = self.patch() * self.output[1] * self.output[2];
        (COL_BUDGET / per_slice.max(1)).clamp(1, self.output[0])
    }
}

fn geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 5 {
        return Err(Error::invalid(format!(
            "conv3d expects input [N,C,D,H,W], got {xs:?}"
        )));
    }
    let k = spec.k;
    if ws != [spec.c_out, xs[1], k, k, k] {
        return Err(Error::ShapeMismatch {
            op: "conv3d weight",
            left: ws.to_vec(),
            right: vec![spec.c_out, xs[1], k, k, k],
        });
    }
    let mut output = [0; 3];
    for a in 0..3 {
        output[a] = spec.out_extent(xs[2 + a]).ok_or_else(|| {
            Error::invalid(format!(
                "conv3d {spec}: effective kernel {} exceeds padded input extent {} on axis {a}",
                spec.effective_kernel(),
                xs[2 + a] + 2 * spec.p
            ))
        })?;
    }
    Ok(Geometry {
        n: xs[0],
        c_in: xs[1],
        c_out: spec.c_out,
        input: [xs[2], xs[3], xs[4]],
        output,
        k,
        p: spec.p,
        s: spec.s,
        d: spec.d,
    })
}

/// Input coordinate hit by output position `o` and kernel tap `t`, if inside.
#[inline]
fn tap(o: usize, t: usize, g: &Geometry, extent: usize) -> Option<usize> {
    let pos = (o * g.s + t * g.d) as isize - g.p as isize;
    (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
}

/// Fill `col[patch, slab_positions]` for output depth slices `z0..z1`.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, z0: usize, z1: usize, col: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let cols = (z1 - z0) * oh * ow;
    let k = g.k;
    for c in 0..g.c_in {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let mut j = 0;
                    for oz in z0..z1 {
                        let Some(iz) = tap(oz, kd, g, id) else {
                            dst[j..j + oh * ow].fill(T::zero());
                            j += oh * ow;
                            continue;
                        };
                        for oy in 0..oh {
                            let Some(iy) = tap(oy, kh, g, ih) else {
                                dst[j..j + ow].fill(T::zero());
                                j += ow;
                                continue;
                            };
                            let src = &xc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            for ox in 0..ow {
                                dst[j] = match tap(ox, kw, g, iw) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                                j += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add `col` back onto the input gradient (adjoint of [`im2col`]).
fn col2im<T: Scalar>(col: &[T], g: &Geometry, z0: usize, z1: usize, gx: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let cols = (z1 - z0) * oh * ow;
    let k = g.k;
    for c in 0..g.c_in {
        let gc = &mut gx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let src = &col[row * cols..(row + 1) * cols];
                    let mut j = 0;
                    for oz in z0..z1 {
                        let Some(iz) = tap(oz, kd, g, id) else {
                            j += oh * ow;
                            continue;
                        };
                        for oy in 0..oh {
                            let Some(iy) = tap(oy, kh, g, ih) else {
                                j += ow;
                                continue;
                            };
                            let base = (iz * ih + iy) * iw;
                            for ox in 0..ow {
                                if let Some(ix) = tap(ox, kw, g, iw) {
                                    gc[base + ix] = gc[base + ix] + src[j];
                                }
                                j += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = geometry(x, w, spec)?;
    if b.shape() != [g.c_out] {
        return Err(Error::ShapeMismatch {
            op: "conv3d bias",
            left: b.shape().to_vec(),
            right: vec![g.c_out],
        });
    }
    let (in_vol, out_vol, patch) = (g.in_vol(), g.out_vol(), g.patch());
    let plane = g.output[1] * g.output[2];
    let slab = g.slab();
    let mut out = vec![T::zero(); g.n * g.c_out * out_vol];

    out.par_chunks_mut(g.c_out * out_vol)
        .enumerate()
        .for_each(|(n, yn)| {
            let xn = &x.data()[n * g.c_in * in_vol..(n + 1) * g.c_in * in_vol];
            for (c, yc) in yn.chunks_mut(out_vol).enumerate() {
                yc.fill(b.data()[c]);
            }
            let mut col = vec![T::zero(); patch * slab * plane];
            let mut z0 = 0;
            while z0 < g.output[0] {
                let z1 = (z0 + slab).min(g.output[0]);
                let cols = (z1 - z0) * plane;
                im2col(xn, &g, z0, z1, &mut col[..patch * cols]);
                gemm(
                    MatRef::new(w.data(), g.c_out, patch),
                    MatRef::new(&col[..patch * cols], patch, cols),
                    T::one(),
                    &mut yn[z0 * plane..],
                    out_vol,
                );
                z0 = z1;
            }
        });

    Ok(Tensor::from_parts(
        vec![g.n, g.c_out, g.output[0], g.output[1], g.output[2]],
        out,
    ))
}

pub fn conv3d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let g = geometry(x, w, spec)?;
    let expect = [g.n, g.c_out, g.output[0], g.output[1], g.output[2]];
    if grad_out.shape() != expect {
        return Err(Error::ShapeMismatch {
            op: "conv3d_backward grad_out",
            left: grad_out.shape().to_vec(),
            right: expect.to_vec(),
        });
    }
    let (in_vol, out_vol, patch) = (g.in_vol(), g.out_vol(), g.patch());
    let plane = g.output[1] * g.output[2];
    let slab = g.slab();
    let mut gx = vec![T::zero(); g.n * g.c_in * in_vol];

    // Per-sample weight gradients are summed afterwards in sample order so the
    // result does not depend on how rayon schedules the samples.
    let partial_w: Vec<Vec<T>> = gx
        .par_chunks_mut(g.c_in * in_vol)
        .enumerate()
        .map(|(n, gxn)| {
            let xn = &x.data()[n * g.c_in * in_vol..(n + 1) * g.c_in * in_vol];
            let gyn = &grad_out.data()[n * g.c_out * out_vol..(n + 1) * g.c_out * out_vol];
            let mut gw = vec![T::zero(); g.c_out * patch];
            let mut col = vec![T::zero(); patch * slab * plane];
            let mut gcol = vec![T::zero(); patch * slab * plane];
            let mut gy_slab = vec![T::zero(); g.c_out * slab * plane];
            let mut z0 = 0;
            while z0 < g.output[0] {
                let z1 = (z0 + slab).min(g.output[0]);
                let cols = (z1 - z0) * plane;
                // Contiguous copy of this slab's upstream gradient, [c_out, cols].
                for c in 0..g.c_out {
                    gy_slab[c * cols..(c + 1) * cols]
                        .copy_from_slice(&gyn[c * out_vol + z0 * plane..c * out_vol + z1 * plane]);
                }
                let gy = MatRef::new(&gy_slab[..g.c_out * cols], g.c_out, cols);
                im2col(xn, &g, z0, z1, &mut col[..patch * cols]);
                // gw[c_out, patch] += gy[c_out, cols] * col^T[cols, patch]
                gemm(
                    gy,
                    MatRef::t(&col[..patch * cols], cols, patch),
                    T::one(),
                    &mut gw,
                    patch,
                );
                // gcol[patch, cols] = w^T[patch, c_out] * gy[c_out, cols]
                gemm(
                    MatRef::t(w.data(), patch, g.c_out),
                    gy,
                    T::zero(),
                    &mut gcol[..patch * cols],
                    cols,
                );
                col2im(&gcol[..patch * cols], &g, z0, z1, gxn);
                z0 = z1;
            }
            gw
        })
        .collect();

    let mut gw = vec![T::zero(); g.c_out * patch];
    for p in &partial_w {
        for (a, &v) in gw.iter_mut().zip(p) {
            *a = *a + v;
        }
    }
    let mut gb = vec![T::zero(); g.c_out];
    for n in 0..g.n {
        for (c, acc) in gb.iter_mut().enumerate() {
            let off = (n * g.c_out + c) * out_vol;
            *acc = *acc + grad_out.data()[off..off + out_vol].iter().copied().sum::<T>();
        }
    }

    Ok(ConvGrads {
        x: Tensor::from_parts(x.shape().to_vec(), gx),
        w: Tensor::from_parts(w.shape().to_vec(), gw),
        b: Tensor::from_parts(vec![g.c_out], gb),
    })
}
