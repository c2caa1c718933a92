use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct LinearGrads<T: Scalar> {
    pub x: Tensor<T>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

fn dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "linear (x [N,F_in] vs w [F_out,F_in])",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    Ok((x.shape()[0], x.shape()[1], w.shape()[0]))
}

/// `y = x w^T + b`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f_in, f_out) = dims(x, w)?;
    if b.shape() != [f_out] {
        return Err(Error::ShapeMismatch {
            op: "linear bias",
            left: b.shape().to_vec(),
            right: vec![f_out],
        });
    }
    let mut y = Vec::with_capacity(n * f_out);
    for _ in 0..n {
        y.extend_from_slice(b.data());
    }
    gemm(
        MatRef::new(x.data(), n, f_in),
        MatRef::t(w.data(), f_in, f_out),
        T::one(),
        &mut y,
        f_out,
    );
    Ok(Tensor::from_parts(vec![n, f_out], y))
}

pub fn linear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (n, f_in, f_out) = dims(x, w)?;
    if grad_out.shape() != [n, f_out] {
        return Err(Error::ShapeMismatch {
            op: "linear_backward grad_out",
            left: grad_out.shape().to_vec(),
            right: vec![n, f_out],
        });
    }
    let g = grad_out.data();
    let mut gx = vec![T::zero(); n * f_in];
    gemm(MatRef::new(g, n, f_out), MatRef::new(w.data(), f_out, f_in), T::zero(), &mut gx, f_in);
    let mut gw = vec![T::zero(); f_out * f_in];
    gemm(MatRef::t(g, f_out, n), MatRef::new(x.data(), n, f_in), T::zero(), &mut gw, f_in);
    let mut gb = vec![T::zero(); f_out];
    for row in g.chunks(f_out) {
        for (a, &v) in gb.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    Ok(LinearGrads {
        x: Tensor::from_parts(vec![n, f_in], gx),
        w: Tensor::from_parts(vec![f_out, f_in], gw),
        b: Tensor::from_parts(vec![f_out], gb),
    })
}
