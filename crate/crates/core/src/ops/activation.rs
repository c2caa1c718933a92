use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.max_scalar(T::zero())
}

/// Passes the gradient where `x > 0`; the subgradient at exactly 0 is 0.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu_backward",
            left: grad_out.shape().to_vec(),
            right: x.shape().to_vec(),
        });
    }
    let data = grad_out
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}
