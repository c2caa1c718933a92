//! Sinusoidal age encoding.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAX_AGE: f64 = 120.0;
pub const DEFAULT_D_MODEL: usize = 128;

/// Round to the nearest half year (halves round up).
pub fn round_age(age: f64) -> f64 {
    (age * 2.0).round() / 2.0
}

/// `AE[2i] = sin(a / 10000^(2i/d))`, `AE[2i+1] = cos(a / 10000^(2i/d))` for
/// `a` the age rounded to half a year.
pub fn age_encode<T: Scalar>(age: f64, d_model: usize) -> Result<Tensor<T>> {
    if !(0.0..=MAX_AGE).contains(&age) {
        return Err(Error::invalid(format!("age {age} outside [0, {MAX_AGE}]")));
    }
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::invalid(format!("d_model must be even and positive, got {d_model}")));
    }
    let a = round_age(age);
    let mut out = Vec::with_capacity(d_model);
    for i in 0..d_model / 2 {
        let arg = a / 10000f64.powf((2 * i) as f64 / d_model as f64);
        out.push(T::of(arg.sin()));
        out.push(T::of(arg.cos()));
    }
    Tensor::new(&[d_model], out)
}
