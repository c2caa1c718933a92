//! Volumetric CNN engine for three-way (CN / MCI / AD) brain-scan
//! classification: tensors, differentiable 3D layers, the backbone model,
//! training, metrics and saliency maps.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod saliency;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::{Rng, Stream};
pub use tensor::{DType, Init, Scalar, Tensor};
