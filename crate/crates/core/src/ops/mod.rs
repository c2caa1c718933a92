//! Differentiable layers: each forward has a matching backward that maps
//! upstream gradients to input and parameter gradients.

pub mod activation;
pub mod age;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod pool;

pub use activation::{relu, relu_backward};
pub use age::{age_encode, round_age};
pub use conv::{conv3d_backward, conv3d_forward, conv_out_extent, ConvGrads, ConvSpec};
pub use linear::{linear_backward, linear_forward, LinearGrads};
pub use loss::{softmax, softmax_xent, XentOutput};
pub use norm::{
    batch_norm_forward, instance_norm_forward, layer_norm_forward, norm_backward, Mode, NormGrads,
    NormKind, NormState, NormVariant, RunningStats,
};
pub use pool::{maxpool3d_backward, maxpool3d_forward, pool_out_extent, PoolOutput};
