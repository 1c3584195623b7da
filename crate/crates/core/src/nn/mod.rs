//! Differentiable volumetric layer primitives with explicit backward passes.

pub mod activation;
pub mod conv;
mod gemm;
pub mod init;
pub mod layers;
pub mod linear;
pub mod norm;
pub mod param;

pub use activation::{
    leaky_relu_backward, leaky_relu_forward, softmax_channels_backward, softmax_channels_forward,
    DEFAULT_NEGATIVE_SLOPE,
};
pub use conv::{conv3d_backward, conv3d_forward, conv_transpose3d_backward, conv_transpose3d_forward, ConvGrads};
pub use init::he_init;
pub use layers::{BlockCache, Conv, ConvBlock, ConvTranspose, InstanceNorm, Linear};
pub use linear::{global_avg_pool, global_avg_pool_backward, linear_backward, linear_forward};
pub use norm::{instance_norm_backward, instance_norm_forward, NormCache, INSTANCE_NORM_EPS};
pub use param::{Param, ParamStore};
