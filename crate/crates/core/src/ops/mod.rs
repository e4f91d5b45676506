//! Primitive forward kernels and their hand-written adjoints.

mod activation;
mod conv;
mod linear;
mod norm;
mod pool;
mod resample;

pub use activation::{relu, sigmoid, softmax_channel};
pub use conv::{conv2d, conv_out_dim, ConvGeom, ConvParams};
pub use linear::fully_connected;
pub use norm::{batch_norm, BatchNormParams, Mode, BN_EPS, BN_MOMENTUM};
pub use pool::{avg_pool2d, global_avg_pool, max_pool2d};
pub use resample::bilinear_upsample;

pub(crate) use activation::{sigmoid_scalar, softmax_channel_backward};
pub(crate) use conv::{conv2d_backward, conv2d_forward, ConvDims};
pub(crate) use linear::fully_connected_backward;
pub(crate) use norm::{batch_norm_eval, batch_norm_train, batch_norm_train_backward, update_running, BnCache};
pub(crate) use pool::{avg_pool2d_backward, global_avg_pool_backward, max_pool2d_backward, max_pool2d_with_argmax};
pub(crate) use resample::bilinear_upsample_backward;
