//! Numeric building blocks: convolution, pooling, normalization, the flat
//! linear layer, and classification losses.

pub mod conv;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod pool;

pub use conv::{conv2d, conv2d_backward, conv_out_dims, im2col, ConvParams};
pub use linear::{linear, linear_backward};
pub use loss::{classification_loss, correct_count, sigmoid_bce, softmax_cross_entropy, LossKind};
pub use norm::{
    batchnorm_backward, batchnorm_forward_stats, batchnorm_infer, batchnorm_train,
    BatchNormParams, BnCache, BN_DEFAULT_EPS, BN_DEFAULT_MOMENTUM,
};
pub use pool::{
    avgpool2, avgpool2_backward, global_avgpool, global_avgpool_backward, maxpool2,
    maxpool2_backward, MaxPoolCache,
};
