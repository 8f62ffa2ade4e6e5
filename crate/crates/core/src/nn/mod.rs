//! Differentiable layers with explicit forward and backward passes.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod cosine;
pub mod loss;
pub mod math;
pub mod pool;

pub use activation::{leaky_relu, leaky_relu_backward, LEAKY_SLOPE};
pub use batchnorm::{BatchNorm2d, BnCache, BnGrads, Mode};
pub use conv::{Conv2d, ConvGrads};
pub use cosine::{CosineBatch, CosineClassifier, DEFAULT_SCALE_ADV, DEFAULT_SCALE_TRAIN};
pub use loss::{
    cross_entropy, cross_entropy_logit_grad, entropy, entropy_logit_grad, softmax, ProbVector,
};
pub use pool::{maxpool2x2, maxpool2x2_backward, Pooled};
