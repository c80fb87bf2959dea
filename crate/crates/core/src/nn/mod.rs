//! Tensors, layer primitives and the sleep-staging network.

pub mod checkpoint;
pub mod conv;
pub mod model;
pub mod norm;
pub mod ops;
pub mod tensor;

pub use conv::{conv1d_backward, conv1d_forward, ConvLayer, ConvSpec};
pub use model::{
    BlockConfig, ConvUnit, ForwardCache, Gradients, LayerConfig, Model, ModelConfig, ResidualBlock,
};
pub use norm::{BatchNormState, Mode};
pub use ops::{
    affine_forward, channel_shuffle, dropout, global_average_pool, relu, shuffle_permutation,
    softmax_rows,
};
pub use tensor::{Matrix, Real, Tensor3};
