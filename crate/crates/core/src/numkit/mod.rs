//! Dense tensor math, reverse-mode differentiation and SGD.

pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{sgd_step, ParamGroup};
pub use tape::{
    elementwise, gelu, layer_norm, relu, softmax_cross_entropy, Elementwise, Gradients, Tape, Var,
};
pub use tensor::Tensor;
