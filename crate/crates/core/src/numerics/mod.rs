//! Dense matrices, affine layers and the handful of differentiable pieces the
//! cascade needs. Everything is `f64`.

mod grl;
mod layer;
mod matrix;
mod ops;

pub use grl::{grl_backward, GrlGate};
pub use layer::{affine_forward, sgd_momentum_step, DenseGrads, DenseLayer};
pub use matrix::{argmax, Matrix};
pub use ops::{
    binary_cross_entropy, cosine_similarity, cross_entropy, relu, relu_backward, sigmoid,
    softmax_rows, PROB_FLOOR,
};
