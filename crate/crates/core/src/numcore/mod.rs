//! Dense tensors and reverse-mode differentiation for small feed-forward
//! encoders and the training objectives.

pub mod linalg;
pub mod tape;
pub mod tensor;

pub use tape::{affine, pairwise_l2, softmax, Activation, Gradients, Tape, Var, DIST_EPS};
pub use tensor::Tensor;
