//! Dense tensors with reverse-mode differentiation.

pub mod gradcheck;
mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use kernels::ConvGeometry;
pub use scalar::Scalar;
pub use tape::{Tape, Var, COSINE_EPS, LOG_CLAMP};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
