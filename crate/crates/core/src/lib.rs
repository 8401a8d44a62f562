//! One-shot medical image segmentation by correlation-weighted prototype
//! aggregation, trained self-supervised on superpixel pseudo-labels.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: tensors and a reverse-mode tape.
//! - [`encoder`]: the dilated convolutional feature extractor.
//! - [`superpixel`]: Felzenszwalb segmentation and pseudo-mask sampling.
//! - [`transforms`]: affine, elastic and gamma augmentations.
//! - [`head`]: prototype extraction, correlation, aggregation and scoring.
//! - [`model`]: encoder plus head, end to end.
//! - [`training`]: episodes, losses and the SGD loop.
//! - [`evaluation`]: the one-shot protocol, quadrant masking and Dice.
//! - [`io`]: binary volume/checkpoint formats, config files and synthetic data.

pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod head;
pub mod io;
pub mod mask;
pub mod model;
pub mod numerics;
pub mod superpixel;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
pub use mask::BinaryMask;
pub use numerics::{Scalar, Tape, Tensor, Var};
