//! Attentional convolutional network for facial expression recognition.
//!
//! The crate is `no_std` (with `alloc`): everything here is pure computation.
//! File formats, dataset directories and the command line live in the
//! companion `attnfer` crate.
//!
//! Pipeline: a spatial-transformer branch regresses an affine transform from
//! the input face, the input is resampled through the induced grid, and a
//! four-convolution classifier produces seven emotion logits. Training
//! minimises cross-entropy plus an L2 penalty on the two fully-connected
//! classifier layers with Adam.

#![cfg_attr(not(feature = "std"), no_std)]
#![warn(rust_2018_idioms, unused_qualifications)]

extern crate alloc;

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod optim;
pub mod rng;
pub mod saliency;
pub mod scalar;
pub mod stn;
pub mod tensor;
pub mod traineval;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Number of emotion classes used by every dataset.
pub const NUM_CLASSES: usize = 7;
