//! Masked degradation-classification pre-training (MaskDCPT) for all-in-one image
//! restoration, at desk scale.
//!
//! The crate covers the whole loop: a synthetic paired corpus ([`degrade`]), patch
//! masking ([`masking`]), a convolutional encoder with submanifold masking and two
//! decoders ([`model`]), the focal + L1 objective ([`objectives`]), pre-training and
//! fine-tuning ([`pipeline`]), the kNN degradation probe ([`probe`]) and metrics,
//! reports and ablations ([`eval`]).

pub mod degrade;
pub mod error;
pub mod eval;
pub mod image;
pub mod masking;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod probe;
pub mod seed;

pub use error::{Error, Result};
pub use image::ImageTensor;
