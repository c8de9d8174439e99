//! Semi-convolutional pixel embeddings for instance coloring.
//!
//! A convolutional network cannot give distinct colors to identical copies of
//! an object: it is translation equivariant. Adding each pixel's coordinates to
//! the network output breaks that symmetry cheaply. This crate provides the
//! operator, the pull-to-mean embedding loss, affinity kernels steered by the
//! embedding, seed-based mask extraction, and a synthetic benchmark that
//! contrasts convolutional and semi-convolutional embeddings.

pub mod backbone;
pub mod dilemma;
pub mod error;
pub mod gradsuite;
pub mod json;
pub mod kernels;
pub mod labeling;
pub mod losses;
pub mod optim;
pub mod render;
pub mod seedcut;
pub mod semiconv;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use labeling::InstanceLabeling;
