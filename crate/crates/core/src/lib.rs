//! Saddle-guided, function-preserving neuron growth for vision transformers.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), a
//! dense symmetric eigensolver ([`eigen`]), a DeiT-style model with growable
//! linear layers ([`model`]), the growth operator ([`growth`]), per-neuron
//! curvature analysis ([`hessian`]), the growth scheduler ([`scheduler`]) and
//! an end-to-end training harness ([`harness`]).

pub mod eigen;
pub mod error;
pub mod growth;
pub mod harness;
pub mod hessian;
pub mod model;
pub mod scheduler;
pub mod tensor;

pub use error::{Error, Result};
