//! Gradient rectification for metric learning, end to end: a memory queue of
//! recent descriptors feeds a covariance estimate, whose eigenbasis builds a
//! projection that reshapes descriptor gradients before backpropagation. The
//! crate bundles the rectifier itself, a small MLP training harness with
//! contrastive / triplet / prototype losses, synthetic retrieval data,
//! spectrum diagnostics, and binary + CSV artifact formats, all deterministic
//! at fixed seed.

pub mod covariance;
pub mod error;
pub mod grm;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod model;

pub use error::{Error, Result};
