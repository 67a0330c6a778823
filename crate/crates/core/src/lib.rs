//! Core building blocks for serving explanations as a shared service at the
//! edge: small analytic models, perturbation and gradient explainers, a
//! projection encoder, the two-tier semantic explanation cache with its
//! validity checks, lightweight verification and the adaptive method/location
//! selector.
//!
//! Everything here is deterministic given explicit seeds. The simulator and
//! the network service both drive the same [`pipeline`] functions.

pub mod cache;
pub mod embedding;
pub mod error;
pub mod explain;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod selector;
pub mod verify;

pub use error::{Result, XaasError};
