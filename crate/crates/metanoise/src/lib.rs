//! Meta-learning optimization lab.
//!
//! Building blocks for studying memorization in gradient-based meta-learning:
//! a nestable reverse-mode autodiff tape, small MLPs, non-mutually-exclusive
//! task generators, MAML with noise-augmented updates, cosine-weighted
//! feedback retraining, and a config-driven experiment harness.

pub mod autodiff;
pub mod error;
pub mod feedback;
pub mod harness;
pub mod maml;
pub mod nn;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};
