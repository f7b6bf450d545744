//! Task distributions.

pub mod sinusoid;
pub mod pool;
pub mod image;
