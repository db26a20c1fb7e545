pub mod combinatorics;
pub mod error;
pub mod kernels;
pub mod normalization;
pub mod quad;
pub mod rates;
pub mod sampler;
pub mod rng;
pub mod tree;

pub use error::{Error, Result};
