//! Time-series classification with class-specific attention (CSA).
//!
//! The crate is organised around a small reverse-mode autodiff tape
//! ([`tensor`]), the neural-network layers and optimizer built on it
//! ([`nn`]), the CSA module itself ([`csa`]), the assembled FCN models
//! ([`model`]), dataset ingestion ([`data`]), and the evaluation
//! protocol ([`eval`]): accuracy, accuracy improvement, chi-square
//! significance, and a DTW 1-NN baseline.

pub mod csa;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod reference;
pub mod tensor;
pub mod threading;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
