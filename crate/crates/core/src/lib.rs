//! rafl: a desk-scale transformer encoder lab built around residual attention.
//!
//! The crate trains small BERT-style masked language models with three layer
//! wirings (post-LN, pre-LN, and post-LN with a residual score skip edge) on
//! synthetic corpora, entirely in 64-bit floats on the CPU, and ships the
//! probes used to validate it: gradient checks against finite differences,
//! bitwise equivalence oracles, and attention entropy / Jensen-Shannon
//! divergence analyses.

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
