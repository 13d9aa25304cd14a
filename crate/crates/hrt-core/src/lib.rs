//! Hierarchical resolution transformer (HRT): a multi-resolution sequence
//! pyramid with per-scale attention blocks, bidirectional cross-resolution
//! attention with gated fusion, wavelet-style reduction/reconstruction, and
//! an instrumented cost accountant that compares the hierarchy against a
//! parameter-matched flat transformer baseline.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod cross;
pub mod model;
pub mod error;
pub mod ledger;
pub mod pyramid;
pub mod tasks;
pub mod training;
pub mod tensor;

pub use error::{HrtError, Result};
