//! Federated training of miniature detection transformers on synthetic
//! angiography-like key frames.
//!
//! Each simulated node trains a small DETR-style detector on its own non-IID
//! data; a server aggregates a strategy-dependent subset of the parameters
//! (everything, everything but batch norm, the CNN backbone only, or nothing)
//! after every round.

pub mod cli;
pub mod error;
pub mod federation;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
