//! Lossless multi-modal compression.
//!
//! Raw data from seven modalities is mapped into one reversible token space,
//! a small recurrent network with two mixture-of-experts routers predicts the
//! next token, and an integer range coder turns those predictions into bits.

pub mod coder;
pub mod corpus;
pub mod error;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod routing;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
