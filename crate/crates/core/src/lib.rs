//! Decoder-only time-series forecasting with in-context examples.
//!
//! A context is an ordered list of example windows whose last element is the
//! forecast target. Examples are patched into tokens, separated by a shared
//! learnable separator embedding and fed through a causal transformer with no
//! positional encodings. Each token predicts the next `h` points of its own
//! example.

pub mod checkpoint;
pub mod contextgen;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod model;
pub mod seed;
pub mod synthetic;
pub mod tensor;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
