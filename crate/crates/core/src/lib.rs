//! Numeric core of the toolkit: a small reverse-mode autodiff engine, a
//! decoder-only transformer whose feed-forward layers can be replaced by
//! sparse mixture-of-experts layers, the training objectives and the
//! two-stage training pipeline.

pub mod data;
pub mod error;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
