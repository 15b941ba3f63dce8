//! Multimodal plant-disease classifier built on a self-contained autodiff engine.

pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod export;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tensor, Tape, Var};
