//! Deterministic reverse-mode differentiation, AdamW, seeded streams and
//! checkpoint records.

pub mod checkpoint;
mod conv;
pub mod gradcheck;
mod optim;
mod params;
mod real;
mod rng;
mod tape;
mod tensor;

use thiserror::Error;

pub use optim::{AdamWConfig, LrSchedule, OptimizerState};
pub use params::ParamSet;
pub use real::Real;
pub use rng::{mix64, stream_id, RngStream};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Tensor, Tensor32};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: invalid attribute: {detail}")]
    InvalidAttr { op: &'static str, detail: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-finite gradient for parameter {name}")]
    NonFinite { name: String },
    #[error("optimizer schedule exhausted after {total} steps")]
    ScheduleExhausted { total: u64 },
}
