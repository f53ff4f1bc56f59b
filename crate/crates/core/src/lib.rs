//! Feature-centric explanation pipeline for multivariate time-series
//! classification: image encoding (recurrence plots, Gramian angular fields),
//! a depthwise channel-attention model with a QR-based orthogonality
//! regularizer, importance measures (global and class-wise), and the
//! remove-and-retrain evaluation harness, plus a synthetic benchmark
//! generator with known ground-truth feature importance.

pub mod data;
pub mod encode;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod qr;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{CafoError, Result};
pub use tensor::{Graph, Tensor, Var};
