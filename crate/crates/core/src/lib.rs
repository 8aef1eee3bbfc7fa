//! Region-to-region prototype attention engine.
//!
//! A small self-contained deep-learning stack: an f64 tape-autodiff tensor
//! core, an interpretable attention block built on learnable prototype keys
//! and values, a staged convolutional classifier around it, desk-scale
//! training with AdamW and cosine annealing, and mask-based explanation
//! export with classification/localization metrics.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod train;
pub mod attention;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
