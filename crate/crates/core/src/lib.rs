//! Universal adversarial framings for convolutional classifiers.
//!
//! A framing is a learned border of width `W` placed around every input. The
//! original pixels are never modified; only the surrounding frame is
//! optimised so that a frozen classifier misclassifies framed inputs.

mod bytes;
pub mod classifier;
pub mod composition;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod framing;
pub mod gradcheck;
pub mod optim;
pub mod par;
pub mod tensor;

pub use error::{Error, FormatError, Result};
