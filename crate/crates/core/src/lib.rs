//! Generalized few-shot segmentation (GFSS) adaptation over frozen per-pixel
//! features: a two-branch head (linear classifier + per-pixel column-stochastic
//! similarity-transition matrix), margin-rectified cross-entropy with
//! class-frequency margins, a transductive class-proportion regularizer, and
//! the synthetic episode generation / evaluation machinery around them.

pub mod adapt;
pub mod error;
pub mod head;
pub mod loss;
pub mod metrics;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Sentinel class id marking pixels excluded from supervision and scoring.
pub const IGNORE_LABEL: u16 = 0xFFFF;
