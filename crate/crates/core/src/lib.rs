//! Attribution maps for image classifiers, explanation-quality metrics, metric
//! weighted fusion and a trained explanation optimizer that combines baseline
//! attribution methods into a single explanation.

pub(crate) mod codec;
pub mod attribution;
pub mod classifier;
pub mod data;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
