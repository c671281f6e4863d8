//! Circuit tracing for small masked language models.

pub mod circuits;
pub mod error;
pub mod graph;
pub mod lm;
pub mod probes;
pub mod replacement;
pub mod steering;
pub mod tensor;
pub mod transcoder;

pub use error::{Error, Result};
