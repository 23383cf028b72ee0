pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod thresholds;
pub mod train;

pub use error::{Error, Result};
