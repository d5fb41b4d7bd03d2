pub mod bench;
pub mod checkpoint;
pub mod data;
mod error;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
