pub mod autograd;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod ingestion;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod window;

pub use error::{Error, Result};
