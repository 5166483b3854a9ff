//! Level-of-detail exploration engine for large time-dependent scalar volumes.

pub mod backend;
pub mod client;
pub mod error;
pub mod extract;
pub mod math;
pub mod model;
pub mod preprocess;
pub mod protocol;

pub use error::{Error, Result};
