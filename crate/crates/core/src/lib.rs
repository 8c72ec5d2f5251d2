pub mod cli;
pub mod data;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod orthogonalize;

pub use error::{Error, Result};
