pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod retrieval;
pub mod service;
pub mod training;

pub use error::{Error, Result};
