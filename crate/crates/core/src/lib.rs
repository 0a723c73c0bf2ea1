pub mod backbone;
pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
