pub mod augment;
pub mod cli;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod objectives;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
