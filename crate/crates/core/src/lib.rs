pub mod audio;
pub mod cli;
pub mod componet;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod frontend;
pub mod nn;
pub mod sampling;
pub mod synthbench;
pub mod training;

pub use error::{Error, Result};
