pub mod cli;
pub mod config;
pub mod demon;
pub mod dsp;
pub mod error;
pub mod features;
pub mod model;
pub mod pipeline;

pub use error::{Error, Result};
