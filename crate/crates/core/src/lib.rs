pub mod adapter;
pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod interpret;
mod io;
mod layers;
pub mod metrics;
pub mod params;
pub mod pretrain;
pub mod signal;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use layers::positional_encoding;
