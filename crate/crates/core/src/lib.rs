pub mod checkpoint;
pub mod bp;
pub mod cam;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod ff;
pub mod inference;
pub mod labels;
pub mod metrics;
pub mod png_io;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
