pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradsuite;
pub mod harness;
pub mod model;
pub mod motion;
pub mod params;
pub mod policy;
pub mod tensor;

pub use error::{Error, Result};
