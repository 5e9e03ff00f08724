pub mod comptask;
pub mod config;
pub mod dataio;
pub mod diagnostics;
pub mod error;
pub mod factorspace;
pub mod image;
pub mod metrics;
pub mod nnmodels;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
