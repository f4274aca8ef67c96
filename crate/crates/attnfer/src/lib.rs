//! File formats, dataset loaders, artifact writers and the command line
//! around [`attnfer_core`].

pub mod artifacts;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod parallel;

pub use error::{Error, Result};
