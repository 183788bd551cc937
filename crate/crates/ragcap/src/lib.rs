//! File formats and the staged command-line pipeline for ragcap.

pub mod annotations;
pub mod artifacts;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod xemb;

pub use error::{Error, Result};
