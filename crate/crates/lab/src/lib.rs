//! Std companion of `lft-core`: checkpoints, plain-text data formats,
//! experiment configuration, the experiment pipeline and the `lftlab`
//! command line.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod formats;
pub mod fsutil;
pub mod pipeline;

pub use error::{LabError, Result};
