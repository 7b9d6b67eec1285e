//! Files, training loop, evaluation harness and command line for the
//! conditioned separators in `lightsaft-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset_dir;
pub mod error;
pub mod infer;
pub mod pilot;
pub mod report;
pub mod training;
pub mod wav;

pub use error::{Error, Result};
