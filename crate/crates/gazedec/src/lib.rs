//! IO, file formats, configuration and command orchestration around
//! [`gazedec_core`]: the std-side half of the gaze decoding pipeline.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pgm;
pub mod report;
pub mod session;
pub mod tnsr;

pub use config::Config;
pub use error::{CliError, CliResult};
