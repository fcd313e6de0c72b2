//! File formats, configuration and the `onj-uad` pipeline commands.

pub mod ckpt;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod record;
pub mod stl;
pub mod volio;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use pipeline::{Command, Pipeline};
