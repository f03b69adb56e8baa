//! Job pipeline around the atelier models: persistent jobs with a
//! human-in-the-loop style choice, a content-addressed artifact store, an
//! HTTP API and the `atelier` command-line tool.

pub mod api;
pub mod artifacts;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod job;
pub mod pipeline;
pub mod store;

pub use config::AtelierConfig;
pub use error::{Result, ServiceError};
pub use job::{JobRequest, JobState, PipelineJob, StyleMode};
pub use pipeline::Pipeline;
