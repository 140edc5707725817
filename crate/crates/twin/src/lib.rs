//! Cohort digital-twin service: run configuration, artifact storage, the
//! reproduction pipeline, the command line and the HTTP API.

pub mod api;
pub mod artifacts;
pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;
