//! Data loading, checkpoints and the end-to-end pipeline.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod graph_io;
pub mod ingest;
pub mod pipeline;
pub mod render;
pub mod synth;

pub use error::{PipelineError, Result};
