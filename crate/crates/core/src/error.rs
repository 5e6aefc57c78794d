use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("node {node}: invalid box ({reason})")]
    InvalidBox { node: usize, reason: &'static str },

    #[error("normalized coordinate {0} outside [0, 1]")]
    CoordinateOutOfRange(f64),

    #[error("dimension mismatch in {stage}: expected {expected}, got {got}")]
    Dimension {
        stage: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{records} records for a graph with {nodes} nodes")]
    SizeMismatch { records: usize, nodes: usize },

    #[error("link references unknown entity id {0}")]
    UnknownEntity(usize),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("edge index {0} out of range")]
    EdgeIndex(usize),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (parameter norm {param_norm})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        param_norm: f64,
    },

    #[error("empty input")]
    EmptyInput,

    #[error("invalid configuration: {0}")]
    Config(String),
}
