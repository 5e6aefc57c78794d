//! One JSON file per document graph.

use std::fs;
use std::path::Path;

use geocontrast_core::annotate::LinkCoverage;
use geocontrast_core::labels::Dataset;
use geocontrast_core::{BBox, DocumentGraph};
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::ingest::Split;

pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    pub format_version: u32,
    pub dataset: Dataset,
    pub split: Split,
    pub document: String,
    pub coverage: LinkCoverage,
    /// Ground-truth table regions, if the dataset has them.
    pub tables: Vec<BBox>,
    pub graph: DocumentGraph,
}

pub fn write_graph(path: &Path, file: &GraphFile) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    }
    let bytes = serde_json::to_vec(file).map_err(PipelineError::json(path))?;
    fs::write(path, bytes).map_err(PipelineError::io(path))
}

pub fn read_graph(path: &Path) -> Result<GraphFile> {
    let bytes = fs::read(path).map_err(PipelineError::io(path))?;
    let file: GraphFile = serde_json::from_slice(&bytes).map_err(PipelineError::json(path))?;
    if file.format_version != GRAPH_FORMAT_VERSION {
        return Err(PipelineError::Config(format!(
            "{}: graph format {} is not supported",
            path.display(),
            file.format_version
        )));
    }
    file.graph.validate()?;
    Ok(file)
}
