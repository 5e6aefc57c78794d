//! Attributed document graphs.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    edge_geom_dim, edge_geometry, normalize_box, BBox, EdgeGeom, ImageSize, NodeGeom, DEFAULT_POLAR_BINS, NODE_GEOM_DIM,
};
use crate::knn::knn_edges;
use crate::tensor::Matrix;

/// Label of a directed edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkLabel {
    None,
    KeyValue,
    Table,
}

impl LinkLabel {
    pub fn is_positive(self) -> bool {
        !matches!(self, LinkLabel::None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub bbox: BBox,
    pub geom: NodeGeom,
    pub label: Option<usize>,
    /// Carried as metadata only; never a model input.
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub geom: EdgeGeom,
    pub link: Option<LinkLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphOptions {
    pub k: usize,
    pub polar_bins: usize,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            k: 10,
            polar_bins: DEFAULT_POLAR_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentGraph {
    pub image_size: ImageSize,
    pub k: usize,
    pub polar_bins: usize,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

/// Builds the kNN graph of `boxes`, keeping input order as node order.
pub fn build_graph(boxes: &[BBox], image: ImageSize, opts: GraphOptions) -> Result<DocumentGraph> {
    if opts.polar_bins == 0 {
        return Err(Error::Config("polar_bins must be positive".into()));
    }
    let nodes = boxes
        .iter()
        .enumerate()
        .map(|(id, b)| {
            Ok(Node {
                id,
                bbox: *b,
                geom: normalize_box(b, image, id)?,
                label: None,
                text: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let s = image.scale();
    let centers: Vec<[f64; 2]> = boxes
        .iter()
        .map(|b| {
            let [x, y] = b.center();
            [x / s, y / s]
        })
        .collect();
    let edges = knn_edges(&centers, opts.k)
        .into_iter()
        .map(|(src, dst)| Edge {
            src,
            dst,
            geom: edge_geometry(&boxes[src], &boxes[dst], image, opts.polar_bins),
            link: None,
        })
        .collect();
    Ok(DocumentGraph {
        image_size: image,
        k: opts.k,
        polar_bins: opts.polar_bins,
        nodes,
        edges,
    })
}

impl DocumentGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge_dim(&self) -> usize {
        edge_geom_dim(self.polar_bins)
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.nodes.iter().map(|n| n.bbox).collect()
    }

    pub fn sources(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.src).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.dst).collect()
    }

    pub fn node_labels(&self) -> Option<Vec<usize>> {
        self.nodes.iter().map(|n| n.label).collect()
    }

    pub fn link_labels(&self) -> Option<Vec<LinkLabel>> {
        self.edges.iter().map(|e| e.link).collect()
    }

    /// N x 9 node feature matrix.
    pub fn node_features(&self) -> Matrix {
        let mut m = Matrix::zeros(self.num_nodes(), NODE_GEOM_DIM);
        for (i, n) in self.nodes.iter().enumerate() {
            m.row_mut(i).copy_from_slice(n.geom.as_slice());
        }
        m
    }

    /// E x bins matrix of the polar one-hot blocks.
    pub fn polar_features(&self) -> Matrix {
        let bins = self.polar_bins;
        let mut m = Matrix::zeros(self.num_edges(), bins);
        for (i, e) in self.edges.iter().enumerate() {
            m.row_mut(i).copy_from_slice(e.geom.polar());
        }
        m
    }

    pub fn out_degrees(&self) -> Vec<usize> {
        let mut d = alloc::vec![0; self.num_nodes()];
        for e in &self.edges {
            d[e.src] += 1;
        }
        d
    }

    /// Checks structural invariants (dense ids, endpoints, widths, no loops).
    pub fn validate(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::InvalidBox {
                    node: i,
                    reason: "node ids must be dense and ordered",
                });
            }
            n.bbox.validate(i, self.image_size)?;
        }
        let width = self.edge_dim();
        for (i, e) in self.edges.iter().enumerate() {
            if e.src >= self.num_nodes() || e.dst >= self.num_nodes() || e.src == e.dst {
                return Err(Error::EdgeIndex(i));
            }
            if e.geom.len() != width {
                return Err(Error::Dimension {
                    stage: "edge features",
                    expected: width,
                    got: e.geom.len(),
                });
            }
        }
        Ok(())
    }
}
