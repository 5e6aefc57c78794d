//! Geometric document graphs and the two-stage GeoContrast models.
//!
//! Everything in this crate is a pure function of its inputs: boxes become
//! attributed kNN graphs ([`graph`]), a small message-passing encoder turns
//! edge geometry into node embeddings ([`stage1`]), and a graph-attention
//! network with a visual encoder ([`visual`], [`stage2`]) predicts entity
//! labels and links. Evaluation lives in [`metrics`].
//!
//! The crate is `no_std` with `alloc`. Enable the `std` feature to get
//! runtime SIMD detection in the matrix kernels.

#![cfg_attr(not(any(test, feature = "std")), no_std)]
#![deny(unsafe_op_in_unsafe_fn)]
// `!(x > 0.0)` is deliberate: NaN must fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod ablation;
pub mod annotate;
pub mod autograd;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod knn;
pub mod labels;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod stage1;
pub mod stage2;
pub mod tensor;
pub mod visual;

pub use error::{Error, Result};
pub use geometry::{BBox, EdgeGeom, ImageSize, NodeGeom, RegionCode, RelPos};
pub use graph::{DocumentGraph, Edge, GraphOptions, LinkLabel, Node};
pub use tensor::Matrix;
