//! Ground-truth entity records and label attachment.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::graph::{DocumentGraph, LinkLabel};

/// One annotated text region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: usize,
    pub bbox: BBox,
    pub label: usize,
    /// Annotated `(from_id, to_id)` pairs, by entity id.
    pub links: Vec<(usize, usize)>,
    /// Index of the table region containing this entity, if any.
    pub table: Option<usize>,
    pub text: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkTask {
    KeyValue,
    Table,
}

impl LinkTask {
    pub fn positive(self) -> LinkLabel {
        match self {
            LinkTask::KeyValue => LinkLabel::KeyValue,
            LinkTask::Table => LinkLabel::Table,
        }
    }
}

/// How many ground-truth linked pairs survive as graph edges.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkCoverage {
    pub gt_pairs: usize,
    pub covered: usize,
}

impl LinkCoverage {
    /// `None` when the document has no linked pairs.
    pub fn fraction(&self) -> Option<f64> {
        (self.gt_pairs > 0).then(|| self.covered as f64 / self.gt_pairs as f64)
    }

    pub fn merge(&self, other: &LinkCoverage) -> LinkCoverage {
        LinkCoverage {
            gt_pairs: self.gt_pairs + other.gt_pairs,
            covered: self.covered + other.covered,
        }
    }
}

/// Unordered ground-truth pairs `(lo, hi)` by node index.
pub fn ground_truth_pairs(records: &[EntityRecord], task: LinkTask) -> Result<BTreeSet<(usize, usize)>> {
    let index: BTreeMap<usize, usize> = records.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
    let mut pairs = BTreeSet::new();
    match task {
        LinkTask::KeyValue => {
            for r in records {
                for &(a, b) in &r.links {
                    let ia = *index.get(&a).ok_or(Error::UnknownEntity(a))?;
                    let ib = *index.get(&b).ok_or(Error::UnknownEntity(b))?;
                    if ia != ib {
                        pairs.insert((ia.min(ib), ia.max(ib)));
                    }
                }
            }
        }
        LinkTask::Table => {
            let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, r) in records.iter().enumerate() {
                if let Some(t) = r.table {
                    members.entry(t).or_default().push(i);
                }
            }
            for m in members.values() {
                for (x, &a) in m.iter().enumerate() {
                    for &b in &m[x + 1..] {
                        pairs.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
    }
    Ok(pairs)
}

/// Copies node labels from `records` and labels every edge whose unordered
/// endpoint pair is a ground-truth pair. Pairs missing from the graph are
/// not added; they show up in the returned coverage instead.
pub fn attach_labels(
    graph: &DocumentGraph,
    records: &[EntityRecord],
    task: LinkTask,
) -> Result<(DocumentGraph, LinkCoverage)> {
    if records.len() != graph.num_nodes() {
        return Err(Error::SizeMismatch {
            records: records.len(),
            nodes: graph.num_nodes(),
        });
    }
    let pairs = ground_truth_pairs(records, task)?;
    let mut out = graph.clone();
    for (node, r) in out.nodes.iter_mut().zip(records) {
        node.label = Some(r.label);
        node.text = r.text.clone();
    }
    let mut present = BTreeSet::new();
    for e in out.edges.iter_mut() {
        let key = (e.src.min(e.dst), e.src.max(e.dst));
        let positive = pairs.contains(&key);
        if positive {
            present.insert(key);
        }
        e.link = Some(if positive { task.positive() } else { LinkLabel::None });
    }
    let coverage = LinkCoverage {
        gt_pairs: pairs.len(),
        covered: present.len(),
    };
    Ok((out, coverage))
}
