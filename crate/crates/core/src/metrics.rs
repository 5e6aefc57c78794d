//! Classification F1, precision-recall AUC and table detection scores.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::annotate::LinkCoverage;
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// No gold samples of this class; scores are reported as 0.
    pub zero_support: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassScore>,
    pub micro_f1: f64,
    /// `confusion[gold][pred]`.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn classification_f1(predictions: &[usize], labels: &[usize], classes: usize) -> Result<ClassificationReport> {
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    if predictions.len() != labels.len() {
        return Err(Error::SizeMismatch {
            records: labels.len(),
            nodes: predictions.len(),
        });
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::Config(alloc::format!("class index {} out of range", p.max(y))));
        }
        confusion[y][p] += 1;
    }
    let per_class = (0..classes)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            ClassScore {
                precision,
                recall,
                f1: if support == 0 { 0.0 } else { f1(precision, recall) },
                support,
                zero_support: support == 0,
            }
        })
        .collect();
    // Single-label: every miss is one false positive and one false negative.
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(ClassificationReport {
        per_class,
        micro_f1: ratio(correct, labels.len()),
        confusion,
    })
}

/// Average precision: precision summed over recall increments at every
/// distinct score threshold. `None` unless both classes are present.
pub fn auc_pr(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let (mut tp, mut seen, mut prev_recall, mut area) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(labels[order[i]]);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        area += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Some(area)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub correct: usize,
    pub detections: usize,
    pub ground_truth: usize,
}

impl DetectionCounts {
    pub fn merge(&mut self, other: DetectionCounts) {
        self.correct += other.correct;
        self.detections += other.detections;
        self.ground_truth += other.ground_truth;
    }

    /// Not applicable when nothing was detected.
    pub fn precision(&self) -> Option<f64> {
        (self.detections > 0).then(|| ratio(self.correct, self.detections))
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.ground_truth)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision().unwrap_or(0.0), self.recall())
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Union boxes of the connected components (size >= 2) of `links`, which
/// are treated as undirected. Sorted so the result ignores input order.
pub fn detected_tables(boxes: &[BBox], links: &[(usize, usize)]) -> Vec<BBox> {
    let mut parent: Vec<usize> = (0..boxes.len()).collect();
    for &(a, b) in links {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: Vec<(BBox, usize)> = Vec::new();
    let mut slot = vec![usize::MAX; boxes.len()];
    for i in 0..boxes.len() {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push((boxes[i], 1));
        } else {
            let g = &mut groups[slot[r]];
            g.0 = g.0.union(&boxes[i]);
            g.1 += 1;
        }
    }
    let mut out: Vec<BBox> = groups.into_iter().filter(|g| g.1 >= 2).map(|g| g.0).collect();
    out.sort_by(|a, b| {
        [a.xmin, a.ymin, a.xmax, a.ymax]
            .partial_cmp(&[b.xmin, b.ymin, b.xmax, b.ymax])
            .unwrap_or(Ordering::Equal)
    });
    out
}

/// Greedy one-to-one matching by descending IoU; a match counts iff its
/// IoU is strictly above `threshold`.
pub fn match_detections(detections: &[BBox], ground_truth: &[BBox], threshold: f64) -> DetectionCounts {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, d) in detections.iter().enumerate() {
        for (j, g) in ground_truth.iter().enumerate() {
            let iou = d.iou(g);
            if iou > 0.0 {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then((a.1, a.2).cmp(&(b.1, b.2)))
    });
    let mut used_d = vec![false; detections.len()];
    let mut used_g = vec![false; ground_truth.len()];
    let mut correct = 0;
    for (iou, i, j) in pairs {
        if used_d[i] || used_g[j] {
            continue;
        }
        used_d[i] = true;
        used_g[j] = true;
        if iou > threshold {
            correct += 1;
        }
    }
    DetectionCounts {
        correct,
        detections: detections.len(),
        ground_truth: ground_truth.len(),
    }
}

/// Table detection for one page from per-edge positive decisions.
pub fn table_detection(
    boxes: &[BBox],
    edges: &[(usize, usize)],
    positive: &[bool],
    ground_truth: &[BBox],
    threshold: f64,
) -> DetectionCounts {
    let links: Vec<(usize, usize)> = edges
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(&e, _)| e)
        .collect();
    match_detections(&detected_tables(boxes, &links), ground_truth, threshold)
}

pub const TABLE_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableScores {
    pub precision: Option<f64>,
    pub recall: f64,
    pub f1: f64,
    pub counts: DetectionCounts,
}

impl From<DetectionCounts> for TableScores {
    fn from(counts: DetectionCounts) -> Self {
        Self {
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            counts,
        }
    }
}

/// Per-split evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub split: String,
    pub documents: usize,
    pub class_names: Vec<String>,
    pub node_micro_f1: f64,
    pub node_per_class: Vec<ClassScore>,
    pub link_f1_none: f64,
    pub link_f1_positive: f64,
    pub link_support: [usize; 2],
    pub auc_pr: Option<f64>,
    pub table: Option<TableScores>,
    pub link_coverage: LinkCoverage,
}

impl EvalReport {
    /// Scores in `[0, 1]` and supports consistent with totals.
    pub fn check(&self, nodes: usize, edges: usize) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let mut ok = unit(self.node_micro_f1) && unit(self.link_f1_none) && unit(self.link_f1_positive);
        ok &= self.auc_pr.is_none_or(unit);
        ok &= self
            .node_per_class
            .iter()
            .all(|c| unit(c.precision) && unit(c.recall) && unit(c.f1));
        ok &= self.node_per_class.iter().map(|c| c.support).sum::<usize>() == nodes;
        ok &= self.link_support[0] + self.link_support[1] == edges;
        if let Some(t) = &self.table {
            ok &= t.precision.is_none_or(unit) && unit(t.recall) && unit(t.f1);
        }
        ok
    }
}
