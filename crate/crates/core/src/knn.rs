//! Directed k-nearest-neighbour edges over box centers.

use alloc::collections::BinaryHeap;
use alloc::vec::Vec;
use core::cmp::Ordering;

#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist2: f64,
    id: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.id.cmp(&other.id))
    }
}

/// For every node, `min(k, N - 1)` edges `i -> j` to its nearest neighbours
/// by Euclidean distance, nearest first. Ties go to the lower node id.
///
/// Edges are grouped by source in ascending order. Fewer than two points
/// produce no edges.
pub fn knn_edges(centers: &[[f64; 2]], k: usize) -> Vec<(usize, usize)> {
    let n = centers.len();
    if n < 2 || k == 0 {
        if n < 2 {
            log::warn!("kNN over {n} node(s): graph has no edges");
        }
        return Vec::new();
    }
    let per_node = k.min(n - 1);
    let mut edges = Vec::with_capacity(n * per_node);
    for (i, &[xi, yi]) in centers.iter().enumerate() {
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(per_node + 1);
        for (j, &[xj, yj]) in centers.iter().enumerate() {
            if i == j {
                continue;
            }
            let (dx, dy) = (xj - xi, yj - yi);
            let cand = Candidate {
                dist2: dx * dx + dy * dy,
                id: j,
            };
            if heap.len() < per_node {
                heap.push(cand);
            } else if let Some(worst) = heap.peek() {
                if cand < *worst {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        edges.extend(heap.into_sorted_vec().into_iter().map(|c| (i, c.id)));
    }
    edges
}
