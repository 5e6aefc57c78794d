//! Independent oracles and the property criteria built on them. Shared by
//! the core test targets and the workspace acceptance suite.

#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord)]

use std::f64::consts::PI;

use geocontrast_core::annotate::{attach_labels, EntityRecord, LinkTask};
use geocontrast_core::autograd::{Grads, ParamStore, Reduction, Tape};
use geocontrast_core::graph::{build_graph, DocumentGraph, GraphOptions};
use geocontrast_core::metrics::{self, TABLE_IOU_THRESHOLD};
use geocontrast_core::stage1::{aggregate_all, aggregate_messages, mine_triplets, StageOneConfig, StageOneEncoder};
use geocontrast_core::stage2::{
    joint_loss, AttentionEdges, GatLayer, LinkWeighting, StageTwoConfig, StageTwoInput, StageTwoModel,
};
use geocontrast_core::visual::{Raster, VisualEncoderConfig};
use geocontrast_core::{ablation::FeatureMask, BBox, ImageSize, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------- oracles

/// Exhaustive kNN: sort every other node by (squared distance, id).
pub fn knn_oracle(centers: &[[f64; 2]], k: usize) -> Vec<(usize, usize)> {
    let n = centers.len();
    let mut out = Vec::new();
    if n < 2 {
        return out;
    }
    for i in 0..n {
        let mut all: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let dx = centers[j][0] - centers[i][0];
                let dy = centers[j][1] - centers[i][1];
                (dx * dx + dy * dy, j)
            })
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.extend(all.into_iter().take(k.min(n - 1)).map(|(_, j)| (i, j)));
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct EdgeTruth {
    pub theta: f64,
    pub dist: f64,
    pub sector: usize,
    /// left, right, top, bottom, vert-, hor-, sqr-intersect.
    pub relpos: usize,
}

/// Edge geometry re-derived from raw pixel coordinates.
pub fn edge_oracle(s: [f64; 4], d: [f64; 4], width: f64, height: f64, bins: usize) -> EdgeTruth {
    let scale = width.max(height);
    let (sx, sy) = ((s[0] + s[2]) / 2.0, (s[1] + s[3]) / 2.0);
    let (tx, ty) = ((d[0] + d[2]) / 2.0, (d[1] + d[3]) / 2.0);
    let (dx, dy) = ((tx - sx) / scale, (ty - sy) / scale);
    let theta = if dx == 0.0 && dy == 0.0 { 0.0 } else { dy.atan2(dx) };
    let dist = (dx * dx + dy * dy).sqrt().min(1.0);
    let sector = (((theta + PI) / (2.0 * PI / bins as f64)).floor() as usize).min(bins - 1);
    let x_overlap = s[0] < d[2] && d[0] < s[2];
    let y_overlap = s[1] < d[3] && d[1] < s[3];
    let relpos = if x_overlap && y_overlap {
        6
    } else if x_overlap {
        4
    } else if y_overlap {
        5
    } else if (tx - sx).abs() >= (ty - sy).abs() {
        if tx > sx {
            1
        } else {
            0
        }
    } else if ty > sy {
        3
    } else {
        2
    };
    EdgeTruth {
        theta,
        dist,
        sector,
        relpos,
    }
}

/// Gated mean of outgoing edge features by direct summation over the raw edge list.
pub fn aggregation_oracle(graph: &DocumentGraph, node: usize, gate: f64, c: f64) -> Vec<f64> {
    let dim = graph.edges.first().map_or(0, |e| e.geom.0.len());
    let mut sum = vec![0.0; dim];
    let mut members = 0;
    for e in &graph.edges {
        if e.src != node {
            continue;
        }
        let [sx, sy] = graph.nodes[e.src].bbox.center();
        let [tx, ty] = graph.nodes[e.dst].bbox.center();
        let s = graph.image_size.width.max(graph.image_size.height);
        let d = (((tx - sx) / s).powi(2) + ((ty - sy) / s).powi(2)).sqrt().min(1.0);
        if d < gate {
            members += 1;
            for (acc, v) in sum.iter_mut().zip(&e.geom.0) {
                *acc += v;
            }
        }
    }
    if members == 0 {
        return sum;
    }
    sum.iter().map(|v| c * v / members as f64).collect()
}

pub fn triplet_oracle(a: &[f64], p: &[f64], n: &[f64], margin: f64, order: f64) -> f64 {
    let dist = |x: &[f64], y: &[f64]| {
        x.iter()
            .zip(y)
            .map(|(u, v)| (u - v).abs().powf(order))
            .sum::<f64>()
            .powf(1.0 / order)
    };
    (dist(a, p) - dist(a, n) + margin).max(0.0)
}

/// Cross-entropy written out as `-w_y * ln(exp(z_y) / sum exp(z))`.
pub fn cross_entropy_oracle(logits: &[Vec<f64>], labels: &[usize], weights: Option<&[f64]>) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let denom: f64 = row.iter().map(|z| z.exp()).sum();
            -weights.map_or(1.0, |w| w[y]) * (row[y].exp() / denom).ln()
        })
        .sum()
}

/// Per-class F1 from explicit TP/FP/FN counts; micro F1 from pooled counts.
pub fn f1_oracle(pred: &[usize], gold: &[usize], classes: usize) -> (Vec<f64>, f64) {
    let mut per = Vec::new();
    let (mut tp_all, mut fp_all, mut fn_all) = (0.0, 0.0, 0.0);
    for c in 0..classes {
        let tp = pred.iter().zip(gold).filter(|(&p, &g)| p == c && g == c).count() as f64;
        let fp = pred.iter().zip(gold).filter(|(&p, &g)| p == c && g != c).count() as f64;
        let fnn = pred.iter().zip(gold).filter(|(&p, &g)| p != c && g == c).count() as f64;
        tp_all += tp;
        fp_all += fp;
        fn_all += fnn;
        per.push(if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fnn)
        });
    }
    let micro = 2.0 * tp_all / (2.0 * tp_all + fp_all + fn_all);
    (per, micro)
}

/// Average precision by sweeping every distinct score as a `>=` threshold.
pub fn auc_pr_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let (mut tp, mut fp) = (0.0, 0.0);
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= t {
                if l {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let recall = tp / positives;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}

// --------------------------------------------------------------- fixtures

pub fn random_layout(rng: &mut ChaCha8Rng, max_nodes: usize) -> (Vec<BBox>, ImageSize) {
    let w = rng.gen_range(200.0..2000.0_f64).round();
    let h = rng.gen_range(200.0..2000.0_f64).round();
    let n = rng.gen_range(1..=max_nodes);
    // Snapping to a coarse grid sometimes creates distance ties.
    let grid = if rng.gen_bool(0.3) { 40.0 } else { 0.0 };
    let snap = |v: f64| if grid > 0.0 { (v / grid).round() * grid } else { v };
    let boxes = (0..n)
        .map(|_| {
            let bw = snap(rng.gen_range(10.0..w / 3.0)).max(4.0);
            let bh = snap(rng.gen_range(4.0..h / 6.0)).max(4.0);
            let x = snap(rng.gen_range(0.0..w - bw)).min(w - bw);
            let y = snap(rng.gen_range(0.0..h - bh)).min(h - bh);
            BBox::new(x, y, x + bw, y + bh)
        })
        .collect();
    (boxes, ImageSize::new(w, h))
}

pub fn toy_boxes() -> Vec<BBox> {
    vec![
        BBox::new(10.0, 10.0, 60.0, 25.0),
        BBox::new(80.0, 12.0, 150.0, 30.0),
        BBox::new(20.0, 70.0, 90.0, 95.0),
        BBox::new(110.0, 60.0, 180.0, 90.0),
    ]
}

pub fn textured_raster(w: usize, h: usize, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Raster::new(w, h, (0..w * h).map(|_| rng.gen::<f32>()).collect())
}

pub fn tiny_stage2_config() -> StageTwoConfig {
    StageTwoConfig {
        hidden: 3,
        heads: 2,
        node_head_hidden: vec![5, 4, 3, 3],
        edge_head_hidden: vec![5, 4, 3, 3],
        num_classes: 3,
        link_weighting: LinkWeighting::Fixed(vec![0.7, 2.0]),
        visual: VisualEncoderConfig {
            crop_size: 16,
            embed_dim: 4,
            channels: vec![2, 3, 3, 2, 3],
            ..Default::default()
        },
        seed: 5,
        ..Default::default()
    }
}

/// Three nodes and four directed edges with labels on both.
pub fn toy_graph() -> DocumentGraph {
    let boxes = &toy_boxes()[..3];
    let mut g = build_graph(
        boxes,
        ImageSize::new(200.0, 120.0),
        GraphOptions { k: 2, polar_bins: 6 },
    )
    .unwrap();
    g.edges.truncate(4);
    let records: Vec<EntityRecord> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| EntityRecord {
            id: i,
            bbox: *b,
            label: i % 3,
            links: if i == 0 { vec![(0, 1)] } else { vec![] },
            table: None,
            text: None,
        })
        .collect();
    attach_labels(&g, &records, LinkTask::KeyValue).unwrap().0
}

/// Moves zero-initialized biases off the ReLU kink.
pub fn jitter_biases(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.ends_with("bias"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        for v in &mut store.value_mut(id).data {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
}

pub fn toy_input(model: &StageTwoModel, seed: u64) -> StageTwoInput {
    let graph = toy_graph();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometric = Matrix::from_vec(3, 17, (0..51).map(|_| rng.gen_range(0.0..1.0)).collect());
    let visual = model.visual.prepare(&textured_raster(200, 120, seed), &graph.boxes());
    StageTwoInput {
        graph,
        geometric,
        visual,
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Largest per-tensor relative error `|a - n| / (|a| + |n|)` of analytic
/// gradients against central differences.
pub fn gradient_error(
    store: &mut ParamStore,
    grads: &Grads,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> (f64, String) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut worst = (0.0, String::new());
    for id in ids {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| {
            let v = store.value(id);
            Matrix::zeros(v.rows, v.cols)
        });
        let n = store.value(id).len();
        let mut numeric = vec![0.0; n];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = store.value(id).data[k];
            store.value_mut(id).data[k] = orig + FD_STEP;
            let up = loss(store);
            store.value_mut(id).data[k] = orig - FD_STEP;
            let down = loss(store);
            store.value_mut(id).data[k] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic
            .data
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 =
            analytic.data.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = if scale < 1e-12 { 0.0 } else { diff / scale };
        if rel >= worst.0 {
            worst = (rel, store.name(id).to_string());
        }
    }
    worst
}

// -------------------------------------------------------------- criteria

/// kNN edges and per-edge geometry against the exhaustive oracles.
pub fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut edges_checked = 0;
    let mut worst = 0.0f64;
    for layout in 0..200 {
        let (boxes, image) = random_layout(&mut rng, 100);
        let k = rng.gen_range(1..=12);
        let g = build_graph(&boxes, image, GraphOptions { k, polar_bins: 6 }).map_err(|e| e.to_string())?;
        let s = image.width.max(image.height);
        let centers: Vec<[f64; 2]> = boxes
            .iter()
            .map(|b| [(b.xmin + b.xmax) / 2.0 / s, (b.ymin + b.ymax) / 2.0 / s])
            .collect();
        let want = knn_oracle(&centers, k);
        let got: Vec<(usize, usize)> = g.edges.iter().map(|e| (e.src, e.dst)).collect();
        let mut got_sorted = got.clone();
        got_sorted.sort();
        let mut want_sorted = want.clone();
        want_sorted.sort();
        ensure!(
            got_sorted == want_sorted,
            "layout {layout}: kNN edge sets differ (n={}, k={k})",
            boxes.len()
        );
        for e in &g.edges {
            let b = |i: usize| [boxes[i].xmin, boxes[i].ymin, boxes[i].xmax, boxes[i].ymax];
            let t = edge_oracle(b(e.src), b(e.dst), image.width, image.height, 6);
            let v = &e.geom.0;
            ensure!(v.len() == 15, "edge vector has {} entries", v.len());
            worst = worst.max((v[0] - t.theta).abs()).max((v[1] - t.dist).abs());
            ensure!(
                (v[0] - t.theta).abs() < 1e-9,
                "layout {layout}: theta {} vs {}",
                v[0],
                t.theta
            );
            ensure!(
                (v[1] - t.dist).abs() < 1e-9,
                "layout {layout}: dist {} vs {}",
                v[1],
                t.dist
            );
            let polar: Vec<f64> = (0..6).map(|i| f64::from(u8::from(i == t.sector))).collect();
            let relpos: Vec<f64> = (0..7).map(|i| f64::from(u8::from(i == t.relpos))).collect();
            ensure!(
                v[2..8] == polar[..],
                "layout {layout}: polar one-hot {:?} vs sector {}",
                &v[2..8],
                t.sector
            );
            ensure!(
                v[8..15] == relpos[..],
                "layout {layout}: relpos one-hot {:?} vs token {}",
                &v[8..15],
                t.relpos
            );
            edges_checked += 1;
        }
    }
    Ok(format!(
        "200 layouts, {edges_checked} edges, max continuous deviation {worst:.1e}"
    ))
}

fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize) -> DocumentGraph {
    let (boxes, image) = random_layout(rng, max_nodes);
    let k = rng.gen_range(1..=8);
    build_graph(&boxes, image, GraphOptions { k, polar_bins: 6 }).unwrap()
}

/// Neighbourhood aggregation against the loop oracle, plus the empty-neighbourhood rule.
pub fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut empties = 0;
    for _ in 0..100 {
        let g = random_graph(&mut rng, 20);
        let gate = rng.gen_range(0.05..1.0);
        let c = rng.gen_range(0.5..2.0);
        let all = aggregate_all(&g, gate, c, &FeatureMask::ALL);
        for i in 0..g.num_nodes() {
            let want = aggregation_oracle(&g, i, gate, c);
            let single = aggregate_messages(&g, i, gate, c, &FeatureMask::ALL);
            for (j, w) in want.iter().enumerate() {
                worst = worst.max((all.get(i, j) - w).abs()).max((single[j] - w).abs());
            }
            if want.iter().all(|&v| v == 0.0) {
                empties += 1;
                ensure!(
                    all.row(i).iter().all(|&v| v == 0.0),
                    "empty neighbourhood must aggregate to zero"
                );
            }
        }
    }
    // A gate of zero admits nobody.
    let g = random_graph(&mut rng, 20);
    let zero = aggregate_all(&g, 1e-12, 1.0, &FeatureMask::ALL);
    ensure!(zero.data.iter().all(|&v| v == 0.0), "tiny gate must give zeros");
    ensure!(worst < 1e-6, "max deviation {worst:e}");
    Ok(format!(
        "100 graphs, max deviation {worst:.1e}, {empties} empty neighbourhoods"
    ))
}

/// Triplet and joint cross-entropy losses against direct formulas.
pub fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for inst in 0..100 {
        // Triplet loss through the tape.
        let n = rng.gen_range(3..9);
        let emb = Matrix::from_vec(n, 17, (0..n * 17).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let triples = mine_triplets(&labels, 2, inst);
        let margin = rng.gen_range(0.1..2.0);
        let p = if inst % 2 == 0 { 2.0 } else { 1.0 };
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let e = tape.input(emb.clone());
        let l = tape.triplet_loss(e, &triples, margin, p);
        let want = triples
            .iter()
            .map(|&(a, q, r)| triplet_oracle(emb.row(a), emb.row(q), emb.row(r), margin, p))
            .sum::<f64>()
            / triples.len().max(1) as f64;
        worst = worst.max((tape.scalar(l) - want).abs());
        let single = geocontrast_core::stage1::triplet_loss(emb.row(0), emb.row(1), emb.row(2), margin, p);
        worst = worst.max((single - triplet_oracle(emb.row(0), emb.row(1), emb.row(2), margin, p)).abs());

        // Joint loss, weighted link term.
        let (nn, ne, c) = (rng.gen_range(1..10), rng.gen_range(1..30), rng.gen_range(2..6));
        let node_logits: Vec<Vec<f64>> = (0..nn)
            .map(|_| (0..c).map(|_| rng.gen_range(-4.0..4.0)).collect())
            .collect();
        let edge_logits: Vec<Vec<f64>> = (0..ne)
            .map(|_| (0..2).map(|_| rng.gen_range(-4.0..4.0)).collect())
            .collect();
        let nl: Vec<usize> = (0..nn).map(|_| rng.gen_range(0..c)).collect();
        let el: Vec<usize> = (0..ne).map(|_| rng.gen_range(0..2)).collect();
        let w = [rng.gen_range(0.2..1.0), rng.gen_range(1.0..10.0)];
        let want = cross_entropy_oracle(&node_logits, &nl, None) + cross_entropy_oracle(&edge_logits, &el, Some(&w));
        let nm = Matrix::from_rows(&node_logits);
        let em = Matrix::from_rows(&edge_logits);
        let got = joint_loss(&nm, &nl, &em, &el, Some(&w), Reduction::Sum).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
        let mut tape = Tape::new(&store);
        let a = tape.input(nm);
        let b = tape.input(em);
        let la = tape.cross_entropy(a, &nl, None, Reduction::Sum);
        let lb = tape.cross_entropy(b, &el, Some(&w), Reduction::Sum);
        worst = worst.max((tape.scalar(la) + tape.scalar(lb) - want).abs());
    }
    ensure!(worst < 1e-6, "max deviation {worst:e}");
    // Zero exactly when the margin is satisfied.
    let a = [0.0, 0.0];
    let q = [0.0, 0.0];
    let far = [3.0, 4.0];
    ensure!(
        geocontrast_core::stage1::triplet_loss(&a, &q, &far, 1.0, 2.0) == 0.0,
        "satisfied margin gave nonzero loss"
    );
    let edge = [1.0, 0.0];
    ensure!(
        geocontrast_core::stage1::triplet_loss(&a, &q, &edge, 1.0, 2.0) == 0.0,
        "margin met with equality must give 0"
    );
    let near = [0.5, 0.0];
    ensure!(
        geocontrast_core::stage1::triplet_loss(&a, &q, &near, 1.0, 2.0) > 0.0,
        "violated margin gave zero loss"
    );
    Ok(format!("100 instances, max deviation {worst:.1e}"))
}

/// Stage-I and Stage-II full-loss gradients against finite differences.
pub fn criterion_4() -> Outcome {
    let mut model = StageTwoModel::new(tiny_stage2_config()).map_err(|e| e.to_string())?;
    jitter_biases(&mut model.params, 11);
    model.link_weights = vec![0.7, 2.0];
    let input = toy_input(&model, 1);
    ensure!(
        (input.graph.num_nodes(), input.graph.num_edges()) == (3, 4),
        "toy must have 3 nodes and 4 edges"
    );
    let (_, grads) = model.loss_and_grads(&input, None).map_err(|e| e.to_string())?;
    let mut store = model.params.clone();
    let (e2, name2) = gradient_error(&mut store, &grads, |s| {
        let mut m = model.clone();
        m.params = s.clone();
        m.loss_value(&input, None).unwrap()
    });
    ensure!(e2 < 1e-4, "stage 2: relative error {e2:e} in {name2}");

    let boxes = &toy_boxes()[..3];
    let g = build_graph(
        boxes,
        ImageSize::new(200.0, 120.0),
        GraphOptions { k: 2, polar_bins: 6 },
    )
    .unwrap();
    let config = StageOneConfig {
        dist_threshold: 0.8,
        margin: 5.0,
        ..Default::default()
    };
    let enc = StageOneEncoder::new(config, 6).map_err(|e| e.to_string())?;
    let triples = vec![(0, 1, 2), (2, 1, 0)];
    let (_, grads) = enc.loss_and_grads(&g, &triples).map_err(|e| e.to_string())?;
    let mut store = enc.params.clone();
    let (e1, name1) = gradient_error(&mut store, &grads, |s| {
        let mut e = enc.clone();
        e.params = s.clone();
        e.loss(&g, &triples).unwrap()
    });
    ensure!(e1 < 1e-4, "stage 1: relative error {e1:e} in {name1}");
    Ok(format!(
        "3-node toys, stage 1 max rel err {e1:.1e}, stage 2 max rel err {e2:.1e}"
    ))
}

/// Layer widths of the default models.
pub fn criterion_5() -> Outcome {
    let enc = StageOneEncoder::new(StageOneConfig::default(), 6).map_err(|e| e.to_string())?;
    let l1 = (enc.layer1.input, enc.layer1.output);
    let l2 = (enc.layer2.input, enc.layer2.output);
    ensure!(l1 == (24, 15), "stage-1 layer 1 is {l1:?}");
    ensure!(l2 == (30, 17), "stage-1 layer 2 is {l2:?}");
    let m = StageTwoModel::new(StageTwoConfig::default()).map_err(|e| e.to_string())?;
    let d = m.dimensions();
    ensure!(
        d.geometric == 17 && d.visual == 1448 && d.gat_input == 1465,
        "GAT input {d:?}"
    );
    ensure!(
        m.gat1.input == 1465 && m.gat1.output() == 1500 && m.gat1.heads == 1,
        "GAT 1"
    );
    ensure!(
        m.gat2.input == 1500 && m.gat2.output() == 3000 && m.gat2.heads == 2,
        "GAT 2"
    );
    ensure!(
        d.edge_head_input == 6014 && d.edge_head_input == 2 * m.gat2.output() + 2 * 4 + 6,
        "edge head input {}",
        d.edge_head_input
    );
    ensure!(
        d.node_head.first() == Some(&3000) && d.node_head.last() == Some(&4),
        "node head {:?}",
        d.node_head
    );
    ensure!(d.edge_head.last() == Some(&2), "edge head {:?}", d.edge_head);
    Ok(format!(
        "9+15=24->15, 15+15=30->17, 17+1448=1465->1500->3000, edge {} -> 2",
        d.edge_head_input
    ))
}

/// Boxes, predicted links, gold tables and the expected (correct, detected, gold) counts.
type TablePage = (Vec<BBox>, Vec<(usize, usize)>, Vec<BBox>, (usize, usize, usize));

/// Hand-enumerated table-detection pages.
fn table_pages() -> Vec<TablePage> {
    let b = BBox::new;
    vec![
        // Two cells linked into one table that matches the ground truth.
        (
            vec![
                b(0.0, 0.0, 10.0, 10.0),
                b(10.0, 0.0, 20.0, 10.0),
                b(50.0, 50.0, 60.0, 60.0),
            ],
            vec![(0, 1)],
            vec![b(0.0, 0.0, 20.0, 10.0)],
            (1, 1, 1),
        ),
        // No links: nothing detected, one table missed.
        (
            vec![b(0.0, 0.0, 10.0, 10.0), b(10.0, 0.0, 20.0, 10.0)],
            vec![],
            vec![b(0.0, 0.0, 20.0, 10.0)],
            (0, 0, 1),
        ),
        // Two components, one matching and one spurious.
        (
            vec![
                b(0.0, 0.0, 10.0, 10.0),
                b(0.0, 10.0, 10.0, 20.0),
                b(100.0, 100.0, 110.0, 110.0),
                b(120.0, 100.0, 130.0, 110.0),
            ],
            vec![(1, 0), (2, 3)],
            vec![b(0.0, 0.0, 10.0, 20.0)],
            (1, 2, 1),
        ),
        // Detection covering exactly half the union: IoU 0.5 is rejected.
        (
            vec![b(0.0, 0.0, 10.0, 10.0), b(10.0, 0.0, 20.0, 10.0)],
            vec![(0, 1)],
            vec![b(0.0, 0.0, 40.0, 10.0)],
            (0, 1, 1),
        ),
        // Chain of links through a middle cell forms one table; two gts,
        // the second one unmatched.
        (
            vec![
                b(0.0, 0.0, 10.0, 10.0),
                b(10.0, 0.0, 20.0, 10.0),
                b(20.0, 0.0, 30.0, 10.0),
            ],
            vec![(0, 1), (2, 1)],
            vec![b(0.0, 0.0, 30.0, 11.0), b(200.0, 200.0, 300.0, 300.0)],
            (1, 1, 2),
        ),
    ]
}

/// F1, AUC-PR and table detection against their oracles.
pub fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..200);
        let c = rng.gen_range(2..6);
        let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let pred: Vec<usize> = gold
            .iter()
            .map(|&g| if rng.gen_bool(0.6) { g } else { rng.gen_range(0..c) })
            .collect();
        let r = metrics::classification_f1(&pred, &gold, c).map_err(|e| e.to_string())?;
        let (per, micro) = f1_oracle(&pred, &gold, c);
        worst = worst.max((r.micro_f1 - micro).abs());
        for (s, o) in r.per_class.iter().zip(&per) {
            worst = worst.max((s.f1 - o).abs());
        }
    }
    ensure!(worst < 1e-12, "F1 deviation {worst:e}");
    let mut ap_worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..300);
        // Coarse scores create ties.
        let levels = rng.gen_range(2..50) as f64;
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * levels).floor() / levels).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let got = metrics::auc_pr(&scores, &labels).ok_or("AUC-PR undefined with both classes present")?;
        ap_worst = ap_worst.max((got - auc_pr_oracle(&scores, &labels)).abs());
    }
    ensure!(ap_worst < 1e-9, "AUC-PR deviation {ap_worst:e}");
    for (i, (boxes, links, gt, (correct, dets, gts))) in table_pages().into_iter().enumerate() {
        let edges = links.clone();
        let positive = vec![true; links.len()];
        let got = metrics::table_detection(&boxes, &edges, &positive, &gt, TABLE_IOU_THRESHOLD);
        ensure!(
            (got.correct, got.detections, got.ground_truth) == (correct, dets, gts),
            "page {i}: got {got:?}, expected ({correct}, {dets}, {gts})"
        );
    }
    let half = BBox::new(0.0, 0.0, 20.0, 10.0).iou(&BBox::new(0.0, 0.0, 40.0, 10.0));
    ensure!(half == 0.5, "boundary page IoU is {half}");
    Ok(format!(
        "F1 dev {worst:.1e}, AUC-PR dev {ap_worst:.1e}, 5 table pages, IoU=0.5 rejected"
    ))
}

/// Attention coefficients sum to one over every in-neighbourhood.
pub fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(1..25);
        let pairs: Vec<(usize, usize)> = (0..rng.gen_range(0..4 * n))
            .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n)))
            .filter(|(a, b)| a != b)
            .collect();
        let edges = AttentionEdges::from_pairs(n, pairs.into_iter());
        let heads = rng.gen_range(1..4);
        let mut store = ParamStore::new();
        let layer = GatLayer::new(&mut store, "gat", 6, heads, 5, &mut rng);
        let x = Matrix::from_vec(n, 6, (0..n * 6).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let mut tape = Tape::new(&store);
        let xv = tape.input(x);
        let (_, alpha) = layer.attention(&mut tape, xv, &edges, 0.2);
        let a = tape.value(alpha);
        for h in 0..heads {
            let mut sums = vec![0.0; n];
            for (e, &d) in edges.dst.iter().enumerate() {
                ensure!(a.get(e, h) >= 0.0, "negative coefficient");
                sums[d] += a.get(e, h);
            }
            for s in sums {
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    // Through the full model on a labeled toy.
    let model = StageTwoModel::new(tiny_stage2_config()).map_err(|e| e.to_string())?;
    let input = toy_input(&model, 3);
    let edges = AttentionEdges::new(&input.graph);
    for a in model.attention_weights(&input).map_err(|e| e.to_string())? {
        for h in 0..a.cols {
            let mut sums = vec![0.0; input.graph.num_nodes()];
            for (e, &d) in edges.dst.iter().enumerate() {
                sums[d] += a.get(e, h);
            }
            for s in sums {
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    ensure!(worst < 1e-6, "max |sum - 1| = {worst:e}");
    Ok(format!("50 random graphs + model toy, max |sum - 1| {worst:.1e}"))
}
