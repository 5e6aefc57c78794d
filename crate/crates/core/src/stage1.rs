//! Contrastive geometric encoder.
//!
//! Each node averages the raw features of its out-edges whose endpoints lie
//! within a distance gate, concatenates that with its own representation
//! and applies `ReLU(LayerNorm(W x))`. Two such layers map the 9-d node
//! geometry to a 17-d embedding, trained with a triplet margin loss over
//! entity classes.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::FeatureMask;
use crate::autograd::{self, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{edge_geom_dim, DEFAULT_POLAR_BINS, NODE_GEOM_DIM};
use crate::graph::DocumentGraph;
use crate::nn::{LayerNorm, Linear};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Matrix;

pub const HIDDEN_DIM: usize = 15;
pub const EMBED_DIM: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageOneConfig {
    /// Normalized center distance below which an out-neighbour is aggregated.
    pub dist_threshold: f64,
    /// Constant factor of the mean aggregation.
    pub scale_c: f64,
    pub margin: f64,
    pub p_norm: f64,
    pub triplets_per_anchor: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Draw fresh triplets every epoch instead of reusing the first draw.
    pub remine_each_epoch: bool,
    pub features: FeatureMask,
}

impl Default for StageOneConfig {
    fn default() -> Self {
        Self {
            dist_threshold: 0.3,
            scale_c: 1.0,
            margin: 1.0,
            p_norm: 2.0,
            triplets_per_anchor: 4,
            epochs: 100,
            learning_rate: 1e-3,
            seed: 42,
            remine_each_epoch: true,
            features: FeatureMask::ALL,
        }
    }
}

impl StageOneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dist_threshold > 0.0 && self.dist_threshold <= 1.0) {
            return Err(Error::Config("dist_threshold must lie in (0, 1]".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config("margin must be positive".into()));
        }
        if !(self.p_norm >= 1.0) {
            return Err(Error::Config("p_norm must be at least 1".into()));
        }
        if self.triplets_per_anchor == 0 {
            return Err(Error::Config("triplets_per_anchor must be positive".into()));
        }
        Ok(())
    }
}

/// Gated mean of node `node`'s outgoing edge features, scaled by `c`.
/// Zero when no out-neighbour is strictly closer than `gate`.
pub fn aggregate_messages(graph: &DocumentGraph, node: usize, gate: f64, c: f64, mask: &FeatureMask) -> Vec<f64> {
    let dim = graph.edge_dim();
    let mut acc = vec![0.0; dim];
    let mut count = 0usize;
    for e in graph.edges.iter().filter(|e| e.src == node) {
        if e.geom.dist() < gate {
            let mut m = e.geom.0.clone();
            mask.apply_edge(&mut m, graph.polar_bins);
            for (a, v) in acc.iter_mut().zip(&m) {
                *a += v;
            }
            count += 1;
        }
    }
    if count > 0 {
        let s = c / count as f64;
        for a in acc.iter_mut() {
            *a *= s;
        }
    }
    acc
}

/// Aggregated messages of every node as an `N x edge_dim` matrix.
pub fn aggregate_all(graph: &DocumentGraph, gate: f64, c: f64, mask: &FeatureMask) -> Matrix {
    let dim = graph.edge_dim();
    let n = graph.num_nodes();
    let mut acc = Matrix::zeros(n, dim);
    let mut count = vec![0usize; n];
    let mut m = vec![0.0; dim];
    for e in &graph.edges {
        if e.geom.dist() < gate {
            m.copy_from_slice(e.geom.as_slice());
            mask.apply_edge(&mut m, graph.polar_bins);
            for (a, v) in acc.row_mut(e.src).iter_mut().zip(&m) {
                *a += v;
            }
            count[e.src] += 1;
        }
    }
    for (i, &k) in count.iter().enumerate() {
        if k > 0 {
            let s = c / k as f64;
            for a in acc.row_mut(i) {
                *a *= s;
            }
        }
    }
    acc
}

/// Masked `N x 9` node geometry.
pub fn node_inputs(graph: &DocumentGraph, mask: &FeatureMask) -> Matrix {
    let mut x = graph.node_features();
    for r in 0..x.rows {
        mask.apply_node(x.row_mut(r));
    }
    x
}

/// `max(||a - p||_p - ||a - n||_p + margin, 0)`.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64, p: f64) -> f64 {
    autograd::triplet_value(anchor, positive, negative, margin, p)
}

/// For each anchor, `per_anchor` triplets with a uniformly drawn same-label
/// positive and different-label negative. Anchors without a same-label
/// partner are skipped; a single-class batch yields nothing.
pub fn mine_triplets(labels: &[usize], per_anchor: usize, seed: u64) -> Vec<(usize, usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let distinct = {
        let mut l = labels.to_vec();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < 2 {
        log::warn!("triplet mining: batch has a single class, no triplets");
        return out;
    }
    for (a, &la) in labels.iter().enumerate() {
        let pos: Vec<usize> = (0..labels.len()).filter(|&j| j != a && labels[j] == la).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != la).collect();
        if pos.is_empty() {
            continue;
        }
        for _ in 0..per_anchor {
            let p = *pos.choose(&mut rng).expect("non-empty");
            let n = *neg.choose(&mut rng).expect("non-empty");
            out.push((a, p, n));
        }
    }
    out
}

/// Deterministic per-batch seed.
pub fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    let mut z =
        seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (batch as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneEncoder {
    pub params: ParamStore,
    pub layer1: Linear,
    pub norm1: LayerNorm,
    pub layer2: Linear,
    pub norm2: LayerNorm,
    pub edge_dim: usize,
    pub config: StageOneConfig,
}

impl StageOneEncoder {
    /// Fresh encoder for edges with `polar_bins` sectors.
    pub fn new(config: StageOneConfig, polar_bins: usize) -> Result<Self> {
        config.validate()?;
        let edge_dim = edge_geom_dim(polar_bins);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let layer1 = Linear::new(
            &mut params,
            "stage1.layer1",
            NODE_GEOM_DIM + edge_dim,
            HIDDEN_DIM,
            true,
            &mut rng,
        );
        let norm1 = LayerNorm::new(&mut params, "stage1.norm1", HIDDEN_DIM);
        let layer2 = Linear::new(
            &mut params,
            "stage1.layer2",
            HIDDEN_DIM + edge_dim,
            EMBED_DIM,
            true,
            &mut rng,
        );
        let norm2 = LayerNorm::new(&mut params, "stage1.norm2", EMBED_DIM);
        let enc = Self {
            params,
            layer1,
            norm1,
            layer2,
            norm2,
            edge_dim,
            config,
        };
        if polar_bins == DEFAULT_POLAR_BINS {
            debug_assert_eq!((enc.layer1.input, enc.layer2.input), (24, 30));
        }
        Ok(enc)
    }

    /// Records the two message-passing layers on `tape`; returns `N x 17`.
    pub fn forward(&self, tape: &mut Tape, graph: &DocumentGraph) -> Result<Var> {
        if graph.edge_dim() != self.edge_dim {
            return Err(Error::Dimension {
                stage: "stage1 edge features",
                expected: self.edge_dim,
                got: graph.edge_dim(),
            });
        }
        let cfg = &self.config;
        let msgs = tape.input(aggregate_all(graph, cfg.dist_threshold, cfg.scale_c, &cfg.features));
        let x = tape.input(node_inputs(graph, &cfg.features));
        let z = tape.concat(&[x, msgs]);
        let z = self.layer1.forward(tape, z);
        let z = self.norm1.forward(tape, z);
        let h = tape.relu(z);
        let z = tape.concat(&[h, msgs]);
        let z = self.layer2.forward(tape, z);
        let z = self.norm2.forward(tape, z);
        Ok(tape.relu(z))
    }

    /// Per-node embeddings, `N x 17`.
    pub fn encode(&self, graph: &DocumentGraph) -> Result<Matrix> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, graph)?;
        Ok(tape.value(out).clone())
    }

    /// Mean triplet loss on one labeled graph and its gradients.
    pub fn loss_and_grads(
        &self,
        graph: &DocumentGraph,
        triples: &[(usize, usize, usize)],
    ) -> Result<(f64, autograd::Grads)> {
        let mut tape = Tape::new(&self.params);
        let emb = self.forward(&mut tape, graph)?;
        let loss = tape.triplet_loss(emb, triples, self.config.margin, self.config.p_norm);
        Ok((tape.scalar(loss), tape.backward(loss)))
    }

    pub fn loss(&self, graph: &DocumentGraph, triples: &[(usize, usize, usize)]) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let emb = self.forward(&mut tape, graph)?;
        let loss = tape.triplet_loss(emb, triples, self.config.margin, self.config.p_norm);
        Ok(tape.scalar(loss))
    }
}

/// Triplets for one document in one epoch.
pub fn triplets_for(
    graph: &DocumentGraph,
    config: &StageOneConfig,
    epoch: usize,
    batch: usize,
) -> Vec<(usize, usize, usize)> {
    let Some(labels) = graph.node_labels() else {
        return Vec::new();
    };
    let epoch = if config.remine_each_epoch { epoch } else { 0 };
    mine_triplets(
        &labels,
        config.triplets_per_anchor,
        batch_seed(config.seed, epoch, batch),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Resumable training state: parameters, optimizer moments and history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneTrainer {
    pub encoder: StageOneEncoder,
    pub optimizer: Adam,
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

impl StageOneTrainer {
    pub fn new(config: StageOneConfig, polar_bins: usize) -> Result<Self> {
        let encoder = StageOneEncoder::new(config, polar_bins)?;
        let optimizer = Adam::new(
            AdamConfig {
                lr: config.learning_rate,
                ..Default::default()
            },
            &encoder.params,
        );
        Ok(Self {
            encoder,
            optimizer,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// One pass over `train`, one optimizer step per document. Returns the
    /// mean pre-update loss.
    pub fn train_epoch(&mut self, train: &[DocumentGraph]) -> Result<f64> {
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, g) in train.iter().enumerate() {
            let triples = triplets_for(g, &self.encoder.config, self.epoch, b);
            if triples.is_empty() {
                continue;
            }
            let (loss, grads) = self.encoder.loss_and_grads(g, &triples)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch: self.epoch,
                    batch: b,
                    param_norm: self.encoder.params.norm(),
                });
            }
            self.optimizer.update(&mut self.encoder.params, &grads);
            total += loss;
            batches += 1;
        }
        Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
    }

    /// Mean loss over `docs` with the triplets of `epoch`, no update.
    pub fn evaluate(&self, docs: &[DocumentGraph], epoch: usize) -> Result<f64> {
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, g) in docs.iter().enumerate() {
            let triples = triplets_for(g, &self.encoder.config, epoch, b);
            if triples.is_empty() {
                continue;
            }
            total += self.encoder.loss(g, &triples)?;
            batches += 1;
        }
        Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
    }

    /// Trains one epoch, scores `val` and appends to the history.
    pub fn step(&mut self, train: &[DocumentGraph], val: &[DocumentGraph]) -> Result<EpochLog> {
        let train_loss = self.train_epoch(train)?;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(self.evaluate(val, 0)?)
        };
        let log = EpochLog {
            epoch: self.epoch,
            train_loss,
            val_loss,
        };
        log::info!("stage1 epoch {} train {:.5} val {:?}", self.epoch, train_loss, val_loss);
        self.history.push(log);
        self.epoch += 1;
        Ok(log)
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.encoder.config.epochs
    }
}

/// Full training run without checkpoint hooks.
pub fn train_stage1(train: &[DocumentGraph], val: &[DocumentGraph], config: StageOneConfig) -> Result<StageOneTrainer> {
    let bins = train.first().map_or(DEFAULT_POLAR_BINS, |g| g.polar_bins);
    let mut t = StageOneTrainer::new(config, bins)?;
    while !t.done() {
        t.step(train, val)?;
    }
    Ok(t)
}
