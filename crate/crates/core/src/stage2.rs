//! Graph-attention prediction model.
//!
//! Node inputs are the frozen 17-d geometric embedding concatenated with a
//! fine-tuned visual embedding (1465 wide by default). Two attention layers
//! with projected residuals produce 3000-d node states `h`; a five-layer
//! head classifies nodes and a five-layer head classifies every kNN edge
//! from `h_src | h_dst | cls_src | cls_dst | e_polar`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::ModalityMask;
use crate::autograd::{Grads, ParamId, ParamStore, Reduction, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::DEFAULT_POLAR_BINS;
use crate::graph::{DocumentGraph, LinkLabel};
use crate::math;
use crate::metrics;
use crate::nn::{fan_in_uniform, he_uniform, Linear, Mlp};
use crate::optim::{Adam, AdamConfig};
use crate::stage1::{batch_seed, EMBED_DIM};
use crate::tensor::Matrix;
use crate::visual::{VisualEncoder, VisualEncoderConfig, VisualInput};

/// How the two link classes are weighted in the cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkWeighting {
    /// `total / (classes * count)` from the training edges.
    InverseFrequency,
    Unweighted,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageTwoConfig {
    /// Width of each attention head.
    pub hidden: usize,
    /// Heads of the second attention layer (the first has one).
    pub heads: usize,
    pub dropout: f64,
    pub negative_slope: f64,
    pub node_head_hidden: Vec<usize>,
    pub edge_head_hidden: Vec<usize>,
    pub num_classes: usize,
    pub polar_bins: usize,
    pub link_weighting: LinkWeighting,
    pub reduction: Reduction,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub modality: ModalityMask,
    pub visual: VisualEncoderConfig,
}

impl Default for StageTwoConfig {
    fn default() -> Self {
        Self {
            hidden: 1500,
            heads: 2,
            dropout: 0.2,
            negative_slope: 0.2,
            node_head_hidden: vec![1024, 256, 64, 16],
            edge_head_hidden: vec![1024, 256, 64, 16],
            num_classes: 4,
            polar_bins: DEFAULT_POLAR_BINS,
            link_weighting: LinkWeighting::InverseFrequency,
            reduction: Reduction::Sum,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            epochs: 100,
            seed: 42,
            modality: ModalityMask::default(),
            visual: VisualEncoderConfig::default(),
        }
    }
}

impl StageTwoConfig {
    pub fn input_width(&self) -> usize {
        EMBED_DIM + self.visual.embed_dim
    }

    pub fn node_state_width(&self) -> usize {
        self.hidden * self.heads
    }

    /// `2 H + 2 C + bins`.
    pub fn edge_input_width(&self) -> usize {
        2 * self.node_state_width() + 2 * self.num_classes + self.polar_bins
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.num_classes < 2 || self.polar_bins == 0 {
            return Err(Error::Config(
                "stage2 widths must be positive and num_classes >= 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.node_head_hidden.len() != 4 || self.edge_head_hidden.len() != 4 {
            return Err(Error::Config(
                "prediction heads have five layers (four hidden widths)".into(),
            ));
        }
        if let LinkWeighting::Fixed(w) = &self.link_weighting {
            if w.len() != 2 || w.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config("fixed link weights need two positive values".into()));
            }
        }
        self.visual.validate()
    }
}

/// Multi-head attention layer with a projected residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatLayer {
    pub weight: ParamId,
    pub att_src: ParamId,
    pub att_dst: ParamId,
    pub residual: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub heads: usize,
    pub width: usize,
}

/// Attention edge lists: graph edges plus one self-loop per node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionEdges {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub nodes: usize,
}

impl AttentionEdges {
    pub fn new(graph: &DocumentGraph) -> Self {
        Self::from_pairs(graph.num_nodes(), graph.edges.iter().map(|e| (e.src, e.dst)))
    }

    pub fn from_pairs(nodes: usize, pairs: impl Iterator<Item = (usize, usize)>) -> Self {
        let (mut src, mut dst): (Vec<usize>, Vec<usize>) = pairs.unzip();
        src.extend(0..nodes);
        dst.extend(0..nodes);
        Self { src, dst, nodes }
    }
}

/// Inverted dropout mask.
fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let keep = 1.0 / (1.0 - rate);
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect(),
    )
}

/// Dropout settings for a training-mode forward pass.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl GatLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        heads: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let out = heads * width;
        Self {
            weight: store.add(format!("{name}.weight"), he_uniform(input, out, input, rng)),
            att_src: store.add(format!("{name}.att_src"), fan_in_uniform(heads, width, width, rng)),
            att_dst: store.add(format!("{name}.att_dst"), fan_in_uniform(heads, width, width, rng)),
            residual: store.add(format!("{name}.residual"), he_uniform(input, out, input, rng)),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, out)),
            input,
            heads,
            width,
        }
    }

    pub fn output(&self) -> usize {
        self.heads * self.width
    }

    /// Projected features and pre-dropout attention coefficients
    /// (`E' x heads`, softmax-normalized over each target's in-edges).
    pub fn attention(&self, tape: &mut Tape, x: Var, edges: &AttentionEdges, slope: f64) -> (Var, Var) {
        let w = tape.param(self.weight);
        let feat = tape.matmul(x, w);
        let a_src = tape.param(self.att_src);
        let a_dst = tape.param(self.att_dst);
        let s_src = tape.head_dot(feat, a_src, self.heads);
        let s_dst = tape.head_dot(feat, a_dst, self.heads);
        let from = tape.gather(s_src, &edges.src);
        let to = tape.gather(s_dst, &edges.dst);
        let scores = tape.add(from, to);
        let scores = tape.leaky_relu(scores, slope);
        let alpha = tape.segment_softmax(scores, &edges.dst, edges.nodes);
        (feat, alpha)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        edges: &AttentionEdges,
        slope: f64,
        dropout: Option<&mut Dropout>,
    ) -> Var {
        let mut dropout = dropout;
        let x = match dropout.as_deref_mut() {
            Some(d) if d.rate > 0.0 => {
                let (r, c) = tape.shape(x);
                let m = dropout_mask(r, c, d.rate, d.rng);
                tape.mul_const(x, m)
            }
            _ => x,
        };
        let (feat, mut alpha) = self.attention(tape, x, edges, slope);
        if let Some(d) = dropout {
            if d.rate > 0.0 {
                let (r, c) = tape.shape(alpha);
                let m = dropout_mask(r, c, d.rate, d.rng);
                alpha = tape.mul_const(alpha, m);
            }
        }
        let agg = tape.gat_aggregate(feat, alpha, &edges.src, &edges.dst, edges.nodes, self.heads);
        let wr = tape.param(self.residual);
        let res = tape.matmul(x, wr);
        let out = tape.add(agg, res);
        let b = tape.param(self.bias);
        let out = tape.add_row(out, b);
        tape.relu(out)
    }
}

/// Link classifier whose first layer is split into blocks over the parts
/// of `h_src | h_dst | cls_src | cls_dst | e_polar`, so it can run on
/// per-node projections instead of materializing every edge vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeHead {
    pub src_state: Linear,
    pub dst_state: Linear,
    pub src_class: Linear,
    pub dst_class: Linear,
    pub polar: Linear,
    pub rest: Mlp,
}

impl EdgeHead {
    fn new(store: &mut ParamStore, cfg: &StageTwoConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.node_state_width();
        let c = cfg.num_classes;
        let first = cfg.edge_head_hidden[0];
        let fan_in = cfg.edge_input_width();
        let mut block = |name: &str, rows: usize, bias: bool| {
            let weight = store.add(format!("edge_head.0.{name}"), he_uniform(rows, first, fan_in, rng));
            let bias = bias.then(|| store.add("edge_head.0.bias", Matrix::zeros(1, first)));
            Linear {
                weight,
                bias,
                input: rows,
                output: first,
            }
        };
        let src_state = block("src_state", h, true);
        let dst_state = block("dst_state", h, false);
        let src_class = block("src_class", c, false);
        let dst_class = block("dst_class", c, false);
        let polar = block("polar", cfg.polar_bins, false);
        let mut widths = cfg.edge_head_hidden.clone();
        widths.push(2);
        let rest = Mlp::new(store, "edge_head.rest", &widths, rng);
        Self {
            src_state,
            dst_state,
            src_class,
            dst_class,
            polar,
            rest,
        }
    }

    pub fn input_width(&self) -> usize {
        self.src_state.input + self.dst_state.input + self.src_class.input + self.dst_class.input + self.polar.input
    }

    /// The first-layer weight as one `input_width x hidden` matrix, rows in
    /// edge-representation order.
    pub fn stacked_first_weight(&self, store: &ParamStore) -> Matrix {
        let blocks = [
            self.src_state.weight,
            self.dst_state.weight,
            self.src_class.weight,
            self.dst_class.weight,
            self.polar.weight,
        ];
        let cols = self.src_state.output;
        let mut data = Vec::with_capacity(self.input_width() * cols);
        for b in blocks {
            data.extend_from_slice(&store.value(b).data);
        }
        Matrix::from_vec(self.input_width(), cols, data)
    }

    fn forward(&self, tape: &mut Tape, h: Var, cls: Var, polar: Var, src: &[usize], dst: &[usize]) -> Var {
        let hs = self.src_state.forward(tape, h);
        let hd = self.dst_state.forward(tape, h);
        let cs = self.src_class.forward(tape, cls);
        let cd = self.dst_class.forward(tape, cls);
        let hs_e = tape.gather(hs, src);
        let hd_e = tape.gather(hd, dst);
        let cs_e = tape.gather(cs, src);
        let cd_e = tape.gather(cd, dst);
        let p = self.polar.forward(tape, polar);
        let z = tape.add(hs_e, hd_e);
        let z = tape.add(z, cs_e);
        let z = tape.add(z, cd_e);
        let z = tape.add(z, p);
        let z = tape.relu(z);
        self.rest.forward(tape, z)
    }
}

/// `h_src | h_dst | cls_src | cls_dst | e_polar`.
pub fn edge_representation(h: &Matrix, cls: &Matrix, src: usize, dst: usize, polar: &[f64]) -> Result<Vec<f64>> {
    if src >= h.rows || dst >= h.rows || src == dst {
        return Err(Error::EdgeIndex(src.max(dst)));
    }
    let mut v = Vec::with_capacity(2 * h.cols + 2 * cls.cols + polar.len());
    v.extend_from_slice(h.row(src));
    v.extend_from_slice(h.row(dst));
    v.extend_from_slice(cls.row(src));
    v.extend_from_slice(cls.row(dst));
    v.extend_from_slice(polar);
    Ok(v)
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub node_logits: Var,
    pub node_states: Var,
    pub node_probs: Var,
    pub edge_logits: Var,
}

/// Everything the model needs for one document besides its parameters.
#[derive(Debug, Clone)]
pub struct StageTwoInput {
    pub graph: DocumentGraph,
    /// Frozen `N x 17` geometric embeddings.
    pub geometric: Matrix,
    pub visual: VisualInput,
}

impl StageTwoInput {
    pub fn node_labels(&self) -> Option<Vec<usize>> {
        self.graph.node_labels()
    }

    pub fn edge_targets(&self) -> Option<Vec<usize>> {
        self.graph
            .link_labels()
            .map(|ls| ls.into_iter().map(|l| usize::from(l.is_positive())).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTwoModel {
    pub config: StageTwoConfig,
    pub params: ParamStore,
    pub visual: VisualEncoder,
    pub gat1: GatLayer,
    pub gat2: GatLayer,
    pub node_head: Mlp,
    pub edge_head: EdgeHead,
    /// Per-class weights of the link loss, fixed before training.
    pub link_weights: Vec<f64>,
}

/// Dimension ledger of a model, checked at construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    pub geometric: usize,
    pub visual: usize,
    pub gat_input: usize,
    pub gat1_output: usize,
    pub gat2_output: usize,
    pub node_head: Vec<usize>,
    pub edge_head_input: usize,
    pub edge_head: Vec<usize>,
}

impl StageTwoModel {
    pub fn new(config: StageTwoConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let visual = VisualEncoder::new(&mut params, "visual", config.visual.clone(), &mut rng)?;
        let input = config.input_width();
        let gat1 = GatLayer::new(&mut params, "gat1", input, 1, config.hidden, &mut rng);
        let gat2 = GatLayer::new(
            &mut params,
            "gat2",
            gat1.output(),
            config.heads,
            config.hidden,
            &mut rng,
        );
        let mut widths = vec![gat2.output()];
        widths.extend_from_slice(&config.node_head_hidden);
        widths.push(config.num_classes);
        let node_head = Mlp::new(&mut params, "node_head", &widths, &mut rng);
        let edge_head = EdgeHead::new(&mut params, &config, &mut rng);
        let model = Self {
            link_weights: vec![1.0, 1.0],
            config,
            params,
            visual,
            gat1,
            gat2,
            node_head,
            edge_head,
        };
        model.check_dimensions()?;
        Ok(model)
    }

    pub fn dimensions(&self) -> Dimensions {
        let mut edge_head = vec![self.edge_head.input_width()];
        edge_head.extend(self.edge_head.rest.widths());
        Dimensions {
            geometric: EMBED_DIM,
            visual: self.visual.embed_dim(),
            gat_input: self.gat1.input,
            gat1_output: self.gat1.output(),
            gat2_output: self.gat2.output(),
            node_head: self.node_head.widths(),
            edge_head_input: self.edge_head.input_width(),
            edge_head,
        }
    }

    fn check_dimensions(&self) -> Result<()> {
        let d = self.dimensions();
        let check = |stage: &'static str, expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(Error::Dimension { stage, expected, got })
            }
        };
        check("gat input", d.geometric + d.visual, d.gat_input)?;
        check("gat2 input", d.gat1_output, self.gat2.input)?;
        check("node head input", d.gat2_output, d.node_head[0])?;
        check(
            "node head output",
            self.config.num_classes,
            *d.node_head.last().unwrap(),
        )?;
        check(
            "edge head input",
            2 * d.gat2_output + 2 * self.config.num_classes + self.config.polar_bins,
            d.edge_head_input,
        )?;
        check("edge head output", 2, *d.edge_head.last().unwrap())?;
        check("node head depth", 6, d.node_head.len())?;
        check("edge head depth", 6, d.edge_head.len())
    }

    /// Sets the link-loss weights from the edge labels of the training graphs.
    pub fn fit_link_weights<'g>(&mut self, graphs: impl IntoIterator<Item = &'g DocumentGraph>) {
        self.link_weights = match &self.config.link_weighting {
            LinkWeighting::Unweighted => vec![1.0, 1.0],
            LinkWeighting::Fixed(w) => w.clone(),
            LinkWeighting::InverseFrequency => {
                let mut counts = [0usize; 2];
                for g in graphs {
                    for e in &g.edges {
                        if let Some(l) = e.link {
                            counts[usize::from(l.is_positive())] += 1;
                        }
                    }
                }
                let total = (counts[0] + counts[1]) as f64;
                counts
                    .iter()
                    .map(|&c| if c == 0 { 1.0 } else { total / (2.0 * c as f64) })
                    .collect()
            }
        };
    }

    fn check_input(&self, input: &StageTwoInput) -> Result<()> {
        let n = input.graph.num_nodes();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if input.geometric.shape() != (n, EMBED_DIM) {
            return Err(Error::Dimension {
                stage: "stage2 geometric input",
                expected: EMBED_DIM,
                got: input.geometric.cols,
            });
        }
        if input.visual.len() != n {
            return Err(Error::Dimension {
                stage: "stage2 visual input rows",
                expected: n,
                got: input.visual.len(),
            });
        }
        if input.graph.polar_bins != self.config.polar_bins {
            return Err(Error::Dimension {
                stage: "stage2 polar bins",
                expected: self.config.polar_bins,
                got: input.graph.polar_bins,
            });
        }
        Ok(())
    }

    /// Records the full model on `tape`. `dropout` switches training mode.
    pub fn forward(&self, tape: &mut Tape, input: &StageTwoInput, mut dropout: Option<Dropout>) -> Result<Outputs> {
        self.check_input(input)?;
        let graph = &input.graph;
        let n = graph.num_nodes();
        let modality = self.config.modality;
        let geo = if modality.geometric {
            input.geometric.clone()
        } else {
            Matrix::zeros(n, EMBED_DIM)
        };
        let geo = tape.input(geo);
        let vis = if !modality.visual {
            tape.input(Matrix::zeros(n, self.visual.embed_dim()))
        } else if self.visual.config.trainable {
            self.visual.forward(tape, &input.visual)
        } else {
            let mut side = Tape::new(&self.params);
            let v = self.visual.forward(&mut side, &input.visual);
            let v = side.value(v).clone();
            tape.input(v)
        };
        let x = tape.concat(&[geo, vis]);
        let edges = AttentionEdges::new(graph);
        let slope = self.config.negative_slope;
        let h1 = self.gat1.forward(tape, x, &edges, slope, dropout.as_mut());
        let h = self.gat2.forward(tape, h1, &edges, slope, dropout.as_mut());
        let node_logits = self.node_head.forward(tape, h);
        let node_probs = tape.softmax_rows(node_logits);
        let polar = tape.input(graph.polar_features());
        let edge_logits = self
            .edge_head
            .forward(tape, h, node_probs, polar, &graph.sources(), &graph.targets());
        Ok(Outputs {
            node_logits,
            node_states: h,
            node_probs,
            edge_logits,
        })
    }

    /// Joint loss of one labeled document recorded on `tape`.
    pub fn loss(&self, tape: &mut Tape, input: &StageTwoInput, dropout: Option<Dropout>) -> Result<Var> {
        let labels = input
            .node_labels()
            .ok_or(Error::Config("stage2 training needs node labels".into()))?;
        let targets = input
            .edge_targets()
            .ok_or(Error::Config("stage2 training needs edge labels".into()))?;
        let out = self.forward(tape, input, dropout)?;
        let entity = tape.cross_entropy(out.node_logits, &labels, None, self.config.reduction);
        if targets.is_empty() {
            return Ok(entity);
        }
        let link = tape.cross_entropy(
            out.edge_logits,
            &targets,
            Some(&self.link_weights),
            self.config.reduction,
        );
        Ok(tape.add(entity, link))
    }

    /// Loss and gradients; `seed` fixes the dropout masks, `None` disables dropout.
    pub fn loss_and_grads(&self, input: &StageTwoInput, seed: Option<u64>) -> Result<(f64, Grads)> {
        let mut tape = Tape::new(&self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
        let dropout = seed.map(|_| Dropout {
            rate: self.config.dropout,
            rng: &mut rng,
        });
        let loss = self.loss(&mut tape, input, dropout)?;
        let value = tape.scalar(loss);
        Ok((value, tape.backward(loss)))
    }

    pub fn loss_value(&self, input: &StageTwoInput, seed: Option<u64>) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
        let dropout = seed.map(|_| Dropout {
            rate: self.config.dropout,
            rng: &mut rng,
        });
        let loss = self.loss(&mut tape, input, dropout)?;
        Ok(tape.scalar(loss))
    }

    /// Inference: argmax node labels and thresholded link probabilities.
    pub fn predict(&self, input: &StageTwoInput) -> Result<Prediction> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, input, None)?;
        let node_probs = tape.value(out.node_probs).clone();
        let edge_probs: Vec<f64> = tape
            .value(out.edge_logits)
            .softmax_rows()
            .to_rows()
            .into_iter()
            .map(|r| r[1])
            .collect();
        Ok(Prediction {
            node_labels: node_probs.argmax_rows(),
            edge_positive: edge_probs.iter().map(|&p| link_decision(p)).collect(),
            node_probs,
            edge_probs,
            node_states: tape.value(out.node_states).clone(),
        })
    }

    /// Pre-dropout attention coefficients of both layers in inference mode.
    pub fn attention_weights(&self, input: &StageTwoInput) -> Result<[Matrix; 2]> {
        self.check_input(input)?;
        let mut tape = Tape::new(&self.params);
        let n = input.graph.num_nodes();
        let geo = tape.input(if self.config.modality.geometric {
            input.geometric.clone()
        } else {
            Matrix::zeros(n, EMBED_DIM)
        });
        let vis = if self.config.modality.visual {
            self.visual.forward(&mut tape, &input.visual)
        } else {
            tape.input(Matrix::zeros(n, self.visual.embed_dim()))
        };
        let x = tape.concat(&[geo, vis]);
        let edges = AttentionEdges::new(&input.graph);
        let slope = self.config.negative_slope;
        let (_, a1) = self.gat1.attention(&mut tape, x, &edges, slope);
        let h1 = self.gat1.forward(&mut tape, x, &edges, slope, None);
        let (_, a2) = self.gat2.attention(&mut tape, h1, &edges, slope);
        Ok([tape.value(a1).clone(), tape.value(a2).clone()])
    }
}

/// A link is predicted iff its positive-class probability exceeds 0.5.
pub fn link_decision(p: f64) -> bool {
    p > 0.5
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub node_labels: Vec<usize>,
    pub node_probs: Matrix,
    pub node_states: Matrix,
    /// Positive-class probability per graph edge.
    pub edge_probs: Vec<f64>,
    pub edge_positive: Vec<bool>,
}

impl Prediction {
    pub fn edge_labels(&self, positive: LinkLabel) -> Vec<LinkLabel> {
        self.edge_positive
            .iter()
            .map(|&p| if p { positive } else { LinkLabel::None })
            .collect()
    }
}

/// `L_entity + L_link` evaluated directly from logits.
pub fn joint_loss(
    node_logits: &Matrix,
    node_labels: &[usize],
    edge_logits: &Matrix,
    edge_labels: &[usize],
    link_weights: Option<&[f64]>,
    reduction: Reduction,
) -> Result<f64> {
    let ce = |logits: &Matrix, labels: &[usize], w: Option<&[f64]>| -> Result<f64> {
        if logits.rows != labels.len() {
            return Err(Error::SizeMismatch {
                records: labels.len(),
                nodes: logits.rows,
            });
        }
        let mut total = 0.0;
        let mut wsum = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= logits.cols {
                return Err(Error::Config(format!("label {y} out of range")));
            }
            let wy = w.map_or(1.0, |w| w[y]);
            total -= wy * (logits.get(r, y) - math::log_sum_exp(logits.row(r)));
            wsum += wy;
        }
        Ok(match reduction {
            Reduction::Sum => total,
            Reduction::Mean if wsum > 0.0 => total / wsum,
            Reduction::Mean => 0.0,
        })
    };
    let loss = ce(node_logits, node_labels, None)? + ce(edge_logits, edge_labels, link_weights)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            epoch: 0,
            batch: 0,
            param_norm: f64::NAN,
        });
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTwoEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_node_f1: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_node_f1: Option<f64>,
    pub val_key_value_f1: Option<f64>,
}

impl StageTwoEpochLog {
    /// Model-selection score: node micro F1 plus key-value F1 on validation.
    pub fn selection_score(&self) -> Option<f64> {
        Some(self.val_node_f1? + self.val_key_value_f1.unwrap_or(0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTwoTrainer {
    pub model: StageTwoModel,
    pub optimizer: Adam,
    pub epoch: usize,
    pub history: Vec<StageTwoEpochLog>,
    /// Epoch and score of the best validation result so far.
    pub best: Option<(usize, f64)>,
}

impl StageTwoTrainer {
    pub fn new<'g>(config: StageTwoConfig, train: impl IntoIterator<Item = &'g DocumentGraph>) -> Result<Self> {
        let mut model = StageTwoModel::new(config)?;
        model.fit_link_weights(train);
        let optimizer = Adam::new(
            AdamConfig {
                lr: model.config.learning_rate,
                weight_decay: model.config.weight_decay,
                ..Default::default()
            },
            &model.params,
        );
        Ok(Self {
            model,
            optimizer,
            epoch: 0,
            history: Vec::new(),
            best: None,
        })
    }

    /// One optimizer step on document `batch` of the current epoch;
    /// returns the pre-update loss.
    pub fn train_step(&mut self, doc: &StageTwoInput, batch: usize) -> Result<f64> {
        let seed = batch_seed(self.model.config.seed, self.epoch, batch);
        let (loss, grads) = self.model.loss_and_grads(doc, Some(seed))?;
        if !loss.is_finite() || !grads.norm().is_finite() {
            return Err(Error::NonFinite {
                epoch: self.epoch,
                batch,
                param_norm: self.model.params.norm(),
            });
        }
        self.optimizer.update(&mut self.model.params, &grads);
        Ok(loss)
    }

    /// One optimizer step per document; returns the mean pre-update loss.
    pub fn train_epoch(&mut self, train: &[StageTwoInput]) -> Result<f64> {
        let mut total = 0.0;
        for (b, doc) in train.iter().enumerate() {
            total += self.train_step(doc, b)?;
        }
        Ok(if train.is_empty() {
            0.0
        } else {
            total / train.len() as f64
        })
    }

    /// Appends an epoch log, tracks the best validation score and advances
    /// the epoch counter. Returns whether this epoch is the new best.
    pub fn finish_epoch(&mut self, log: StageTwoEpochLog) -> bool {
        let improved = match (log.selection_score(), self.best) {
            (Some(s), Some((_, b))) => s > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            self.best = Some((self.epoch, log.selection_score().unwrap_or_default()));
        }
        self.history.push(log);
        self.epoch += 1;
        improved
    }

    /// Trains one epoch and scores the splits. Returns the log and whether
    /// this epoch is the new best on validation.
    pub fn step(
        &mut self,
        train: &[StageTwoInput],
        val: &[StageTwoInput],
        score_train: bool,
    ) -> Result<(StageTwoEpochLog, bool)> {
        let train_loss = self.train_epoch(train)?;
        let train_node_f1 = if score_train {
            Some(node_micro_f1(&self.model, train)?)
        } else {
            None
        };
        let (val_loss, val_node_f1, val_key_value_f1) = if val.is_empty() {
            (None, None, None)
        } else {
            let mut loss = 0.0;
            for d in val {
                loss += self.model.loss_value(d, None)?;
            }
            let (nf1, kv) = node_and_link_f1(&self.model, val)?;
            (Some(loss / val.len() as f64), Some(nf1), kv)
        };
        let log = StageTwoEpochLog {
            epoch: self.epoch,
            train_loss,
            train_node_f1,
            val_loss,
            val_node_f1,
            val_key_value_f1,
        };
        log::info!(
            "stage2 epoch {} train {:.5} f1 {:?} val {:?} f1 {:?} kv {:?}",
            log.epoch,
            log.train_loss,
            log.train_node_f1,
            log.val_loss,
            log.val_node_f1,
            log.val_key_value_f1
        );
        let improved = self.finish_epoch(log);
        Ok((log, improved))
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.model.config.epochs
    }
}

/// Micro F1 of node predictions over `docs`.
pub fn node_micro_f1(model: &StageTwoModel, docs: &[StageTwoInput]) -> Result<f64> {
    Ok(node_and_link_f1(model, docs)?.0)
}

/// Node micro F1 and the positive-link F1 (if any edges) over `docs`.
pub fn node_and_link_f1(model: &StageTwoModel, docs: &[StageTwoInput]) -> Result<(f64, Option<f64>)> {
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    let mut epred = Vec::new();
    let mut egold = Vec::new();
    for d in docs {
        let p = model.predict(d)?;
        pred.extend(p.node_labels.iter().copied());
        gold.extend(d.node_labels().ok_or(Error::EmptyInput)?);
        epred.extend(p.edge_positive.iter().map(|&b| usize::from(b)));
        egold.extend(d.edge_targets().unwrap_or_default());
    }
    let nodes = metrics::classification_f1(&pred, &gold, model.config.num_classes)?;
    let links = if egold.is_empty() {
        None
    } else {
        Some(metrics::classification_f1(&epred, &egold, 2)?.per_class[1].f1)
    };
    Ok((nodes.micro_f1, links))
}
