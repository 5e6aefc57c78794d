//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Parameters live in a [`ParamStore`] that the tape borrows; a forward
//! pass records one node per operation and [`Tape::backward`] returns the
//! gradient of a scalar node with respect to every parameter it touched.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::tensor::{gemm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
}

/// Named parameter matrices, addressed by [`ParamId`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.params.iter().map(|p| p.value.norm2_squared()).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Replaces values by name; shapes must agree. Returns the names that
    /// were not found in `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> core::result::Result<Vec<String>, String> {
        let mut missing = Vec::new();
        for p in self.params.iter_mut() {
            match other.params.iter().find(|q| q.name == p.name) {
                Some(q) if q.value.shape() == p.value.shape() => p.value = q.value.clone(),
                Some(q) => {
                    return Err(alloc::format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        p.name,
                        q.value.shape(),
                        p.value.shape()
                    ))
                }
                None => missing.push(p.name.clone()),
            }
        }
        Ok(missing)
    }
}

/// Per-parameter gradients; `None` for parameters the loss never touched.
#[derive(Debug, Clone, Default)]
pub struct Grads(pub Vec<Option<Matrix>>);

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.0.get(id.0).and_then(Option::as_ref)
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.0.iter().flatten().map(Matrix::norm2_squared).sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

/// Geometry of a channels-last depthwise convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    Relu(Var),
    LeakyRelu(Var, f64),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    SegmentSoftmax {
        x: Var,
        segment: Vec<usize>,
    },
    HeadDot {
        x: Var,
        att: Var,
        heads: usize,
    },
    GatAggregate {
        feats: Var,
        alpha: Var,
        src: Vec<usize>,
        dst: Vec<usize>,
        heads: usize,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        shape: ConvShape,
    },
    GroupMean {
        x: Var,
        group: usize,
    },
    Triplet {
        emb: Var,
        triples: Vec<(usize, usize, usize)>,
        margin: f64,
        p: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Option<Vec<f64>>,
        reduction: Reduction,
        probs: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.value(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data[0]
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input, &[])
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Matrix::default(), Op::Param(id), &[])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a + bias` with a 1 x cols bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut out = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!((1, out.cols), b.shape(), "bias shape");
        for r in 0..out.rows {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Elementwise product with a constant (dropout masks, row masks).
    pub fn mul_const(&mut self, a: Var, m: Matrix) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), m.shape(), "mask shape");
        for (o, k) in out.data.iter_mut().zip(&m.data) {
            *o *= k;
        }
        self.push(out, Op::MulConst(a, m), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for o in out.data.iter_mut() {
            *o = o.max(0.0);
        }
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let mut out = self.value(a).clone();
        for o in out.data.iter_mut() {
            if *o < 0.0 {
                *o *= slope;
            }
        }
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::hcat(&mats);
        self.push(out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).gather_rows(idx);
        self.push(out, Op::Gather(a, idx.to_vec()), &[a])
    }

    /// Row-wise layer normalization with a learned 1 x D scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let mut xhat = Matrix::zeros(n, d);
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / math::sqrt(var + eps);
            inv_std[r] = is;
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = xhat.clone();
        for r in 0..n {
            for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(&g.data).zip(&b.data) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).softmax_rows();
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, x: Var, segment: &[usize], segments: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, segment.len(), "segment length");
        let cols = xv.cols;
        let mut max = Matrix::filled(segments, cols, f64::NEG_INFINITY);
        for (r, &s) in segment.iter().enumerate() {
            for c in 0..cols {
                let v = xv.get(r, c);
                if v > max.get(s, c) {
                    max.set(s, c, v);
                }
            }
        }
        let mut out = Matrix::zeros(xv.rows, cols);
        let mut total = Matrix::zeros(segments, cols);
        for (r, &s) in segment.iter().enumerate() {
            for c in 0..cols {
                let e = math::exp(xv.get(r, c) - max.get(s, c));
                out.set(r, c, e);
                total.data[s * cols + c] += e;
            }
        }
        for (r, &s) in segment.iter().enumerate() {
            for c in 0..cols {
                out.data[r * cols + c] /= total.get(s, c);
            }
        }
        self.push(
            out,
            Op::SegmentSoftmax {
                x,
                segment: segment.to_vec(),
            },
            &[x],
        )
    }

    /// Per-head dot products: `out[n, h] = x[n, h-th block] . att[h]`.
    pub fn head_dot(&mut self, x: Var, att: Var, heads: usize) -> Var {
        let xv = self.value(x);
        let av = self.value(att);
        let width = av.cols;
        assert_eq!((heads, heads * width), (av.rows, xv.cols), "head_dot shape");
        let mut out = Matrix::zeros(xv.rows, heads);
        for n in 0..xv.rows {
            let row = xv.row(n);
            for h in 0..heads {
                let s: f64 = row[h * width..(h + 1) * width]
                    .iter()
                    .zip(av.row(h))
                    .map(|(a, b)| a * b)
                    .sum();
                out.set(n, h, s);
            }
        }
        self.push(out, Op::HeadDot { x, att, heads }, &[x, att])
    }

    /// `out[dst_e, h-block] += alpha[e, h] * feats[src_e, h-block]`.
    pub fn gat_aggregate(
        &mut self,
        feats: Var,
        alpha: Var,
        src: &[usize],
        dst: &[usize],
        nodes: usize,
        heads: usize,
    ) -> Var {
        let fv = self.value(feats);
        let av = self.value(alpha);
        assert_eq!(av.shape(), (src.len(), heads), "alpha shape");
        let width = fv.cols / heads;
        let mut out = Matrix::zeros(nodes, fv.cols);
        for (e, (&s, &d)) in src.iter().zip(dst).enumerate() {
            for h in 0..heads {
                let a = av.get(e, h);
                let from = &fv.row(s)[h * width..(h + 1) * width];
                let to = &mut out.row_mut(d)[h * width..(h + 1) * width];
                for (t, f) in to.iter_mut().zip(from) {
                    *t += a * f;
                }
            }
        }
        self.push(
            out,
            Op::GatAggregate {
                feats,
                alpha,
                src: src.to_vec(),
                dst: dst.to_vec(),
                heads,
            },
            &[feats, alpha],
        )
    }

    /// Depthwise convolution over a channels-last `(B*H*W) x C` map with a
    /// `(K*K) x C` kernel. No bias.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, shape: ConvShape) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let c = shape.channels;
        assert_eq!(xv.shape(), (shape.batch * shape.height * shape.width, c), "conv input");
        assert_eq!(wv.shape(), (shape.kernel * shape.kernel, c), "conv kernel");
        let (oh, ow) = (shape.out_height(), shape.out_width());
        let mut out = Matrix::zeros(shape.batch * oh * ow, c);
        for_each_tap(shape, |o, i, tap| {
            let src = xv.row(i);
            let k = wv.row(tap);
            for ((dst, s), kv) in out.row_mut(o).iter_mut().zip(src).zip(k) {
                *dst += s * kv;
            }
        });
        self.push(out, Op::DepthwiseConv { x, w, shape }, &[x, w])
    }

    /// Mean over consecutive blocks of `group` rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows % group, 0, "group_mean rows");
        let blocks = xv.rows / group;
        let mut out = Matrix::zeros(blocks, xv.cols);
        let inv = 1.0 / group as f64;
        for r in 0..xv.rows {
            let b = r / group;
            for (o, v) in out.row_mut(b).iter_mut().zip(xv.row(r)) {
                *o += v * inv;
            }
        }
        self.push(out, Op::GroupMean { x, group }, &[x])
    }

    /// Mean triplet margin loss over `(anchor, positive, negative)` rows of
    /// `emb`; 0 for an empty triplet list.
    pub fn triplet_loss(&mut self, emb: Var, triples: &[(usize, usize, usize)], margin: f64, p: f64) -> Var {
        let ev = self.value(emb);
        let mut total = 0.0;
        for &(a, pos, neg) in triples {
            total += triplet_value(ev.row(a), ev.row(pos), ev.row(neg), margin, p);
        }
        let loss = if triples.is_empty() {
            0.0
        } else {
            total / triples.len() as f64
        };
        self.push(
            Matrix::scalar(loss),
            Op::Triplet {
                emb,
                triples: triples.to_vec(),
                margin,
                p,
            },
            &[emb],
        )
    }

    /// Cross-entropy of row-wise softmax against integer labels, optionally
    /// weighted per class. `Mean` divides by the summed sample weights.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: Option<&[f64]>,
        reduction: Reduction,
    ) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, labels.len(), "label count");
        let probs = lv.softmax_rows();
        let mut total = 0.0;
        let mut wsum = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let w = weights.map_or(1.0, |ws| ws[y]);
            let row = lv.row(r);
            total -= w * (row[y] - math::log_sum_exp(row));
            wsum += w;
        }
        let loss = match reduction {
            Reduction::Sum => total,
            Reduction::Mean if wsum > 0.0 => total / wsum,
            Reduction::Mean => 0.0,
        };
        self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.map(<[f64]>::to_vec),
                reduction,
                probs,
            },
            &[logits],
        )
    }

    /// Gradients of the scalar `loss` with respect to all parameters.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Matrix>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => accumulate(&mut pgrads[id.0], g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let mut ga = Matrix::zeros(av.rows, av.cols);
                        gemm(1.0, &g, false, bv, true, 0.0, &mut ga);
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.needs(*b) {
                        let mut gb = Matrix::zeros(bv.rows, bv.cols);
                        gemm(1.0, av, true, &g, false, 0.0, &mut gb);
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.needs(*bias) {
                        let mut gb = Matrix::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads[bias.0], gb);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Scale(a, s) => {
                    let mut g = g;
                    g.scale_assign(*s);
                    accumulate(&mut grads[a.0], g);
                }
                Op::MulConst(a, m) => {
                    let mut g = g;
                    for (o, k) in g.data.iter_mut().zip(&m.data) {
                        *o *= k;
                    }
                    accumulate(&mut grads[a.0], g);
                }
                Op::Relu(a) => {
                    let mut g = g;
                    for (o, y) in g.data.iter_mut().zip(&node.value.data) {
                        if *y <= 0.0 {
                            *o = 0.0;
                        }
                    }
                    accumulate(&mut grads[a.0], g);
                }
                Op::LeakyRelu(a, slope) => {
                    let mut g = g;
                    for (o, x) in g.data.iter_mut().zip(&self.value(*a).data) {
                        if *x < 0.0 {
                            *o *= slope;
                        }
                    }
                    accumulate(&mut grads[a.0], g);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols;
                        if self.needs(*p) {
                            let mut gp = Matrix::zeros(g.rows, w);
                            for r in 0..g.rows {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                            }
                            accumulate(&mut grads[p.0], gp);
                        }
                        off += w;
                    }
                }
                Op::Gather(a, idx) => {
                    let av = self.value(*a);
                    let mut ga = Matrix::zeros(av.rows, av.cols);
                    for (o, &i) in idx.iter().enumerate() {
                        for (t, v) in ga.row_mut(i).iter_mut().zip(g.row(o)) {
                            *t += v;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let (n, d) = xhat.shape();
                    if self.needs(*gamma) || self.needs(*beta) {
                        let mut gg = Matrix::zeros(1, d);
                        let mut gb = Matrix::zeros(1, d);
                        for r in 0..n {
                            for c in 0..d {
                                gg.data[c] += g.get(r, c) * xhat.get(r, c);
                                gb.data[c] += g.get(r, c);
                            }
                        }
                        accumulate(&mut grads[gamma.0], gg);
                        accumulate(&mut grads[beta.0], gb);
                    }
                    if self.needs(*x) {
                        let mut gx = Matrix::zeros(n, d);
                        let df = d as f64;
                        for r in 0..n {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for c in 0..d {
                                let gh = g.get(r, c) * gv.data[c];
                                s1 += gh;
                                s2 += gh * xhat.get(r, c);
                            }
                            for c in 0..d {
                                let gh = g.get(r, c) * gv.data[c];
                                gx.set(r, c, inv_std[r] / df * (df * gh - s1 - xhat.get(r, c) * s2));
                            }
                        }
                        accumulate(&mut grads[x.0], gx);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols {
                            ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SegmentSoftmax { x, segment } => {
                    let y = &node.value;
                    let segments = segment.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dot = Matrix::zeros(segments, y.cols);
                    for (r, &s) in segment.iter().enumerate() {
                        for c in 0..y.cols {
                            dot.data[s * y.cols + c] += g.get(r, c) * y.get(r, c);
                        }
                    }
                    let mut gx = Matrix::zeros(y.rows, y.cols);
                    for (r, &s) in segment.iter().enumerate() {
                        for c in 0..y.cols {
                            gx.set(r, c, y.get(r, c) * (g.get(r, c) - dot.get(s, c)));
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::HeadDot { x, att, heads } => {
                    let xv = self.value(*x);
                    let av = self.value(*att);
                    let width = av.cols;
                    if self.needs(*x) {
                        let mut gx = Matrix::zeros(xv.rows, xv.cols);
                        for n in 0..xv.rows {
                            for h in 0..*heads {
                                let gn = g.get(n, h);
                                for (o, a) in gx.row_mut(n)[h * width..(h + 1) * width].iter_mut().zip(av.row(h)) {
                                    *o += gn * a;
                                }
                            }
                        }
                        accumulate(&mut grads[x.0], gx);
                    }
                    if self.needs(*att) {
                        let mut ga = Matrix::zeros(av.rows, av.cols);
                        for n in 0..xv.rows {
                            for h in 0..*heads {
                                let gn = g.get(n, h);
                                for (o, v) in ga.row_mut(h).iter_mut().zip(&xv.row(n)[h * width..(h + 1) * width]) {
                                    *o += gn * v;
                                }
                            }
                        }
                        accumulate(&mut grads[att.0], ga);
                    }
                }
                Op::GatAggregate {
                    feats,
                    alpha,
                    src,
                    dst,
                    heads,
                } => {
                    let fv = self.value(*feats);
                    let av = self.value(*alpha);
                    let width = fv.cols / heads;
                    if self.needs(*feats) {
                        let mut gf = Matrix::zeros(fv.rows, fv.cols);
                        for (e, (&s, &d)) in src.iter().zip(dst).enumerate() {
                            for h in 0..*heads {
                                let a = av.get(e, h);
                                let from = &g.row(d)[h * width..(h + 1) * width];
                                for (t, v) in gf.row_mut(s)[h * width..(h + 1) * width].iter_mut().zip(from) {
                                    *t += a * v;
                                }
                            }
                        }
                        accumulate(&mut grads[feats.0], gf);
                    }
                    if self.needs(*alpha) {
                        let mut ga = Matrix::zeros(av.rows, av.cols);
                        for (e, (&s, &d)) in src.iter().zip(dst).enumerate() {
                            for h in 0..*heads {
                                let gd = &g.row(d)[h * width..(h + 1) * width];
                                let fs = &fv.row(s)[h * width..(h + 1) * width];
                                ga.set(e, h, gd.iter().zip(fs).map(|(a, b)| a * b).sum());
                            }
                        }
                        accumulate(&mut grads[alpha.0], ga);
                    }
                }
                Op::DepthwiseConv { x, w, shape } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let need_x = self.needs(*x);
                    let need_w = self.needs(*w);
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    let mut gw = Matrix::zeros(wv.rows, wv.cols);
                    for_each_tap(*shape, |o, i, tap| {
                        let go = g.row(o);
                        if need_x {
                            for ((t, gv), kv) in gx.row_mut(i).iter_mut().zip(go).zip(wv.row(tap)) {
                                *t += gv * kv;
                            }
                        }
                        if need_w {
                            for ((t, gv), xv) in gw.row_mut(tap).iter_mut().zip(go).zip(xv.row(i)) {
                                *t += gv * xv;
                            }
                        }
                    });
                    if need_x {
                        accumulate(&mut grads[x.0], gx);
                    }
                    if need_w {
                        accumulate(&mut grads[w.0], gw);
                    }
                }
                Op::GroupMean { x, group } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    let inv = 1.0 / *group as f64;
                    for r in 0..xv.rows {
                        for (t, v) in gx.row_mut(r).iter_mut().zip(g.row(r / group)) {
                            *t = v * inv;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Triplet {
                    emb,
                    triples,
                    margin,
                    p,
                } => {
                    let ev = self.value(*emb);
                    let mut ge = Matrix::zeros(ev.rows, ev.cols);
                    let scale = g.data[0] / triples.len().max(1) as f64;
                    for &(a, pos, neg) in triples {
                        let (ra, rp, rn) = (ev.row(a), ev.row(pos), ev.row(neg));
                        if triplet_value(ra, rp, rn, *margin, *p) <= 0.0 {
                            continue;
                        }
                        let dp = pnorm_grad(ra, rp, *p);
                        let dn = pnorm_grad(ra, rn, *p);
                        for c in 0..ev.cols {
                            ge.data[a * ev.cols + c] += scale * (dp[c] - dn[c]);
                            ge.data[pos * ev.cols + c] -= scale * dp[c];
                            ge.data[neg * ev.cols + c] += scale * dn[c];
                        }
                    }
                    accumulate(&mut grads[emb.0], ge);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    weights,
                    reduction,
                    probs,
                } => {
                    let mut gl = probs.clone();
                    let mut wsum = 0.0;
                    for (r, &y) in labels.iter().enumerate() {
                        let w = weights.as_ref().map_or(1.0, |ws| ws[y]);
                        wsum += w;
                        gl.data[r * gl.cols + y] -= 1.0;
                        for v in gl.row_mut(r) {
                            *v *= w;
                        }
                    }
                    let norm = match reduction {
                        Reduction::Sum => 1.0,
                        Reduction::Mean if wsum > 0.0 => 1.0 / wsum,
                        Reduction::Mean => 0.0,
                    };
                    gl.scale_assign(g.data[0] * norm);
                    accumulate(&mut grads[logits.0], gl);
                }
            }
        }
        Grads(pgrads)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Calls `f(out_row, in_row, tap)` for every in-bounds kernel tap.
fn for_each_tap(s: ConvShape, mut f: impl FnMut(usize, usize, usize)) {
    let (oh, ow) = (s.out_height(), s.out_width());
    for b in 0..s.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (b * oh + oy) * ow + ox;
                for ky in 0..s.kernel {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.height as isize {
                        continue;
                    }
                    for kx in 0..s.kernel {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix < 0 || ix >= s.width as isize {
                            continue;
                        }
                        let i = (b * s.height + iy as usize) * s.width + ix as usize;
                        f(o, i, ky * s.kernel + kx);
                    }
                }
            }
        }
    }
}

/// `||x - y||_p`.
pub fn pnorm_dist(x: &[f64], y: &[f64], p: f64) -> f64 {
    if p == 2.0 {
        return math::sqrt(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum());
    }
    if p == 1.0 {
        return x.iter().zip(y).map(|(a, b)| math::abs(a - b)).sum();
    }
    let s: f64 = x.iter().zip(y).map(|(a, b)| math::powf(math::abs(a - b), p)).sum();
    math::powf(s, 1.0 / p)
}

/// `max(||a - p|| - ||a - n|| + margin, 0)`.
pub fn triplet_value(a: &[f64], pos: &[f64], neg: &[f64], margin: f64, p: f64) -> f64 {
    (pnorm_dist(a, pos, p) - pnorm_dist(a, neg, p) + margin).max(0.0)
}

/// d/dx ||x - y||_p; zero at x == y.
fn pnorm_grad(x: &[f64], y: &[f64], p: f64) -> Vec<f64> {
    let d = pnorm_dist(x, y, p);
    if d == 0.0 {
        return vec![0.0; x.len()];
    }
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let diff = a - b;
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            sign * math::powf(math::abs(diff) / d, p - 1.0)
        })
        .collect()
}
