//! Layers built on the tape.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::math;
use crate::tensor::Matrix;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let bound = 1.0 / math::sqrt(fan_in.max(1) as f64);
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// He initialization: uniform in `[-sqrt(6/fan_in), sqrt(6/fan_in)]`,
/// which keeps activation variance roughly constant through ReLU stacks.
pub fn he_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = fan_in_uniform(rows, cols, fan_in, rng);
    m.scale_assign(math::sqrt(6.0));
    m
}

/// `y = x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), he_uniform(input, output, input, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Matrix::zeros(1, output)));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, width, 1.0)),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, width)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Affine layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every width from input to output.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        self.forward_from(tape, x, 0)
    }

    /// Runs layers `start..`; the input is expected to already be the
    /// pre-activation output of layer `start - 1` when `start > 0`.
    pub fn forward_from(&self, tape: &mut Tape, mut x: Var, start: usize) -> Var {
        if start > 0 {
            x = tape.relu(x);
        }
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate().skip(start) {
            x = l.forward(tape, x);
            if i < last {
                x = tape.relu(x);
            }
        }
        x
    }

    pub fn input(&self) -> usize {
        self.layers[0].input
    }

    pub fn output(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.layers.iter().map(|l| l.input).collect();
        w.push(self.output());
        w
    }
}

/// Labels every parameter with a dotted prefix, for error messages.
pub fn describe(store: &ParamStore) -> Vec<String> {
    store
        .iter()
        .map(|(_, p)| format!("{} {:?}", p.name, p.value.shape()))
        .collect()
}
