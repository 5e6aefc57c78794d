//! Per-node visual embeddings.
//!
//! Every box is cropped from the grayscale page, resized to a fixed square
//! and passed through a MobileNet-style encoder (a strided stem convolution
//! followed by depthwise-separable blocks), average-pooled and projected to
//! `embed_dim`. The encoder parameters live in the caller's [`ParamStore`]
//! so they can be fine-tuned together with the attention network.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvShape, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{he_uniform, Linear};
use crate::tensor::Matrix;

/// Grayscale page with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "raster size");
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Self::new(width, height, vec![v; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear resample of `bbox` to `size x size`, or `None` when the box
    /// is thinner than one pixel after clamping to the page.
    pub fn crop_resize(&self, bbox: &BBox, size: usize) -> Option<Vec<f64>> {
        let (w, h) = (self.width as f64, self.height as f64);
        let x0 = bbox.xmin.clamp(0.0, w);
        let x1 = bbox.xmax.clamp(0.0, w);
        let y0 = bbox.ymin.clamp(0.0, h);
        let y1 = bbox.ymax.clamp(0.0, h);
        if x1 - x0 < 1.0 || y1 - y0 < 1.0 {
            return None;
        }
        let sx = (x1 - x0) / size as f64;
        let sy = (y1 - y0) / size as f64;
        let mut out = Vec::with_capacity(size * size);
        for j in 0..size {
            let fy = (y0 + (j as f64 + 0.5) * sy - 0.5).clamp(0.0, h - 1.0);
            let iy = fy as usize;
            let ty = fy - iy as f64;
            let iy1 = (iy + 1).min(self.height - 1);
            for i in 0..size {
                let fx = (x0 + (i as f64 + 0.5) * sx - 0.5).clamp(0.0, w - 1.0);
                let ix = fx as usize;
                let tx = fx - ix as f64;
                let ix1 = (ix + 1).min(self.width - 1);
                let top = self.get(ix, iy) as f64 * (1.0 - tx) + self.get(ix1, iy) as f64 * tx;
                let bot = self.get(ix, iy1) as f64 * (1.0 - tx) + self.get(ix1, iy1) as f64 * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
        Some(out)
    }
}

pub const DEFAULT_CROP_SIZE: usize = 64;
/// 1465 attention inputs minus the 17-d geometric embedding.
pub const DEFAULT_VISUAL_DIM: usize = 1448;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisualEncoderConfig {
    /// Side of the square crop; must be a multiple of 16.
    pub crop_size: usize,
    pub embed_dim: usize,
    /// Identifier of the initial weights, recorded in checkpoints.
    pub pretrained_weights: String,
    pub trainable: bool,
    /// Stem width followed by the output width of each separable block.
    pub channels: Vec<usize>,
}

impl Default for VisualEncoderConfig {
    fn default() -> Self {
        Self {
            crop_size: DEFAULT_CROP_SIZE,
            embed_dim: DEFAULT_VISUAL_DIM,
            pretrained_weights: String::from("random-init"),
            trainable: true,
            channels: vec![16, 32, 64, 128, 256],
        }
    }
}

impl VisualEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "crop_size must be a positive multiple of 16, got {}",
                self.crop_size
            )));
        }
        if self.channels.len() != 5 || self.channels.contains(&0) {
            return Err(Error::Config(
                "visual encoder needs five positive channel widths".into(),
            ));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeparableBlock {
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub pointwise: Linear,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualEncoder {
    pub config: VisualEncoderConfig,
    pub stem: Linear,
    pub blocks: Vec<SeparableBlock>,
    pub projection: Linear,
}

/// Constant per-document input: stem patches of every crop and which
/// boxes produced a usable crop.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualInput {
    pub patches: Matrix,
    pub valid: Vec<bool>,
}

impl VisualInput {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

const STRIDES: [usize; 4] = [1, 2, 2, 2];

impl VisualEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: VisualEncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let ch = &config.channels;
        let stem = Linear::new(store, &format!("{name}.stem"), 9, ch[0], true, rng);
        let blocks = (0..4)
            .map(|i| {
                let (cin, cout) = (ch[i], ch[i + 1]);
                SeparableBlock {
                    depthwise: store.add(format!("{name}.block{i}.dw.weight"), he_uniform(9, cin, 9, rng)),
                    depthwise_bias: store.add(format!("{name}.block{i}.dw.bias"), Matrix::zeros(1, cin)),
                    pointwise: Linear::new(store, &format!("{name}.block{i}.pw"), cin, cout, true, rng),
                    stride: STRIDES[i],
                }
            })
            .collect();
        let projection = Linear::new(store, &format!("{name}.projection"), ch[4], config.embed_dim, true, rng);
        Ok(Self {
            config,
            stem,
            blocks,
            projection,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Crops every box and unrolls the 3x3 stride-2 stem patches.
    pub fn prepare(&self, raster: &Raster, boxes: &[BBox]) -> VisualInput {
        let s = self.config.crop_size;
        let half = s / 2;
        let mut patches = Matrix::zeros(boxes.len() * half * half, 9);
        let mut valid = Vec::with_capacity(boxes.len());
        for (b, bbox) in boxes.iter().enumerate() {
            let Some(crop) = raster.crop_resize(bbox, s) else {
                log::warn!("box {b} is thinner than one pixel; visual features set to zero");
                valid.push(false);
                continue;
            };
            valid.push(true);
            for oy in 0..half {
                for ox in 0..half {
                    let row = patches.row_mut((b * half + oy) * half + ox);
                    for ky in 0..3 {
                        let iy = (2 * oy + ky) as isize - 1;
                        for kx in 0..3 {
                            let ix = (2 * ox + kx) as isize - 1;
                            if iy >= 0 && ix >= 0 && (iy as usize) < s && (ix as usize) < s {
                                row[ky * 3 + kx] = crop[iy as usize * s + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        VisualInput { patches, valid }
    }

    /// `N x embed_dim` embeddings; rows of unusable crops are zero.
    pub fn forward(&self, tape: &mut Tape, input: &VisualInput) -> Var {
        let n = input.len();
        let mut side = self.config.crop_size / 2;
        let x = tape.input(input.patches.clone());
        let x = self.stem.forward(tape, x);
        let mut x = tape.relu(x);
        for (i, block) in self.blocks.iter().enumerate() {
            let shape = ConvShape {
                batch: n,
                height: side,
                width: side,
                channels: self.config.channels[i],
                kernel: 3,
                stride: block.stride,
                pad: 1,
            };
            let w = tape.param(block.depthwise);
            let y = tape.depthwise_conv(x, w, shape);
            let bias = tape.param(block.depthwise_bias);
            let y = tape.add_row(y, bias);
            let y = tape.relu(y);
            let y = block.pointwise.forward(tape, y);
            x = tape.relu(y);
            side = shape.out_height();
        }
        let pooled = tape.group_mean(x, side * side);
        let out = self.projection.forward(tape, pooled);
        if input.valid.iter().all(|&v| v) {
            out
        } else {
            let mut mask = Matrix::zeros(n, self.config.embed_dim);
            for (r, &v) in input.valid.iter().enumerate() {
                if v {
                    mask.row_mut(r).fill(1.0);
                }
            }
            tape.mul_const(out, mask)
        }
    }
}

/// Inference-mode visual embeddings of `boxes`, `N x embed_dim`.
pub fn node_visual_features(store: &ParamStore, encoder: &VisualEncoder, raster: &Raster, boxes: &[BBox]) -> Matrix {
    let input = encoder.prepare(raster, boxes);
    let mut tape = Tape::new(store);
    let out = encoder.forward(&mut tape, &input);
    tape.value(out).clone()
}
