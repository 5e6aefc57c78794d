//! Box geometry and the fixed node/edge feature vectors.
//!
//! Node vectors are 9-d: normalized box corners, normalized area and the
//! quarter-section code of each corner. Edge vectors are `2 + bins + 7`
//! wide (15 with the default six polar sectors): angle, center distance,
//! a one-hot polar sector and a one-hot relative-position token.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Default number of angular sectors in the polar one-hot.
pub const DEFAULT_POLAR_BINS: usize = 6;
/// Width of the node feature vector.
pub const NODE_GEOM_DIM: usize = 9;
/// Number of relative-position tokens.
pub const RELPOS_TOKENS: usize = 7;

/// Width of the edge feature vector for a given polar sector count.
pub const fn edge_geom_dim(polar_bins: usize) -> usize {
    2 + polar_bins + RELPOS_TOKENS
}

/// Page extent in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

impl ImageSize {
    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height }
    }

    /// The larger side; all coordinates are divided by it.
    pub fn scale(&self) -> f64 {
        self.width.max(self.height)
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }
}

/// Axis-aligned rectangle in the image frame (y grows downward).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    pub const fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self { xmin, ymin, xmax, ymax }
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax)]
    }

    /// Checks the box invariants, naming `node` in the error.
    pub fn validate(&self, node: usize, image: ImageSize) -> Result<()> {
        let coords = [self.xmin, self.ymin, self.xmax, self.ymax];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidBox {
                node,
                reason: "non-finite coordinate",
            });
        }
        if self.xmin >= self.xmax || self.ymin >= self.ymax {
            return Err(Error::InvalidBox {
                node,
                reason: "zero width or height",
            });
        }
        if self.xmin < 0.0 || self.ymin < 0.0 {
            return Err(Error::InvalidBox {
                node,
                reason: "negative coordinate",
            });
        }
        if self.xmax > image.width || self.ymax > image.height {
            return Err(Error::InvalidBox {
                node,
                reason: "outside the image extent",
            });
        }
        Ok(())
    }

    /// Clamps to the image and widens empty boxes to at least one pixel.
    /// Returns the repaired box and whether anything changed.
    pub fn clamp_to(&self, image: ImageSize) -> (BBox, bool) {
        let mut b = BBox::new(
            self.xmin.min(self.xmax).clamp(0.0, image.width),
            self.ymin.min(self.ymax).clamp(0.0, image.height),
            self.xmax.max(self.xmin).clamp(0.0, image.width),
            self.ymax.max(self.ymin).clamp(0.0, image.height),
        );
        if b.xmax - b.xmin < 1.0 {
            if b.xmin + 1.0 <= image.width {
                b.xmax = b.xmin + 1.0;
            } else {
                b.xmin = (image.width - 1.0).max(0.0);
                b.xmax = image.width;
            }
        }
        if b.ymax - b.ymin < 1.0 {
            if b.ymin + 1.0 <= image.height {
                b.ymax = b.ymin + 1.0;
            } else {
                b.ymin = (image.height - 1.0).max(0.0);
                b.ymax = image.height;
            }
        }
        let changed = b != *self;
        (b, changed)
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox::new(
            self.xmin.min(other.xmin),
            self.ymin.min(other.ymin),
            self.xmax.max(other.xmax),
            self.ymax.max(other.ymax),
        )
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.xmax.min(other.xmax) - self.xmin.max(other.xmin);
        let h = self.ymax.min(other.ymax) - self.ymin.max(other.ymin);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Open-interval overlap of the x-ranges.
    pub fn overlaps_x(&self, other: &BBox) -> bool {
        self.xmin < other.xmax && other.xmin < self.xmax
    }

    /// Open-interval overlap of the y-ranges.
    pub fn overlaps_y(&self, other: &BBox) -> bool {
        self.ymin < other.ymax && other.ymin < self.ymax
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox::new(self.xmin * s, self.ymin * s, self.xmax * s, self.ymax * s)
    }
}

/// Quarter-section of a normalized coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegionCode {
    S11,
    S12,
    S21,
    S22,
}

impl RegionCode {
    /// The symbolic two-digit code.
    pub fn code(self) -> u8 {
        match self {
            RegionCode::S11 => 11,
            RegionCode::S12 => 12,
            RegionCode::S21 => 21,
            RegionCode::S22 => 22,
        }
    }

    /// Value stored in the node feature vector: evenly spaced in [0, 1].
    pub fn stored(self) -> f64 {
        match self {
            RegionCode::S11 => 0.0,
            RegionCode::S12 => 1.0 / 3.0,
            RegionCode::S21 => 2.0 / 3.0,
            RegionCode::S22 => 1.0,
        }
    }

    pub fn from_stored(v: f64) -> Option<Self> {
        [RegionCode::S11, RegionCode::S12, RegionCode::S21, RegionCode::S22]
            .into_iter()
            .find(|c| c.stored() == v)
    }
}

/// Quarter-section containing `coord`; bins are lower-inclusive and 1.0
/// belongs to the last one.
pub fn regional_encoding(coord: f64) -> Result<RegionCode> {
    if !(0.0..=1.0).contains(&coord) {
        return Err(Error::CoordinateOutOfRange(coord));
    }
    Ok(if coord < 0.25 {
        RegionCode::S11
    } else if coord < 0.5 {
        RegionCode::S12
    } else if coord < 0.75 {
        RegionCode::S21
    } else {
        RegionCode::S22
    })
}

/// `(nxmin, nymin, nxmax, nymax, area, r_xmin, r_ymin, r_xmax, r_ymax)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeGeom(pub [f64; NODE_GEOM_DIM]);

impl NodeGeom {
    pub fn coords(&self) -> [f64; 4] {
        [self.0[0], self.0[1], self.0[2], self.0[3]]
    }

    pub fn area(&self) -> f64 {
        self.0[4]
    }

    pub fn regions(&self) -> [f64; 4] {
        [self.0[5], self.0[6], self.0[7], self.0[8]]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Normalizes a pixel box against the page; `node` is used in errors.
pub fn normalize_box(bbox: &BBox, image: ImageSize, node: usize) -> Result<NodeGeom> {
    bbox.validate(node, image)?;
    let s = image.scale();
    let coords = [bbox.xmin / s, bbox.ymin / s, bbox.xmax / s, bbox.ymax / s];
    let mut v = [0.0; NODE_GEOM_DIM];
    v[..4].copy_from_slice(&coords);
    v[4] = bbox.area() / image.area();
    for (slot, &c) in v[5..].iter_mut().zip(coords.iter()) {
        *slot = regional_encoding(c)?.stored();
    }
    Ok(NodeGeom(v))
}

/// Relative-position token of `dst` with respect to `src`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelPos {
    Left,
    Right,
    Top,
    Bottom,
    VertIntersect,
    HorIntersect,
    SqrIntersect,
}

impl RelPos {
    pub const ALL: [RelPos; RELPOS_TOKENS] = [
        RelPos::Left,
        RelPos::Right,
        RelPos::Top,
        RelPos::Bottom,
        RelPos::VertIntersect,
        RelPos::HorIntersect,
        RelPos::SqrIntersect,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RelPos::Left => "left",
            RelPos::Right => "right",
            RelPos::Top => "top",
            RelPos::Bottom => "bottom",
            RelPos::VertIntersect => "vert-intersect",
            RelPos::HorIntersect => "hor-intersect",
            RelPos::SqrIntersect => "sqr-intersect",
        }
    }
}

/// Intersections take precedence; otherwise the dominant axis of the
/// center displacement decides (ties go to the horizontal axis).
pub fn relative_position(src: &BBox, dst: &BBox) -> RelPos {
    let ox = src.overlaps_x(dst);
    let oy = src.overlaps_y(dst);
    match (ox, oy) {
        (true, true) => RelPos::SqrIntersect,
        (true, false) => RelPos::VertIntersect,
        (false, true) => RelPos::HorIntersect,
        (false, false) => {
            let [sx, sy] = src.center();
            let [dx, dy] = dst.center();
            let (ddx, ddy) = (dx - sx, dy - sy);
            if math::abs(ddx) >= math::abs(ddy) {
                if ddx > 0.0 {
                    RelPos::Right
                } else {
                    RelPos::Left
                }
            } else if ddy > 0.0 {
                RelPos::Bottom
            } else {
                RelPos::Top
            }
        }
    }
}

/// Angular sector of `theta` in `[-pi, pi]`; `pi` folds into the last sector.
pub fn polar_sector(theta: f64, bins: usize) -> usize {
    let width = 2.0 * PI / bins as f64;
    let idx = math::floor((theta + PI) / width);
    if idx < 0.0 {
        0
    } else {
        (idx as usize).min(bins - 1)
    }
}

/// `(theta, dist, polar one-hot, relative-position one-hot)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeGeom(pub Vec<f64>);

impl EdgeGeom {
    pub fn theta(&self) -> f64 {
        self.0[0]
    }

    pub fn dist(&self) -> f64 {
        self.0[1]
    }

    pub fn polar_bins(&self) -> usize {
        self.0.len() - 2 - RELPOS_TOKENS
    }

    pub fn polar(&self) -> &[f64] {
        &self.0[2..2 + self.polar_bins()]
    }

    pub fn relpos(&self) -> &[f64] {
        &self.0[2 + self.polar_bins()..]
    }

    pub fn polar_index(&self) -> usize {
        one_hot_index(self.polar())
    }

    pub fn relpos_token(&self) -> RelPos {
        RelPos::ALL[one_hot_index(self.relpos())]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn one_hot_index(xs: &[f64]) -> usize {
    xs.iter().position(|&v| v == 1.0).unwrap_or(0)
}

/// Features of the directed edge `src -> dst`.
pub fn edge_geometry(src: &BBox, dst: &BBox, image: ImageSize, polar_bins: usize) -> EdgeGeom {
    let s = image.scale();
    let [sx, sy] = src.center();
    let [tx, ty] = dst.center();
    let dx = (tx - sx) / s;
    let dy = (ty - sy) / s;
    let (theta, dist) = if dx == 0.0 && dy == 0.0 {
        (0.0, 0.0)
    } else {
        (math::atan2(dy, dx), math::sqrt(dx * dx + dy * dy).min(1.0))
    };
    let mut v = vec![0.0; edge_geom_dim(polar_bins)];
    v[0] = theta;
    v[1] = dist;
    v[2 + polar_sector(theta, polar_bins)] = 1.0;
    v[2 + polar_bins + relative_position(src, dst).index()] = 1.0;
    EdgeGeom(v)
}
