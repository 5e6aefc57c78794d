//! Feature and modality switches used by the ablation runs.
//!
//! A disabled feature is zeroed in place so every downstream width stays
//! the same.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureMask {
    pub distance: bool,
    pub angle: bool,
    pub polar: bool,
    pub relative_position: bool,
    pub bounding_box: bool,
    pub area: bool,
    pub regional: bool,
}

impl Default for FeatureMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl FeatureMask {
    pub const ALL: FeatureMask = FeatureMask {
        distance: true,
        angle: true,
        polar: true,
        relative_position: true,
        bounding_box: true,
        area: true,
        regional: true,
    };

    /// Edge geometry only.
    pub const EDGES_ONLY: FeatureMask = FeatureMask {
        bounding_box: false,
        area: false,
        regional: false,
        ..FeatureMask::ALL
    };

    /// Node geometry only.
    pub const NODES_ONLY: FeatureMask = FeatureMask {
        distance: false,
        angle: false,
        polar: false,
        relative_position: false,
        ..FeatureMask::ALL
    };

    /// The eight rows of the per-feature ablation: everything on, then
    /// each feature switched off in turn.
    pub fn leave_one_out() -> [(&'static str, FeatureMask); 8] {
        let all = FeatureMask::ALL;
        [
            ("all", all),
            ("no-distance", FeatureMask { distance: false, ..all }),
            ("no-angle", FeatureMask { angle: false, ..all }),
            ("no-polar", FeatureMask { polar: false, ..all }),
            (
                "no-relative-position",
                FeatureMask {
                    relative_position: false,
                    ..all
                },
            ),
            (
                "no-bounding-box",
                FeatureMask {
                    bounding_box: false,
                    ..all
                },
            ),
            ("no-area", FeatureMask { area: false, ..all }),
            ("no-regional", FeatureMask { regional: false, ..all }),
        ]
    }

    /// Zeroes disabled entries of a 9-d node vector.
    pub fn apply_node(&self, v: &mut [f64]) {
        if !self.bounding_box {
            v[..4].fill(0.0);
        }
        if !self.area {
            v[4] = 0.0;
        }
        if !self.regional {
            v[5..9].fill(0.0);
        }
    }

    /// Zeroes disabled entries of an edge vector with `polar_bins` sectors.
    pub fn apply_edge(&self, v: &mut [f64], polar_bins: usize) {
        if !self.angle {
            v[0] = 0.0;
        }
        if !self.distance {
            v[1] = 0.0;
        }
        if !self.polar {
            v[2..2 + polar_bins].fill(0.0);
        }
        if !self.relative_position {
            v[2 + polar_bins..].fill(0.0);
        }
    }
}

/// Which node-input blocks reach the attention network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModalityMask {
    pub geometric: bool,
    pub visual: bool,
}

impl Default for ModalityMask {
    fn default() -> Self {
        Self {
            geometric: true,
            visual: true,
        }
    }
}

impl ModalityMask {
    /// Rows of the modality ablation, in report order.
    pub fn rows() -> [(&'static str, ModalityMask); 3] {
        [
            (
                "visual-only",
                ModalityMask {
                    geometric: false,
                    visual: true,
                },
            ),
            (
                "geometric-only",
                ModalityMask {
                    geometric: true,
                    visual: false,
                },
            ),
            ("combined", ModalityMask::default()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_zero_the_right_slices() {
        let mut e = [1.0; 15];
        FeatureMask {
            polar: false,
            ..FeatureMask::ALL
        }
        .apply_edge(&mut e, 6);
        assert_eq!(&e[2..8], &[0.0; 6]);
        assert_eq!(e[8], 1.0);
        let mut n = [1.0; 9];
        FeatureMask::EDGES_ONLY.apply_node(&mut n);
        assert_eq!(n, [0.0; 9]);
    }
}
