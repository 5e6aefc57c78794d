//! Entity label vocabularies of the supported datasets.

use alloc::string::ToString;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FUNSD_LABELS: [&str; 4] = ["question", "answer", "header", "other"];
pub const RVLCDIP_LABELS: [&str; 6] = ["invoice info", "other", "positions", "receiver", "supplier", "total"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Funsd,
    Rvlcdip,
}

impl Dataset {
    pub fn labels(self) -> LabelSet {
        match self {
            Dataset::Funsd => LabelSet(&FUNSD_LABELS),
            Dataset::Rvlcdip => LabelSet(&RVLCDIP_LABELS),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dataset::Funsd => "funsd",
            Dataset::Rvlcdip => "rvlcdip",
        }
    }
}

/// Ordered class names; a label is stored as its index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelSet(pub &'static [&'static str]);

impl LabelSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn name(&self, idx: usize) -> &'static str {
        self.0[idx]
    }

    /// Case-insensitive lookup; `_` and `-` match a space.
    pub fn index_of(&self, name: &str) -> Result<usize> {
        let norm = |c: char| match c {
            '_' | '-' => ' ',
            c => c.to_ascii_lowercase(),
        };
        self.0
            .iter()
            .position(|cand| cand.len() == name.len() && cand.chars().zip(name.chars()).all(|(a, b)| a == norm(b)))
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }
}
