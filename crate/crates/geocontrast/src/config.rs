//! Experiment configuration, stored as TOML next to every output.

use std::fs;
use std::path::{Path, PathBuf};

use geocontrast_core::annotate::LinkTask;
use geocontrast_core::graph::GraphOptions;
use geocontrast_core::labels::Dataset;
use geocontrast_core::stage1::StageOneConfig;
use geocontrast_core::stage2::StageTwoConfig;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable that overrides `data_root`.
pub const DATA_ROOT_ENV: &str = "GEOCONTRAST_DATA_ROOT";

/// Every knob of a run. Unset fields take the defaults below, and the
/// resolved config is written out in full so nothing stays implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub dataset: Dataset,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    /// Share of the official training documents held out for validation.
    pub val_fraction: f64,
    pub split_seed: u64,
    /// Share of documents used as test split when a dataset ships none.
    pub test_fraction: f64,
    /// Use at most this many documents per split (0 = all).
    pub limit_docs: usize,
    pub workers: usize,
    /// Write a resumable checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Score node F1 on the training split after every Stage-II epoch.
    pub score_train_each_epoch: bool,
    pub graph: GraphOptions,
    /// Stage-I settings; `stage1.features` is the geometric-feature ablation
    /// mask and also gates the polar block of the Stage-II edge head.
    pub stage1: StageOneConfig,
    /// Stage-II settings; `stage2.modality` is the modality ablation switch.
    pub stage2: StageTwoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            dataset: Dataset::Funsd,
            data_root: PathBuf::from("data/funsd"),
            out_dir: PathBuf::from("runs/funsd"),
            val_fraction: 0.1,
            split_seed: 42,
            test_fraction: 0.2,
            limit_docs: 0,
            workers: 1,
            checkpoint_every: 1,
            score_train_each_epoch: false,
            graph: GraphOptions::default(),
            stage1: StageOneConfig::default(),
            stage2: StageTwoConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(PipelineError::io(path))?;
        Self::from_toml(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
        }
        fs::write(path, self.to_toml()).map_err(PipelineError::io(path))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(PipelineError::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(0.0..1.0).contains(&self.test_fraction) {
            return Err(PipelineError::Config(
                "val_fraction and test_fraction must lie in [0, 1)".into(),
            ));
        }
        if self.graph.polar_bins != self.stage2.polar_bins {
            return Err(PipelineError::Config(format!(
                "graph.polar_bins ({}) and stage2.polar_bins ({}) differ",
                self.graph.polar_bins, self.stage2.polar_bins
            )));
        }
        if self.stage2.num_classes != self.dataset.labels().len() {
            return Err(PipelineError::Config(format!(
                "stage2.num_classes is {} but {} has {} labels",
                self.stage2.num_classes,
                self.dataset.name(),
                self.dataset.labels().len()
            )));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        Ok(())
    }

    /// Defaults for `dataset`, with the class count adjusted.
    pub fn for_dataset(dataset: Dataset) -> Self {
        let mut cfg = Self {
            dataset,
            ..Default::default()
        };
        cfg.stage2.num_classes = dataset.labels().len();
        if dataset == Dataset::Rvlcdip {
            cfg.data_root = PathBuf::from("data/rvlcdip-invoices");
            cfg.out_dir = PathBuf::from("runs/rvlcdip");
        }
        cfg
    }

    pub fn link_task(&self) -> LinkTask {
        match self.dataset {
            Dataset::Funsd => LinkTask::KeyValue,
            Dataset::Rvlcdip => LinkTask::Table,
        }
    }

    /// `data_root`, unless the override variable is set.
    pub fn resolved_data_root(&self) -> PathBuf {
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.data_root.clone(),
        }
    }
}
