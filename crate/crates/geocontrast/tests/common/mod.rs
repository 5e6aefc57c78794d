#![allow(dead_code)]

use std::path::{Path, PathBuf};

use geocontrast::config::ExperimentConfig;
use geocontrast::synth;
use geocontrast_core::labels::Dataset;
use geocontrast_core::stage2::LinkWeighting;

/// Synthetic FUNSD-layout corpus under `dir/data`.
pub fn funsd_root(dir: &Path, train: usize, test: usize) -> PathBuf {
    let root = dir.join("data");
    synth::write_funsd(&root, train, test, 42).unwrap();
    root
}

/// A config small enough for unit-speed training runs.
pub fn tiny_config(root: &Path, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_dataset(Dataset::Funsd);
    cfg.data_root = root.to_path_buf();
    cfg.out_dir = out.to_path_buf();
    cfg.val_fraction = 0.25;
    cfg.stage1.epochs = 4;
    cfg.stage2.epochs = 4;
    cfg.stage2.hidden = 6;
    cfg.stage2.node_head_hidden = vec![8, 6, 5, 4];
    cfg.stage2.edge_head_hidden = vec![8, 6, 5, 4];
    cfg.stage2.link_weighting = LinkWeighting::InverseFrequency;
    cfg.stage2.visual.crop_size = 16;
    cfg.stage2.visual.embed_dim = 4;
    cfg.stage2.visual.channels = vec![2, 3, 3, 2, 3];
    cfg.score_train_each_epoch = true;
    cfg.validate().unwrap();
    cfg
}

pub fn read_jsonl(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Every numeric field of two metric logs agrees within `tol`.
pub fn assert_logs_close(a: &[serde_json::Value], b: &[serde_json::Value], tol: f64) {
    assert_eq!(a.len(), b.len(), "log lengths differ");
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_object().unwrap(), y.as_object().unwrap());
        assert_eq!(x.keys().collect::<Vec<_>>(), y.keys().collect::<Vec<_>>());
        for (k, v) in x {
            match (v.as_f64(), y[k].as_f64()) {
                (Some(p), Some(q)) => assert!((p - q).abs() <= tol, "{k}: {p} vs {q}"),
                _ => assert_eq!(v, &y[k], "{k}"),
            }
        }
    }
}
