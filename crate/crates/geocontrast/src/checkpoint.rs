//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic, a little-endian `u32` format version, a
//! `u64` metadata length, the JSON metadata, then every tensor as raw
//! little-endian `f64` in the order listed by the metadata. The metadata
//! carries the experiment config, the trainer state with its tensors
//! emptied, and provenance (Stage-I checkpoint hash, visual weights id).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use geocontrast_core::stage1::StageOneTrainer;
use geocontrast_core::stage2::{StageTwoModel, StageTwoTrainer};
use geocontrast_core::Matrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{PipelineError, Result};

pub const MAGIC: &[u8; 8] = b"GEOCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Trainer state that can be split into JSON plus raw tensors.
pub trait Checkpointable: Serialize + DeserializeOwned {
    const KIND: &'static str;

    /// Every tensor, in a stable order, with a unique name.
    fn tensors(&mut self) -> Vec<(String, &mut Matrix)>;

    fn epoch(&self) -> usize;
}

impl Checkpointable for StageOneTrainer {
    const KIND: &'static str = "stage1";

    fn tensors(&mut self) -> Vec<(String, &mut Matrix)> {
        let names: Vec<String> = self.encoder.params.iter().map(|(_, p)| p.name.clone()).collect();
        let mut out: Vec<(String, &mut Matrix)> = Vec::new();
        for (_, p) in self.encoder.params.iter_mut() {
            out.push((p.name.clone(), &mut p.value));
        }
        for (n, m) in names.iter().zip(self.optimizer.m.iter_mut()) {
            out.push((format!("adam.m.{n}"), m));
        }
        for (n, v) in names.iter().zip(self.optimizer.v.iter_mut()) {
            out.push((format!("adam.v.{n}"), v));
        }
        out
    }

    fn epoch(&self) -> usize {
        self.epoch
    }
}

impl Checkpointable for StageTwoTrainer {
    const KIND: &'static str = "stage2";

    fn tensors(&mut self) -> Vec<(String, &mut Matrix)> {
        let names: Vec<String> = self.model.params.iter().map(|(_, p)| p.name.clone()).collect();
        let mut out: Vec<(String, &mut Matrix)> = Vec::new();
        for (_, p) in self.model.params.iter_mut() {
            out.push((p.name.clone(), &mut p.value));
        }
        for (n, m) in names.iter().zip(self.optimizer.m.iter_mut()) {
            out.push((format!("adam.m.{n}"), m));
        }
        for (n, v) in names.iter().zip(self.optimizer.v.iter_mut()) {
            out.push((format!("adam.v.{n}"), v));
        }
        out
    }

    fn epoch(&self) -> usize {
        self.epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage1_checkpoint: Option<PathBuf>,
    pub stage1_sha256: Option<String>,
    pub visual_weights: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: String,
    pub producer: String,
    pub epoch: usize,
    pub experiment: ExperimentConfig,
    pub provenance: Provenance,
    pub tensors: Vec<TensorInfo>,
    pub state: serde_json::Value,
}

impl CheckpointMeta {
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.rows * t.cols).sum()
    }
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> PipelineError {
    PipelineError::Checkpoint(format!("{}: {msg}", path.display()))
}

/// Writes `state` atomically (temp file + rename).
pub fn save<T: Checkpointable>(
    path: &Path,
    state: &mut T,
    experiment: &ExperimentConfig,
    provenance: Provenance,
) -> Result<()> {
    let epoch = state.epoch();
    let mut infos = Vec::new();
    let mut data = Vec::new();
    for (name, m) in state.tensors() {
        infos.push(TensorInfo {
            name,
            rows: m.rows,
            cols: m.cols,
        });
        data.push(std::mem::take(&mut m.data));
    }
    let skeleton = serde_json::to_value(&*state);
    for ((_, m), d) in state.tensors().into_iter().zip(data.iter_mut()) {
        m.data = std::mem::take(d);
    }
    let skeleton = skeleton.map_err(|e| ckpt_err(path, e))?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        kind: T::KIND.to_string(),
        producer: format!("geocontrast {}", env!("CARGO_PKG_VERSION")),
        epoch,
        experiment: experiment.clone(),
        provenance,
        tensors: infos,
        state: skeleton,
    };
    let meta_bytes = serde_json::to_vec(&meta).map_err(|e| ckpt_err(path, e))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let f = File::create(&tmp).map_err(PipelineError::io(&tmp))?;
        let mut w = BufWriter::with_capacity(1 << 20, f);
        let io = PipelineError::io(&tmp);
        let mut write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
            w.write_all(MAGIC)?;
            w.write_all(&FORMAT_VERSION.to_le_bytes())?;
            w.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
            w.write_all(&meta_bytes)?;
            for (_, m) in state.tensors() {
                for v in &m.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()
        };
        write(&mut w).map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(PipelineError::io(path))
}

fn read_header(path: &Path, r: &mut impl Read) -> Result<CheckpointMeta> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| ckpt_err(path, "file too short"))?;
    if &magic != MAGIC {
        return Err(ckpt_err(path, "not a checkpoint (bad magic)"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| ckpt_err(path, "truncated header"))?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(ckpt_err(path, format!("format version {version} is not supported")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| ckpt_err(path, "truncated header"))?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut meta = vec![0u8; len];
    r.read_exact(&mut meta)
        .map_err(|_| ckpt_err(path, "truncated metadata"))?;
    serde_json::from_slice(&meta).map_err(|e| ckpt_err(path, format!("bad metadata: {e}")))
}

/// Reads only the metadata.
pub fn inspect(path: &Path) -> Result<CheckpointMeta> {
    let f = File::open(path).map_err(PipelineError::io(path))?;
    read_header(path, &mut BufReader::new(f))
}

pub fn load<T: Checkpointable>(path: &Path) -> Result<(T, CheckpointMeta)> {
    let f = File::open(path).map_err(PipelineError::io(path))?;
    let mut r = BufReader::with_capacity(1 << 20, f);
    let mut meta = read_header(path, &mut r)?;
    if meta.kind != T::KIND {
        return Err(ckpt_err(
            path,
            format!("expected a {} checkpoint, found {}", T::KIND, meta.kind),
        ));
    }
    let state = std::mem::take(&mut meta.state);
    let mut value: T = serde_json::from_value(state).map_err(|e| ckpt_err(path, format!("bad state: {e}")))?;
    {
        let tensors = value.tensors();
        if tensors.len() != meta.tensors.len() {
            return Err(ckpt_err(path, "tensor directory does not match the model"));
        }
        let mut buf = Vec::new();
        for ((name, m), info) in tensors.into_iter().zip(&meta.tensors) {
            if name != info.name || m.rows != info.rows || m.cols != info.cols {
                return Err(ckpt_err(
                    path,
                    format!("tensor `{}` does not match `{name}`", info.name),
                ));
            }
            let n = info.rows * info.cols;
            buf.resize(n * 8, 0);
            r.read_exact(&mut buf)
                .map_err(|_| ckpt_err(path, format!("truncated tensor `{name}`")))?;
            m.data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(PipelineError::io(path))? != 0 {
        return Err(ckpt_err(path, "trailing bytes after the last tensor"));
    }
    Ok((value, meta))
}

/// Hex SHA-256 of a file.
pub fn sha256_file(path: &Path) -> Result<String> {
    let f = File::open(path).map_err(PipelineError::io(path))?;
    let mut r = BufReader::with_capacity(1 << 20, f);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = r.read(&mut buf).map_err(PipelineError::io(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl Checkpointable for StageTwoModel {
    const KIND: &'static str = "stage2-model";

    fn tensors(&mut self) -> Vec<(String, &mut Matrix)> {
        self.params
            .iter_mut()
            .map(|(_, p)| (p.name.clone(), &mut p.value))
            .collect()
    }

    fn epoch(&self) -> usize {
        0
    }
}

/// Loads the Stage-II model from a trainer or a model-only checkpoint.
pub fn load_stage2_model(path: &Path) -> Result<(StageTwoModel, CheckpointMeta)> {
    let meta = inspect(path)?;
    if meta.kind == StageTwoModel::KIND {
        load::<StageTwoModel>(path)
    } else {
        let (t, meta) = load::<StageTwoTrainer>(path)?;
        Ok((t.model, meta))
    }
}
