//! The commands behind the CLI: graphs, both training stages, evaluation,
//! ablations and overlays. Every command writes the resolved config next
//! to its outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use geocontrast_core::ablation::{FeatureMask, ModalityMask};
use geocontrast_core::annotate::{attach_labels, LinkCoverage};
use geocontrast_core::graph::build_graph;
use geocontrast_core::labels::Dataset;
use geocontrast_core::metrics::{self, EvalReport, TableScores, TABLE_IOU_THRESHOLD};
use geocontrast_core::stage1::{StageOneEncoder, StageOneTrainer};
use geocontrast_core::stage2::{StageTwoInput, StageTwoModel, StageTwoTrainer};
use geocontrast_core::visual::Raster;
use geocontrast_core::{BBox, DocumentGraph, LinkLabel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Provenance};
use crate::config::ExperimentConfig;
use crate::error::{PipelineError, Result};
use crate::graph_io::{self, GraphFile, GRAPH_FORMAT_VERSION};
use crate::ingest::{self, Document, SkipReport, Split};

pub const SPLITS: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

/// Output locations under `out_dir`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            root: cfg.out_dir.clone(),
        }
    }

    pub fn graphs(&self, split: Split) -> PathBuf {
        self.root.join("graphs").join(split.name())
    }

    pub fn stage_dir(&self, stage: u8) -> PathBuf {
        self.root.join(format!("stage{stage}"))
    }

    pub fn last(&self, stage: u8) -> PathBuf {
        self.stage_dir(stage).join("last.ckpt")
    }

    pub fn best(&self) -> PathBuf {
        self.stage_dir(2).join("best.ckpt")
    }

    pub fn eval(&self, split: Split) -> PathBuf {
        self.root.join("eval").join(split.name())
    }

    pub fn render(&self) -> PathBuf {
        self.root.join("render")
    }

    pub fn ablation(&self, kind: AblationKind) -> PathBuf {
        self.root.join("ablation").join(kind.name())
    }
}

/// A document with its labeled graph.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub doc: Document,
    pub split: Split,
    pub graph: DocumentGraph,
    pub coverage: LinkCoverage,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub train: Vec<Prepared>,
    pub validation: Vec<Prepared>,
    pub test: Vec<Prepared>,
    pub skipped: SkipReport,
}

impl Corpus {
    pub fn get(&self, split: Split) -> &[Prepared] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn find(&self, id: &str, split: Option<Split>) -> Result<&Prepared> {
        let splits: Vec<Split> = split.map_or(SPLITS.to_vec(), |s| vec![s]);
        splits
            .iter()
            .flat_map(|&s| self.get(s))
            .find(|p| p.doc.id == id)
            .ok_or_else(|| {
                let ids: Vec<&str> = splits
                    .iter()
                    .flat_map(|&s| self.get(s))
                    .map(|p| p.doc.id.as_str())
                    .collect();
                PipelineError::NotFound(format!("unknown document `{id}`; valid ids: {}", ids.join(", ")))
            })
    }
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))
}

/// Builds and labels the graph of one document.
pub fn prepare(cfg: &ExperimentConfig, doc: &Document, split: Split) -> Result<Prepared> {
    let boxes: Vec<BBox> = doc.records.iter().map(|r| r.bbox).collect();
    let wrap = |e: geocontrast_core::Error| PipelineError::Annotation {
        path: doc.image_path.clone(),
        msg: format!("document `{}`: {e}", doc.id),
    };
    let graph = build_graph(&boxes, doc.image_size, cfg.graph).map_err(wrap)?;
    let (graph, coverage) = attach_labels(&graph, &doc.records, cfg.link_task()).map_err(wrap)?;
    Ok(Prepared {
        doc: doc.clone(),
        split,
        graph,
        coverage,
    })
}

/// Loads the dataset, applies `limit_docs` and builds every graph.
pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let root = cfg.resolved_data_root();
    if !root.exists() {
        return Err(PipelineError::Missing(format!(
            "dataset root {} does not exist (set data_root or {})",
            root.display(),
            crate::config::DATA_ROOT_ENV
        )));
    }
    let (mut splits, skipped) = match cfg.dataset {
        Dataset::Funsd => ingest::load_funsd(&root, cfg.val_fraction, cfg.split_seed)?,
        Dataset::Rvlcdip => ingest::load_rvlcdip_invoices(&root, cfg.val_fraction, cfg.test_fraction, cfg.split_seed)?,
    };
    if cfg.limit_docs > 0 {
        splits.limit(cfg.limit_docs);
    }
    let pool = thread_pool(cfg.workers)?;
    let build = |docs: &[Document], split: Split| -> Result<Vec<Prepared>> {
        pool.install(|| docs.par_iter().map(|d| prepare(cfg, d, split)).collect())
    };
    Ok(Corpus {
        train: build(&splits.train, Split::Train)?,
        validation: build(&splits.validation, Split::Validation)?,
        test: build(&splits.test, Split::Test)?,
        skipped,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitCoverage {
    pub split: Split,
    pub documents: usize,
    pub coverage: LinkCoverage,
    pub per_document: Vec<(String, LinkCoverage)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildSummary {
    pub files: usize,
    pub splits: Vec<SplitCoverage>,
    pub skipped: SkipReport,
}

/// Writes one graph file per document plus a coverage report.
pub fn build_graphs(cfg: &ExperimentConfig) -> Result<BuildSummary> {
    let corpus = load_corpus(cfg)?;
    let layout = Layout::new(cfg);
    cfg.save(&layout.root.join("graphs").join("config.toml"))?;
    let mut summary = BuildSummary {
        files: 0,
        splits: Vec::new(),
        skipped: corpus.skipped.clone(),
    };
    for split in SPLITS {
        let docs = corpus.get(split);
        let dir = layout.graphs(split);
        fs::create_dir_all(&dir).map_err(PipelineError::io(&dir))?;
        let mut cov = SplitCoverage {
            split,
            documents: docs.len(),
            coverage: LinkCoverage::default(),
            per_document: Vec::new(),
        };
        for p in docs {
            let file = GraphFile {
                format_version: GRAPH_FORMAT_VERSION,
                dataset: cfg.dataset,
                split,
                document: p.doc.id.clone(),
                coverage: p.coverage,
                tables: p.doc.tables.clone(),
                graph: p.graph.clone(),
            };
            graph_io::write_graph(&dir.join(format!("{}.json", p.doc.id)), &file)?;
            cov.coverage = cov.coverage.merge(&p.coverage);
            cov.per_document.push((p.doc.id.clone(), p.coverage));
            summary.files += 1;
        }
        log::info!(
            "{}: {} graphs, link coverage {}/{}",
            split.name(),
            docs.len(),
            cov.coverage.covered,
            cov.coverage.gt_pairs
        );
        summary.splits.push(cov);
    }
    let path = layout.root.join("graphs").join("coverage.json");
    let bytes = serde_json::to_vec_pretty(&summary).map_err(PipelineError::json(&path))?;
    fs::write(&path, bytes).map_err(PipelineError::io(&path))?;
    Ok(summary)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Ignore an existing checkpoint and start over.
    pub fresh: bool,
    /// Stop this invocation after this many epochs (the run stays resumable).
    pub stop_after: Option<usize>,
    /// Stage-I checkpoint for Stage II; defaults to the run's own.
    pub stage1_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint to evaluate: best on validation if any, else last.
    pub checkpoint: PathBuf,
    pub last: PathBuf,
    pub epochs: usize,
    pub resumed_from: Option<usize>,
    pub finished: bool,
    pub seconds: f64,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(PipelineError::json(path))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(PipelineError::io(path))
}

/// The parts of a config that a stage's checkpoint depends on.
fn stage_key(cfg: &ExperimentConfig, stage: u8) -> serde_json::Value {
    let mut c = cfg.clone();
    c.out_dir = PathBuf::new();
    c.data_root = PathBuf::new();
    c.workers = 1;
    c.checkpoint_every = 0;
    c.stage1.epochs = 0;
    c.stage2.epochs = 0;
    if stage == 1 {
        c.stage2 = Default::default();
        c.score_train_each_epoch = false;
    }
    serde_json::to_value(c).expect("config serializes")
}

fn check_resumable(path: &Path, cfg: &ExperimentConfig, stage: u8) -> Result<()> {
    let meta = checkpoint::inspect(path)?;
    if stage_key(&meta.experiment, stage) != stage_key(cfg, stage) {
        return Err(PipelineError::Config(format!(
            "{} was written with a different config; pass --fresh to start over",
            path.display()
        )));
    }
    Ok(())
}

fn should_checkpoint(cfg: &ExperimentConfig, epoch: usize, done: bool) -> bool {
    done || (cfg.checkpoint_every > 0 && epoch.is_multiple_of(cfg.checkpoint_every))
}

/// Stage I: contrastive pre-training of the geometric encoder.
pub fn train_stage1(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let start = Instant::now();
    let layout = Layout::new(cfg);
    let dir = layout.stage_dir(1);
    let last = layout.last(1);
    let corpus = load_corpus(cfg)?;
    if corpus.train.is_empty() {
        return Err(PipelineError::Missing("no training documents".into()));
    }
    let train: Vec<DocumentGraph> = corpus.train.iter().map(|p| p.graph.clone()).collect();
    let val: Vec<DocumentGraph> = corpus.validation.iter().map(|p| p.graph.clone()).collect();
    let mut resumed_from = None;
    let mut trainer = if last.exists() && !opts.fresh {
        check_resumable(&last, cfg, 1)?;
        let (t, _) = checkpoint::load::<StageOneTrainer>(&last)?;
        log::info!("resuming stage 1 from epoch {}", t.epoch);
        resumed_from = Some(t.epoch);
        t
    } else {
        StageOneTrainer::new(cfg.stage1, cfg.graph.polar_bins)?
    };
    trainer.encoder.config.epochs = cfg.stage1.epochs;
    cfg.save(&dir.join("config.toml"))?;
    let mut ran = 0;
    while !trainer.done() && opts.stop_after.is_none_or(|n| ran < n) {
        trainer.step(&train, &val)?;
        ran += 1;
        write_jsonl(&dir.join("metrics.jsonl"), &trainer.history)?;
        if should_checkpoint(cfg, trainer.epoch, trainer.done()) {
            checkpoint::save(&last, &mut trainer, cfg, Provenance::default())?;
        }
    }
    if ran > 0 && !should_checkpoint(cfg, trainer.epoch, trainer.done()) {
        checkpoint::save(&last, &mut trainer, cfg, Provenance::default())?;
    }
    Ok(TrainOutcome {
        checkpoint: last.clone(),
        last,
        epochs: trainer.epoch,
        resumed_from,
        finished: trainer.done(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Page image as a `[0, 1]` raster.
pub fn load_raster(path: &Path) -> Result<Raster> {
    let img = image::open(path)
        .map_err(|source| PipelineError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Raster::new(
        w as usize,
        h as usize,
        img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect(),
    ))
}

/// Frozen Stage-I encoder plus Stage-II model, ready to turn documents
/// into model inputs.
pub struct Predictor {
    pub stage1: StageOneEncoder,
    pub model: StageTwoModel,
}

impl Predictor {
    /// Graph as seen by Stage II: the polar block follows the feature mask.
    pub fn stage2_graph(&self, graph: &DocumentGraph) -> DocumentGraph {
        let mut g = graph.clone();
        if !self.stage1.config.features.polar {
            for e in &mut g.edges {
                let bins = g.polar_bins;
                FeatureMask {
                    polar: false,
                    ..FeatureMask::ALL
                }
                .apply_edge(&mut e.geom.0, bins);
            }
        }
        g
    }

    pub fn input(&self, p: &Prepared) -> Result<StageTwoInput> {
        let graph = self.stage2_graph(&p.graph);
        let geometric = self.stage1.encode(&graph)?;
        let visual = if self.model.config.modality.visual {
            let raster = load_raster(&p.doc.image_path)?;
            if (raster.width as f64, raster.height as f64) != (p.doc.image_size.width, p.doc.image_size.height) {
                log::warn!("{}: image size differs from the annotation", p.doc.id);
            }
            self.model.visual.prepare(&raster, &graph.boxes())
        } else {
            geocontrast_core::visual::VisualInput {
                patches: geocontrast_core::Matrix::zeros(0, 9),
                valid: vec![true; graph.num_nodes()],
            }
        };
        Ok(StageTwoInput {
            graph,
            geometric,
            visual,
        })
    }

    pub fn inputs(&self, docs: &[Prepared], workers: usize) -> Result<Vec<StageTwoInput>> {
        thread_pool(workers)?.install(|| docs.par_iter().map(|p| self.input(p)).collect())
    }
}

fn resolve_stage1(cfg: &ExperimentConfig, explicit: Option<&Path>) -> Result<PathBuf> {
    let path = explicit.map_or_else(|| Layout::new(cfg).last(1), Path::to_path_buf);
    if !path.exists() {
        return Err(PipelineError::Missing(format!(
            "stage-1 checkpoint {} (run `train --stage 1` first)",
            path.display()
        )));
    }
    Ok(path)
}

/// Stage II: attention network, node head and edge head.
pub fn train_stage2(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let start = Instant::now();
    let layout = Layout::new(cfg);
    let dir = layout.stage_dir(2);
    let last = layout.last(2);
    let best = layout.best();
    let stage1_path = resolve_stage1(cfg, opts.stage1_checkpoint.as_deref())?;
    let stage1_hash = checkpoint::sha256_file(&stage1_path)?;
    let (stage1, _) = checkpoint::load::<StageOneTrainer>(&stage1_path)?;
    let corpus = load_corpus(cfg)?;
    if corpus.train.is_empty() {
        return Err(PipelineError::Missing("no training documents".into()));
    }
    let mut resumed_from = None;
    let mut trainer = if last.exists() && !opts.fresh {
        check_resumable(&last, cfg, 2)?;
        let (t, meta) = checkpoint::load::<StageTwoTrainer>(&last)?;
        if meta.provenance.stage1_sha256.as_deref() != Some(stage1_hash.as_str()) {
            return Err(PipelineError::Checkpoint(format!(
                "{} was trained on a different stage-1 checkpoint; pass --fresh to start over",
                last.display()
            )));
        }
        log::info!("resuming stage 2 from epoch {}", t.epoch);
        resumed_from = Some(t.epoch);
        t
    } else {
        StageTwoTrainer::new(cfg.stage2.clone(), corpus.train.iter().map(|p| &p.graph))?
    };
    trainer.model.config.epochs = cfg.stage2.epochs;
    let provenance = Provenance {
        stage1_checkpoint: Some(stage1_path.canonicalize().unwrap_or(stage1_path.clone())),
        stage1_sha256: Some(stage1_hash),
        visual_weights: Some(format!(
            "{} (seed {})",
            cfg.stage2.visual.pretrained_weights, cfg.stage2.seed
        )),
    };
    cfg.save(&dir.join("config.toml"))?;
    let (train, val) = {
        let predictor = Predictor {
            stage1: stage1.encoder,
            model: trainer.model.clone(),
        };
        (
            predictor.inputs(&corpus.train, cfg.workers)?,
            predictor.inputs(&corpus.validation, cfg.workers)?,
        )
    };
    log::info!("stage 2: {} train / {} validation documents", train.len(), val.len());
    let mut ran = 0;
    while !trainer.done() && opts.stop_after.is_none_or(|n| ran < n) {
        let t0 = Instant::now();
        let (_, improved) = trainer.step(&train, &val, cfg.score_train_each_epoch)?;
        log::info!("stage 2 epoch took {:.1}s", t0.elapsed().as_secs_f64());
        ran += 1;
        write_jsonl(&dir.join("metrics.jsonl"), &trainer.history)?;
        if improved {
            checkpoint::save(&best, &mut trainer.model, cfg, provenance.clone())?;
        }
        if should_checkpoint(cfg, trainer.epoch, trainer.done()) {
            checkpoint::save(&last, &mut trainer, cfg, provenance.clone())?;
        }
    }
    if ran > 0 && !should_checkpoint(cfg, trainer.epoch, trainer.done()) {
        checkpoint::save(&last, &mut trainer, cfg, provenance)?;
    }
    Ok(TrainOutcome {
        checkpoint: if best.exists() { best } else { last.clone() },
        last,
        epochs: trainer.epoch,
        resumed_from,
        finished: trainer.done(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Loads a Stage-II checkpoint and the Stage-I checkpoint it records,
/// verifying the hash.
pub fn load_predictor(ckpt: &Path) -> Result<(Predictor, ExperimentConfig)> {
    if !ckpt.exists() {
        return Err(PipelineError::Missing(format!("checkpoint {}", ckpt.display())));
    }
    let (model, meta) = checkpoint::load_stage2_model(ckpt)?;
    let s1 = meta.provenance.stage1_checkpoint.clone().ok_or_else(|| {
        PipelineError::Checkpoint(format!("{} does not record its stage-1 checkpoint", ckpt.display()))
    })?;
    if !s1.exists() {
        return Err(PipelineError::Missing(format!(
            "stage-1 checkpoint {} recorded in {}",
            s1.display(),
            ckpt.display()
        )));
    }
    let hash = checkpoint::sha256_file(&s1)?;
    if meta.provenance.stage1_sha256.as_deref() != Some(hash.as_str()) {
        return Err(PipelineError::Checkpoint(format!(
            "stage-1 checkpoint {} changed since {} was trained",
            s1.display(),
            ckpt.display()
        )));
    }
    let (stage1, _) = checkpoint::load::<StageOneTrainer>(&s1)?;
    Ok((
        Predictor {
            stage1: stage1.encoder,
            model,
        },
        meta.experiment,
    ))
}

/// Model settings come from the checkpoint, data settings from `cfg`.
fn merged_config(cfg: &ExperimentConfig, trained: &ExperimentConfig) -> ExperimentConfig {
    if trained.dataset != cfg.dataset {
        log::warn!("checkpoint was trained on {}", trained.dataset.name());
    }
    ExperimentConfig {
        graph: trained.graph,
        stage1: trained.stage1,
        stage2: trained.stage2.clone(),
        dataset: trained.dataset,
        ..cfg.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgePrediction {
    pub src: usize,
    pub dst: usize,
    pub prob: f64,
    pub positive: bool,
    pub gold: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocPrediction {
    pub id: String,
    pub boxes: Vec<BBox>,
    pub tables: Vec<BBox>,
    pub node_pred: Vec<usize>,
    pub node_gold: Option<Vec<usize>>,
    pub node_probs: Vec<Vec<f64>>,
    pub edges: Vec<EdgePrediction>,
    pub coverage: LinkCoverage,
}

impl DocPrediction {
    pub fn positive_edges(&self) -> usize {
        self.edges.iter().filter(|e| e.positive).count()
    }
}

pub fn predict_doc(predictor: &Predictor, p: &Prepared) -> Result<DocPrediction> {
    let input = predictor.input(p)?;
    let pred = predictor.model.predict(&input)?;
    let gold = p.graph.link_labels();
    let edges = p
        .graph
        .edges
        .iter()
        .enumerate()
        .map(|(i, e)| EdgePrediction {
            src: e.src,
            dst: e.dst,
            prob: pred.edge_probs[i],
            positive: pred.edge_positive[i],
            gold: gold.as_ref().map(|g| g[i].is_positive()),
        })
        .collect();
    Ok(DocPrediction {
        id: p.doc.id.clone(),
        boxes: p.graph.boxes(),
        tables: p.doc.tables.clone(),
        node_pred: pred.node_labels,
        node_gold: p.graph.node_labels(),
        node_probs: pred.node_probs.to_rows(),
        edges,
        coverage: p.coverage,
    })
}

/// Scores a prediction dump. The same function backs `evaluate`, so a
/// saved dump reproduces the report exactly.
pub fn report_from_predictions(dataset: Dataset, split: Split, docs: &[DocPrediction]) -> Result<EvalReport> {
    let labels = dataset.labels();
    let mut npred = Vec::new();
    let mut ngold = Vec::new();
    let mut epred = Vec::new();
    let mut egold = Vec::new();
    let mut scores = Vec::new();
    let mut coverage = LinkCoverage::default();
    let mut table = metrics::DetectionCounts::default();
    for d in docs {
        let gold = d
            .node_gold
            .as_ref()
            .ok_or_else(|| PipelineError::Config(format!("document `{}` has no labels to score", d.id)))?;
        npred.extend_from_slice(&d.node_pred);
        ngold.extend_from_slice(gold);
        for e in &d.edges {
            let g = e.gold.unwrap_or(false);
            epred.push(usize::from(e.positive));
            egold.push(usize::from(g));
            scores.push(e.prob);
        }
        coverage = coverage.merge(&d.coverage);
        if dataset == Dataset::Rvlcdip {
            let pairs: Vec<(usize, usize)> = d.edges.iter().map(|e| (e.src, e.dst)).collect();
            let pos: Vec<bool> = d.edges.iter().map(|e| e.positive).collect();
            table.merge(metrics::table_detection(
                &d.boxes,
                &pairs,
                &pos,
                &d.tables,
                TABLE_IOU_THRESHOLD,
            ));
        }
    }
    let nodes = metrics::classification_f1(&npred, &ngold, labels.len())?;
    let links = metrics::classification_f1(&epred, &egold, 2)?;
    let gold_bool: Vec<bool> = egold.iter().map(|&g| g == 1).collect();
    Ok(EvalReport {
        dataset: dataset.name().to_string(),
        split: split.name().to_string(),
        documents: docs.len(),
        class_names: labels.0.iter().map(|s| s.to_string()).collect(),
        node_micro_f1: nodes.micro_f1,
        node_per_class: nodes.per_class,
        link_f1_none: links.per_class[0].f1,
        link_f1_positive: links.per_class[1].f1,
        link_support: [links.per_class[0].support, links.per_class[1].support],
        auc_pr: metrics::auc_pr(&scores, &gold_bool),
        table: (dataset == Dataset::Rvlcdip).then(|| TableScores::from(table)),
        link_coverage: coverage,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub report_path: PathBuf,
    pub predictions_path: PathBuf,
}

pub fn evaluate(cfg: &ExperimentConfig, ckpt: &Path, split: Split) -> Result<EvalOutcome> {
    evaluate_into(cfg, ckpt, split, &Layout::new(cfg).eval(split))
}

/// Evaluates `ckpt` on `split`, writing the report and the per-edge dump
/// into `dir`.
pub fn evaluate_into(cfg: &ExperimentConfig, ckpt: &Path, split: Split, dir: &Path) -> Result<EvalOutcome> {
    let (predictor, trained) = load_predictor(ckpt)?;
    let cfg = merged_config(cfg, &trained);
    let corpus = load_corpus(&cfg)?;
    let docs = corpus.get(split);
    if docs.is_empty() {
        return Err(PipelineError::Missing(format!("the {} split is empty", split.name())));
    }
    let preds: Vec<DocPrediction> = thread_pool(cfg.workers)?.install(|| {
        docs.par_iter()
            .map(|p| predict_doc(&predictor, p))
            .collect::<Result<_>>()
    })?;
    let report = report_from_predictions(cfg.dataset, split, &preds)?;
    cfg.save(&dir.join("config.toml"))?;
    let report_path = dir.join("report.json");
    let predictions_path = dir.join("predictions.json");
    let bytes = serde_json::to_vec_pretty(&report).map_err(PipelineError::json(&report_path))?;
    fs::write(&report_path, bytes).map_err(PipelineError::io(&report_path))?;
    let bytes = serde_json::to_vec(&preds).map_err(PipelineError::json(&predictions_path))?;
    fs::write(&predictions_path, bytes).map_err(PipelineError::io(&predictions_path))?;
    Ok(EvalOutcome {
        report,
        report_path,
        predictions_path,
    })
}

pub fn read_predictions(path: &Path) -> Result<Vec<DocPrediction>> {
    let bytes = fs::read(path).map_err(PipelineError::io(path))?;
    serde_json::from_slice(&bytes).map_err(PipelineError::json(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    /// Leave one geometric feature out at a time.
    Features,
    /// Edge features only versus node features only.
    NodeEdge,
    /// Visual only, geometric only, both.
    Modality,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Features => "features",
            AblationKind::NodeEdge => "node-edge",
            AblationKind::Modality => "modality",
        }
    }

    pub fn rows(self) -> Vec<(&'static str, FeatureMask, ModalityMask)> {
        match self {
            AblationKind::Features => FeatureMask::leave_one_out()
                .into_iter()
                .map(|(n, f)| (n, f, ModalityMask::default()))
                .collect(),
            AblationKind::NodeEdge => vec![
                ("edges-only", FeatureMask::EDGES_ONLY, ModalityMask::default()),
                ("nodes-only", FeatureMask::NODES_ONLY, ModalityMask::default()),
            ],
            AblationKind::Modality => ModalityMask::rows()
                .into_iter()
                .map(|(n, m)| (n, FeatureMask::ALL, m))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub features: FeatureMask,
    pub modality: ModalityMask,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub table: String,
    pub table_path: PathBuf,
}

/// Trains and evaluates one run per ablation row, then writes a
/// comparison table.
pub fn ablate(
    cfg: &ExperimentConfig,
    kind: AblationKind,
    split: Split,
    opts: &TrainOptions,
) -> Result<AblationOutcome> {
    let base = Layout::new(cfg).ablation(kind);
    cfg.save(&base.join("config.toml"))?;
    // Modality rows share one Stage-I encoder.
    let shared_stage1 = if kind == AblationKind::Modality {
        let mut c = cfg.clone();
        c.out_dir = base.join("shared");
        Some(train_stage1(&c, opts)?.last)
    } else {
        None
    };
    let mut rows = Vec::new();
    for (name, features, modality) in kind.rows() {
        let mut c = cfg.clone();
        c.out_dir = base.join(name);
        c.stage1.features = features;
        c.stage2.modality = modality;
        let stage1 = match &shared_stage1 {
            Some(p) => p.clone(),
            None => train_stage1(&c, opts)?.last,
        };
        let o = TrainOptions {
            stage1_checkpoint: Some(stage1),
            ..opts.clone()
        };
        let trained = train_stage2(&c, &o)?;
        let eval = evaluate_into(
            &c,
            &trained.checkpoint,
            split,
            &c.out_dir.join("eval").join(split.name()),
        )?;
        log::info!("ablation {name}: node F1 {:.4}", eval.report.node_micro_f1);
        rows.push(AblationRow {
            name: name.to_string(),
            features,
            modality,
            report: eval.report,
        });
    }
    let table = ablation_table(kind, cfg.dataset, &rows);
    let table_path = base.join("summary.md");
    fs::write(&table_path, &table).map_err(PipelineError::io(&table_path))?;
    let json_path = base.join("summary.json");
    let bytes = serde_json::to_vec_pretty(&rows).map_err(PipelineError::json(&json_path))?;
    fs::write(&json_path, bytes).map_err(PipelineError::io(&json_path))?;
    Ok(AblationOutcome {
        rows,
        table,
        table_path,
    })
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        "✗"
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

/// Markdown comparison table in the layout of the published ablations.
pub fn ablation_table(kind: AblationKind, dataset: Dataset, rows: &[AblationRow]) -> String {
    let link = if dataset == Dataset::Funsd { "K-V" } else { "Table" };
    let mut s = String::new();
    let metrics = |r: &EvalReport| {
        format!(
            "{:.4} | {:.4} | {:.4} | {}",
            r.node_micro_f1,
            r.link_f1_none,
            r.link_f1_positive,
            opt(r.auc_pr)
        )
    };
    match kind {
        AblationKind::Features => {
            s.push_str(&format!(
                "| Distance | Angle | Discretize | Polar | Bounding | Area | Regional | F1 Nodes | None | {link} | AUC-PR |\n"
            ));
            s.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
            for r in rows {
                let f = r.features;
                s.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
                    mark(f.distance),
                    mark(f.angle),
                    mark(f.polar),
                    mark(f.relative_position),
                    mark(f.bounding_box),
                    mark(f.area),
                    mark(f.regional),
                    metrics(&r.report)
                ));
            }
        }
        AblationKind::NodeEdge => {
            s.push_str(&format!(
                "| Features | F1 Nodes | None | {link} | AUC-PR |\n|---|---|---|---|---|\n"
            ));
            for r in rows {
                s.push_str(&format!("| {} | {} |\n", r.name, metrics(&r.report)));
            }
        }
        AblationKind::Modality => {
            s.push_str(&format!(
                "| Modality | F1 Nodes | None | {link} | AUC-PR |\n|---|---|---|---|---|\n"
            ));
            for r in rows {
                s.push_str(&format!("| {} | {} |\n", r.name, metrics(&r.report)));
            }
        }
    }
    s
}

#[derive(Debug, Clone)]
pub struct RenderOutcome {
    pub path: PathBuf,
    pub predicted_links: usize,
    /// Links drawn on the ground-truth panel, when labels exist.
    pub gold_links: Option<usize>,
}

/// Overlay of predicted classes and links, next to the ground truth.
pub fn render(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    doc_id: &str,
    split: Option<Split>,
    output: Option<&Path>,
) -> Result<RenderOutcome> {
    let (predictor, trained) = load_predictor(ckpt)?;
    let cfg = merged_config(cfg, &trained);
    let corpus = load_corpus(&cfg)?;
    let p = corpus.find(doc_id, split)?;
    let pred = predict_doc(&predictor, p)?;
    let page = image::open(&p.doc.image_path)
        .map_err(|source| PipelineError::Image {
            path: p.doc.image_path.clone(),
            source,
        })?
        .to_rgb8();
    let path = output.map_or_else(
        || Layout::new(&cfg).render().join(format!("{doc_id}.png")),
        Path::to_path_buf,
    );
    let (img, gold_links) = crate::render::compose(&page, &pred);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    }
    img.save(&path).map_err(|source| PipelineError::Image {
        path: path.clone(),
        source,
    })?;
    Ok(RenderOutcome {
        path,
        predicted_links: pred.positive_edges(),
        gold_links,
    })
}

/// Gold links present in the graph of a labeled document.
pub fn gold_link_edges(graph: &DocumentGraph) -> Option<Vec<(usize, usize)>> {
    let labels = graph.link_labels()?;
    Some(
        graph
            .edges
            .iter()
            .zip(labels)
            .filter(|(_, l)| *l != LinkLabel::None)
            .map(|(e, _)| (e.src, e.dst))
            .collect(),
    )
}
