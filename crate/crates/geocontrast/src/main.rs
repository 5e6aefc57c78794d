use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geocontrast::checkpoint;
use geocontrast::config::ExperimentConfig;
use geocontrast::ingest::Split;
use geocontrast::pipeline::{self, AblationKind, TrainOptions};
use geocontrast::{synth, PipelineError, Result};
use geocontrast_core::labels::Dataset;

#[derive(Parser)]
#[command(
    name = "geocontrast",
    version,
    about = "Geometric document graphs: training, evaluation and overlays"
)]
struct Cli {
    /// Experiment config (TOML). Defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_dataset)]
    dataset: Option<Dataset>,
    /// Seed for both training stages.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use at most this many documents per split.
    #[arg(long, global = true)]
    limit_docs: Option<usize>,
    /// Threads for per-document work. Results are bit-reproducible with 1.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build one graph file per document and report link coverage.
    BuildGraphs,
    /// Train stage 1 or stage 2; resumes from the last checkpoint.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Stage-I checkpoint for stage 2 (default: the run's own).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Ignore existing checkpoints.
        #[arg(long)]
        fresh: bool,
        /// Stop after this many epochs in this invocation.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score a Stage-II checkpoint on a split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Train and evaluate every row of an ablation, then print the table.
    Ablate {
        #[arg(long, value_enum)]
        kind: AblationKind,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        fresh: bool,
    },
    /// Draw predicted classes and links over a page.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        document: String,
        #[arg(long, value_enum)]
        split: Option<Split>,
        /// Image path (default: <out>/render/<document>.png).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print checkpoint metadata without loading the weights.
    InspectCheckpoint {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write a synthetic dataset in the on-disk layout of `--dataset`.
    Synth {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 5)]
        train: usize,
        #[arg(long, default_value_t = 2)]
        test: usize,
    },
}

fn parse_dataset(s: &str) -> std::result::Result<Dataset, String> {
    match s {
        "funsd" => Ok(Dataset::Funsd),
        "rvlcdip" | "rvlcdip-invoices" => Ok(Dataset::Rvlcdip),
        _ => Err(format!("unknown dataset `{s}` (expected funsd or rvlcdip)")),
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::for_dataset(cli.dataset.unwrap_or(Dataset::Funsd)),
    };
    if let Some(d) = cli.dataset {
        if d != cfg.dataset {
            cfg.dataset = d;
            cfg.stage2.num_classes = d.labels().len();
        }
    }
    if let Some(s) = cli.seed {
        cfg.stage1.seed = s;
        cfg.stage2.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(n) = cli.limit_docs {
        cfg.limit_docs = n;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    match cli.command {
        Command::BuildGraphs => {
            let s = pipeline::build_graphs(&cfg)?;
            for c in &s.splits {
                let frac = c
                    .coverage
                    .fraction()
                    .map_or("n/a".into(), |f| format!("{:.2}%", 100.0 * f));
                println!(
                    "{:<10} {:>4} graphs  link coverage {}/{} ({frac})",
                    c.split.name(),
                    c.documents,
                    c.coverage.covered,
                    c.coverage.gt_pairs
                );
            }
            println!("{} graph files in {}", s.files, cfg.out_dir.join("graphs").display());
            if !s.skipped.skipped.is_empty() {
                println!("{} documents skipped (see coverage.json)", s.skipped.skipped.len());
            }
        }
        Command::Train {
            stage,
            checkpoint,
            fresh,
            stop_after,
        } => {
            let opts = TrainOptions {
                fresh,
                stop_after,
                stage1_checkpoint: checkpoint,
            };
            let o = if stage == 1 {
                pipeline::train_stage1(&cfg, &opts)?
            } else {
                pipeline::train_stage2(&cfg, &opts)?
            };
            println!(
                "stage {stage}: {} epochs{} in {:.1}s",
                o.epochs,
                if o.finished { "" } else { " (unfinished)" },
                o.seconds
            );
            println!("{}", o.checkpoint.display());
        }
        Command::Evaluate { checkpoint, split } => {
            let o = pipeline::evaluate(&cfg, &checkpoint, split)?;
            print_json(&o.report);
            eprintln!("report: {}", o.report_path.display());
        }
        Command::Ablate { kind, split, fresh } => {
            let opts = TrainOptions {
                fresh,
                ..Default::default()
            };
            let o = pipeline::ablate(&cfg, kind, split, &opts)?;
            print!("{}", o.table);
            eprintln!("table: {}", o.table_path.display());
        }
        Command::Render {
            checkpoint,
            document,
            split,
            output,
        } => {
            let o = pipeline::render(&cfg, &checkpoint, &document, split, output.as_deref())?;
            println!(
                "{} ({} predicted links{})",
                o.path.display(),
                o.predicted_links,
                o.gold_links.map_or(String::new(), |g| format!(", {g} gold links"))
            );
        }
        Command::InspectCheckpoint { checkpoint: path } => {
            let meta = checkpoint::inspect(&path)?;
            let last = meta
                .state
                .get("history")
                .and_then(|h| h.as_array())
                .and_then(|h| h.last())
                .cloned();
            print_json(&serde_json::json!({
                "kind": meta.kind,
                "format_version": meta.format_version,
                "producer": meta.producer,
                "epoch": meta.epoch,
                "tensors": meta.tensors.len(),
                "scalars": meta.num_scalars(),
                "provenance": meta.provenance,
                "best": meta.state.get("best"),
                "last_epoch": last,
                "dataset": meta.experiment.dataset.name(),
            }));
        }
        Command::Synth { root, train, test } => {
            match cfg.dataset {
                Dataset::Funsd => synth::write_funsd(&root, train, test, cfg.split_seed)?,
                Dataset::Rvlcdip => synth::write_invoices(&root, train + test, cfg.split_seed)?,
            }
            println!("{}", root.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), one_line(&e));
            ExitCode::FAILURE
        }
    }
}

fn one_line(e: &PipelineError) -> String {
    e.to_string().replace('\n', " ")
}
