use std::io::{IsTerminal, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use crystal_core::augment::{augment_dataset, balance_plan, FileSource};
use crystal_core::checkpoint::load_model;
use crystal_core::corpus::{class_histogram, load_manifest, save_manifest, split_counts, stratified_split, Split, SplitRatios};
use crystal_core::evaluator::{read_predictions, report, write_predictions, write_report, PredictionRecord};
use crystal_core::synthgen::{generate, SynthSpec};
use crystal_core::trainer::{self, Dataset, TrainConfig};
use crystal_core::triage::{serve, ServiceConfig};
use crystal_core::zoo::{ArchitectureId, Model, ModelSpec};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "crystal", version, about = "Crystallization image triage toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus manifest tools.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
    /// Expand every split into a class-balanced set of 128x128 grayscale images.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        out_manifest: PathBuf,
    },
    /// Render a labeled synthetic corpus.
    Synth {
        /// Per-class counts as label=N,label=N.
        #[arg(long)]
        counts: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model and keep the checkpoint with the best validation accuracy.
    Train {
        #[arg(long)]
        arch: ArchitectureId,
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        val_manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Run a checkpoint over a manifest and write a predictions file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Only records of this split (train, validation or test).
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the metric report for a predictions file.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out_report: PathBuf,
    },
    /// Run the review service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// List the model architectures.
    Archs,
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Assign train/validation/test splits, stratified by class.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "0.80,0.05,0.15")]
        ratios: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_ratios(s: &str) -> anyhow::Result<SplitRatios> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad ratio {p:?}")))
        .collect::<anyhow::Result<_>>()?;
    let [train, validation, test] = parts[..] else {
        bail!("expected three comma-separated ratios, got {s:?}");
    };
    Ok(SplitRatios::new(train, validation, test)?)
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    Split::ASSIGNED
        .into_iter()
        .find(|sp| sp.name() == s)
        .with_context(|| format!("unknown split {s:?}"))
}

fn absolute(p: &Path) -> anyhow::Result<PathBuf> {
    p.canonicalize().with_context(|| format!("resolving {}", p.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Corpus {
            command: CorpusCommand::Split { manifest, ratios, seed, out },
        } => {
            let m = load_manifest(&manifest)?;
            let mut split = stratified_split(&m, parse_ratios(&ratios)?, seed)?;
            // Source paths stay valid relative to the input's directory.
            split.records.iter_mut().for_each(|r| r.source_path = m.resolve_path(r));
            save_manifest(&split, &out)?;
            let counts = split_counts(&split);
            println!(
                "train {} validation {} test {}",
                counts.get(&Split::Train).unwrap_or(&0),
                counts.get(&Split::Validation).unwrap_or(&0),
                counts.get(&Split::Test).unwrap_or(&0)
            );
        }
        Command::Augment { manifest, seed, out_dir, out_manifest } => {
            let m = load_manifest(&manifest)?;
            let plan = balance_plan(&class_histogram(&m, None))?;
            let mut out = augment_dataset(&m, &plan, seed, &FileSource, &out_dir)?;
            out.parent_manifest = Some(absolute(&manifest)?);
            save_manifest(&out, &out_manifest)?;
            println!("{} augmented records, {} per class", out.len(), plan.target_count);
        }
        Command::Synth { counts, seed, out_dir } => {
            let spec = SynthSpec::new(SynthSpec::parse_counts(&counts)?, seed);
            let m = generate(&spec, &out_dir)?;
            println!("{} images written to {}", m.len(), out_dir.display());
        }
        Command::Train {
            arch,
            train_manifest,
            val_manifest,
            config,
            out_checkpoint,
            history,
        } => {
            let cfg = TrainConfig::load(config.as_deref(), std::env::vars())?;
            let train_set = Dataset::load(&load_manifest(&train_manifest)?, &FileSource)?;
            let val_set = Dataset::load(&load_manifest(&val_manifest)?, &FileSource)?;
            let mut model = Model::build(ModelSpec::new(arch, cfg.seed))?;
            let result = trainer::train(&mut model, &train_set, &val_set, &cfg)?;
            result.best.save(&out_checkpoint)?;
            if let Some(h) = history {
                trainer::write_history_csv(&result.history, h)?;
            }
            println!(
                "best epoch {} validation accuracy {:.4}",
                result.best_epoch(),
                result.best.header.validation_accuracy.unwrap_or(f64::NAN)
            );
        }
        Command::Predict { checkpoint, manifest, split, out } => {
            let model = load_model(&checkpoint)?;
            let mut m = load_manifest(&manifest)?;
            if let Some(s) = split {
                m = m.filter_split(parse_split(&s)?);
            }
            let data = Dataset::load(&m, &FileSource)?;
            let preds = trainer::predict(&model, &data)?
                .into_iter()
                .zip(&m.records)
                .map(|(act, r)| PredictionRecord::new(r.record_id.clone(), r.label, act.map(f64::from)))
                .collect::<crystal_core::Result<Vec<_>>>()?;
            write_predictions(&preds, &out)?;
            println!("{} predictions written", preds.len());
        }
        Command::Evaluate { predictions, out_report } => {
            let r = report(&read_predictions(&predictions)?)?;
            write_report(&r, &out_report)?;
            println!(
                "top-1 {:.4} top-2 {:.4} top-3 {:.4}",
                r.top_n_accuracy[&1], r.top_n_accuracy[&2], r.top_n_accuracy[&3]
            );
        }
        Command::Serve { config } => {
            let cfg = ServiceConfig::load(config.as_deref(), std::env::vars())?;
            let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
            rt.block_on(serve(cfg, |addr| {
                println!("listening on {addr}");
                let _ = std::io::stdout().flush();
            }))?;
        }
        Command::Archs => {
            for a in ArchitectureId::ALL {
                let m = Model::build(ModelSpec::new(a, 0))?;
                println!("{:<14}{:>12} params", a.name(), m.param_count());
            }
        }
    }
    Ok(())
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("CRYSTAL_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    if let Err(e) = run(Cli::parse()) {
        // Core errors already quote their source; print each cause once.
        let mut msg = e.to_string();
        for cause in e.chain().skip(1).map(|c| c.to_string()) {
            if !msg.contains(&cause) {
                msg = format!("{msg}: {cause}");
            }
        }
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}
