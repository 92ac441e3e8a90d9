//! `scrv`: one binary for the whole verification pipeline.
//!
//! Subcommands: `gen-synth` (deterministic synthetic corpus), `make-pairs`
//! (balanced test pair CSV), `train` (Siamese or triplet training with
//! per-epoch checkpoints), `evaluate` (pair scoring and ROC/AUC report).
//!
//! Value precedence everywhere: built-in defaults, then the `--config` file,
//! then explicit flags. Every run drops a `resolved_config.yaml` next to its
//! outputs that reproduces it when passed back via `--config`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use scrv_core::backbones::ArchKind;
use scrv_core::dataset::{generate_synthetic_corpus, scan_corpus, PreprocessConfig, Split};
use scrv_core::eval::{build_report, emit_report, score_pairs, EVAL_BATCH};
use scrv_core::sampler::{make_test_pairs, write_pairs_csv};
use scrv_core::trainer::{load_checkpoint, select_best, train, TrainConfig, TrainMode};

use config::{parse_image_size, FileConfig, Resolved};

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse().map_err(|e: scrv_core::Error| e.to_string())
}

fn parse_backbone(s: &str) -> Result<ArchKind, String> {
    s.parse().map_err(|e: scrv_core::Error| e.to_string())
}

#[derive(Parser)]
#[command(
    name = "scrv",
    version,
    about = "Scribe verification: synthetic handwriting, metric training, pair evaluation"
)]
struct Cli {
    /// Flat YAML config file; explicit flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed for every random stream (default 42).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a deterministic synthetic handwriting corpus.
    GenSynth(GenSynthArgs),
    /// Draw a balanced, duplicate-free test pair list from the test split.
    MakePairs(MakePairsArgs),
    /// Train an embedding network, checkpointing every epoch.
    Train(TrainArgs),
    /// Score a pair list with a checkpoint and write the metric report.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// Number of scribe identities (default 8).
    #[arg(long, value_name = "N")]
    scribes: Option<usize>,

    /// Training images per scribe (default 200).
    #[arg(long, value_name = "N")]
    train: Option<usize>,

    /// Test images per scribe (default 50).
    #[arg(long, value_name = "N")]
    test: Option<usize>,

    /// Canvas side length in pixels (default 96).
    #[arg(long, value_name = "N")]
    canvas: Option<usize>,
}

#[derive(Args)]
struct MakePairsArgs {
    /// Corpus root containing a test/ subdirectory.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,

    /// Total pairs to draw, half positive, half negative (default 2000).
    #[arg(long, value_name = "N")]
    n: Option<usize>,

    /// Overwrite an existing pair file.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus root containing a train/ subdirectory.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,

    /// Objective: siamese (contrastive pairs) or triplet.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,

    /// Backbone: cnn-mini or vit-lite.
    #[arg(long, value_parser = parse_backbone)]
    backbone: Option<ArchKind>,

    /// Adam learning rate (default 1e-3).
    #[arg(long, value_name = "LR")]
    lr: Option<f64>,

    /// L2 weight decay (default 0).
    #[arg(long, value_name = "WD")]
    weight_decay: Option<f64>,

    /// Pairs or triplets per batch; must be even (default 32).
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,

    /// Training epochs (default 30).
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,

    /// Loss margin; defaults to 0.6 (contrastive) or 1.0 (triplet).
    #[arg(long, value_name = "M")]
    margin: Option<f64>,

    /// Per-class holdout fraction for validation (default 0.1).
    #[arg(long, value_name = "F")]
    val_fraction: Option<f64>,

    /// Network input size, N or HxW (default 64x64).
    #[arg(long, value_parser = parse_image_size, value_name = "HxW")]
    image_size: Option<(usize, usize)>,

    /// Worker threads; 0 means one per core (default 0).
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Corpus root containing the test/ split the pair paths refer to.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,

    /// Checkpoint to score with.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,

    /// Pair list CSV (default DATA/test_pairs.csv).
    #[arg(long, value_name = "PATH")]
    pairs: Option<PathBuf>,

    /// Pairs per forward batch (default 64).
    #[arg(long, value_name = "N")]
    eval_batch: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code_for(&err)
        }
    }
}

/// Config-shaped failures are usage errors (2); everything else is a runtime
/// failure (1). Flag parse errors never reach here; clap exits 2 itself.
fn exit_code_for(err: &anyhow::Error) -> ExitCode {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<scrv_core::Error>() {
            if matches!(
                core,
                scrv_core::Error::InvalidConfig(_) | scrv_core::Error::OddBatchSize(_)
            ) {
                return ExitCode::from(2);
            }
        }
    }
    ExitCode::from(1)
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(scrv_core::Error::InvalidConfig(msg.into()))
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(42);
    let out = cli.out.clone().or_else(|| file.out.clone());
    match cli.command {
        Command::GenSynth(args) => cmd_gen_synth(&args, &file, seed, out),
        Command::MakePairs(args) => cmd_make_pairs(&args, &file, seed, out),
        Command::Train(args) => cmd_train(&args, &file, seed, out),
        Command::Evaluate(args) => cmd_evaluate(&args, &file, seed, out),
    }
}

fn cmd_gen_synth(
    args: &GenSynthArgs,
    file: &FileConfig,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<()> {
    let out = out.ok_or_else(|| usage("gen-synth needs an output directory (--out or 'out:')"))?;
    let scribes = args.scribes.or(file.scribes).unwrap_or(8);
    let train = args.train.or(file.train).unwrap_or(200);
    let test = args.test.or(file.test).unwrap_or(50);
    let canvas = args.canvas.or(file.canvas).unwrap_or(96);

    let (train_corpus, test_corpus) =
        generate_synthetic_corpus(&out, scribes, train, test, canvas, seed)
            .context("generating synthetic corpus")?;

    let mut resolved = Resolved::new("gen-synth");
    resolved.push("seed", seed);
    resolved.push_path("out", &out);
    resolved.push("scribes", scribes);
    resolved.push("train", train);
    resolved.push("test", test);
    resolved.push("canvas", canvas);
    resolved.write(&out)?;

    for (c, class) in train_corpus.classes().iter().enumerate() {
        println!(
            "{}: {} train + {} test images",
            class.name,
            class.files.len(),
            test_corpus.classes()[c].files.len()
        );
    }
    println!(
        "wrote {} scribes ({} images) under {}",
        train_corpus.n_classes(),
        train_corpus.total_images() + test_corpus.total_images(),
        out.display()
    );
    Ok(())
}

fn cmd_make_pairs(
    args: &MakePairsArgs,
    file: &FileConfig,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<()> {
    let data = args
        .data
        .clone()
        .or_else(|| file.data.clone())
        .ok_or_else(|| usage("make-pairs needs a corpus root (--data or 'data:')"))?;
    let n = args.n.or(file.n).unwrap_or(2000);
    let dest = match &out {
        Some(dir) => dir.join("test_pairs.csv"),
        None => data.join("test_pairs.csv"),
    };
    if dest.exists() && !args.force {
        bail!(
            "refusing to overwrite existing {}; pass --force to replace it",
            dest.display()
        );
    }

    let corpus = scan_corpus(&data.join("test"), Split::Test).context("scanning test split")?;
    let rows = make_test_pairs(&corpus, n, seed)?;
    if let Some(dir) = dest.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_pairs_csv(&rows, &dest)?;

    let mut resolved = Resolved::new("make-pairs");
    resolved.push("seed", seed);
    resolved.push_path("data", &data);
    if let Some(dir) = &out {
        resolved.push_path("out", dir);
    }
    resolved.push("n", n);
    let snapshot_dir = dest.parent().expect("pair file has a parent directory");
    resolved.write(snapshot_dir)?;

    let positives = rows.iter().filter(|r| r.label == 1).count();
    println!(
        "wrote {} pairs ({} positive, {} negative) to {}",
        rows.len(),
        positives,
        rows.len() - positives,
        dest.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs, file: &FileConfig, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let data = args
        .data
        .clone()
        .or_else(|| file.data.clone())
        .ok_or_else(|| usage("train needs a corpus root (--data or 'data:')"))?;
    let defaults = TrainConfig::default();
    let out = out.unwrap_or_else(|| defaults.checkpoint_dir.clone());
    let cfg = TrainConfig {
        mode: args.mode.or(file.mode).unwrap_or(defaults.mode),
        backbone: args.backbone.or(file.backbone).unwrap_or(defaults.backbone),
        lr: args.lr.or(file.lr).unwrap_or(defaults.lr),
        weight_decay: args
            .weight_decay
            .or(file.weight_decay)
            .unwrap_or(defaults.weight_decay),
        batch_size: args
            .batch_size
            .or(file.batch_size)
            .unwrap_or(defaults.batch_size),
        epochs: args.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        margin: args.margin.or(file.margin),
        seed,
        val_fraction: args
            .val_fraction
            .or(file.val_fraction)
            .unwrap_or(defaults.val_fraction),
        image_size: args
            .image_size
            .or(file.image_size)
            .unwrap_or(defaults.image_size),
        threads: args.threads.or(file.threads).unwrap_or(defaults.threads),
        checkpoint_dir: out.clone(),
    };
    cfg.validate()?;

    let mut resolved = Resolved::new("train");
    resolved.push("seed", seed);
    resolved.push_path("data", &data);
    resolved.push_path("out", &out);
    resolved.push("mode", cfg.mode);
    resolved.push("backbone", cfg.backbone);
    resolved.push("lr", cfg.lr);
    resolved.push("weight_decay", cfg.weight_decay);
    resolved.push("batch_size", cfg.batch_size);
    resolved.push("epochs", cfg.epochs);
    if let Some(margin) = cfg.margin {
        resolved.push("margin", margin);
    }
    resolved.push("val_fraction", cfg.val_fraction);
    resolved.push("image_size", format!("{}x{}", cfg.image_size.0, cfg.image_size.1));
    resolved.push("threads", cfg.threads);
    resolved.write(&out)?;

    let corpus = scan_corpus(&data.join("train"), Split::Train).context("scanning train split")?;
    let report = train::<f32>(&cfg, &corpus).context("training")?;

    let mut history = serde_json::to_string_pretty(&report.history)?;
    history.push('\n');
    std::fs::write(out.join("history.json"), history)?;

    let (best_epoch, best_path) = select_best(&report.history, &out)?;
    let last = report
        .history
        .epochs
        .last()
        .expect("at least one epoch trained");
    println!(
        "trained {} epochs of {} batches; final train loss {:.6}, val loss {:.6}",
        report.history.epochs.len(),
        report.epoch_len,
        last.train_loss,
        last.val_loss
    );
    println!("best epoch {best_epoch}: {}", best_path.display());
    Ok(())
}

fn cmd_evaluate(
    args: &EvaluateArgs,
    file: &FileConfig,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<()> {
    let data = args
        .data
        .clone()
        .or_else(|| file.data.clone())
        .ok_or_else(|| usage("evaluate needs a corpus root (--data or 'data:')"))?;
    let checkpoint = args
        .checkpoint
        .clone()
        .or_else(|| file.checkpoint.clone())
        .ok_or_else(|| usage("evaluate needs a checkpoint (--checkpoint or 'checkpoint:')"))?;
    let pairs = args
        .pairs
        .clone()
        .or_else(|| file.pairs.clone())
        .unwrap_or_else(|| data.join("test_pairs.csv"));
    let eval_batch = args.eval_batch.or(file.eval_batch).unwrap_or(EVAL_BATCH);
    let out = out.unwrap_or_else(|| PathBuf::from("eval"));

    let ckpt = load_checkpoint::<f32>(&checkpoint).context("loading checkpoint")?;
    let cfg = PreprocessConfig {
        target: ckpt.net.input_hw(),
        ..PreprocessConfig::default()
    };
    let scored = score_pairs(&ckpt, &data.join("test"), &pairs, &cfg, eval_batch)
        .context("scoring pairs")?;
    let report = build_report(&scored)?;
    emit_report(&report, &out)?;

    let mut resolved = Resolved::new("evaluate");
    resolved.push("seed", seed);
    resolved.push_path("data", &data);
    resolved.push_path("out", &out);
    resolved.push_path("checkpoint", &checkpoint);
    resolved.push_path("pairs", &pairs);
    resolved.push("eval_batch", eval_batch);
    resolved.write(&out)?;

    let line = serde_json::json!({
        "threshold": report.threshold,
        "auc": report.auc,
        "acc": report.acc,
        "far": report.far,
        "frr": report.frr,
        "n_pos": report.n_pos,
        "n_neg": report.n_neg,
    });
    println!("{line}");
    eprintln!(
        "AUC {:.4} | ACC {:.2}% | FAR {:.2}% | FRR {:.2}% | tau* {:.6} | {} pos / {} neg pairs",
        report.auc, report.acc, report.far, report.frr, report.threshold, report.n_pos,
        report.n_neg
    );
    eprintln!("report written to {}", out.display());
    Ok(())
}
