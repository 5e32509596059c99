//! `smoothcert`: pre-train, fine-tune, probe, certify, and report on
//! Gaussian-smoothed classifiers.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on numeric
//! aborts (diverged training), 1 otherwise.

use clap::{Args, Parser, Subcommand};
use smoothcert_core::harness::{
    self, data, Mode, RunConfig,
};
use smoothcert_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "smoothcert", version, about = "Denoising-masked-autoencoder pre-training and randomized-smoothing certification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's initial checkpoint.
    #[arg(long, value_name = "CKPT")]
    init_from: Option<PathBuf>,
    /// Override the config's output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Jointly train encoder and decoder on corrupt-and-reconstruct.
    Pretrain(RunArgs),
    /// Robust fine-tuning of encoder and classification head.
    Finetune(RunArgs),
    /// Train a normalization layer plus linear head on a frozen encoder.
    Probe(RunArgs),
    /// Certify a trained model over an evaluation set.
    Certify(RunArgs),
    /// Aggregate certification TSVs into certified-accuracy tables.
    Report(RunArgs),
    /// Generate a synthetic class-conditional dataset.
    MakeData(MakeDataArgs),
}

#[derive(Args)]
struct MakeDataArgs {
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    count: usize,
    /// Square image side length.
    #[arg(long)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
}

fn load(args: &RunArgs) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(ckpt) = &args.init_from {
        cfg.init_from = Some(ckpt.clone());
    }
    if let Some(dir) = &args.out {
        cfg.out_dir = Some(dir.clone());
    }
    Ok(cfg)
}

fn run(command: &Command) -> Result<(), Error> {
    match command {
        Command::Pretrain(args) => {
            let cfg = load(args)?;
            let ckpt = harness::run_pretrain(&cfg)?;
            println!(
                "pretrain done: {} epochs, final loss {:.6}; checkpoints in {}",
                ckpt.meta.epoch,
                ckpt.meta.loss_history.last().copied().unwrap_or(f64::NAN),
                cfg.out_dir().display()
            );
        }
        Command::Finetune(args) => {
            let cfg = load(args)?;
            let ckpt = harness::run_finetune(&cfg)?;
            println!(
                "finetune done: {} epochs, final loss {:.6}; checkpoints in {}",
                ckpt.meta.epoch,
                ckpt.meta.loss_history.last().copied().unwrap_or(f64::NAN),
                cfg.out_dir().display()
            );
        }
        Command::Probe(args) => {
            let cfg = load(args)?;
            let ckpt = harness::run_probe(&cfg)?;
            println!(
                "probe done: {} epochs, final loss {:.6}; checkpoints in {}",
                ckpt.meta.epoch,
                ckpt.meta.loss_history.last().copied().unwrap_or(f64::NAN),
                cfg.out_dir().display()
            );
        }
        Command::Certify(args) => {
            let cfg = load(args)?;
            cfg.validate_for(Mode::Certify)?;
            let results = harness::run_certify(&cfg)?;
            let certified = results.iter().filter(|r| r.prediction.is_some()).count();
            let correct = results.iter().filter(|r| r.correct).count();
            println!(
                "certify done: {} examples, {certified} certified, {correct} correct; {} written",
                results.len(),
                cfg.out_dir().join("certify.tsv").display()
            );
        }
        Command::Report(args) => {
            let cfg = load(args)?;
            let (text, _csv) = harness::run_report(&cfg)?;
            print!("{text}");
        }
        Command::MakeData(args) => {
            let ds = data::make_synthetic(args.seed, args.count, args.size, args.classes)?;
            data::save_dataset(&ds, &args.out)?;
            println!(
                "wrote {} examples ({} classes, {}x{}) to {}",
                ds.len(),
                ds.num_classes,
                args.size,
                args.size,
                args.out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::Format { .. } => ExitCode::from(2),
                Error::Numeric { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
