use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctbert::pipeline::{self, RunConfig, TrainStage};
use ctbert::Error;

/// Two-stage CT volume classifier.
#[derive(Debug, Parser)]
#[command(name = "ctbert", version)]
struct Cli {
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all run artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset under data_root.
    Synth,
    /// Filter, segment and compose modality stacks for every volume.
    Preprocess {
        #[arg(long)]
        filter_ratio: Option<f64>,
    },
    /// Train one model.
    Train {
        /// 1, 2 or severity.
        #[arg(long)]
        stage: String,
    },
    /// Write window embeddings for every volume.
    Extract,
    /// Write per-volume predictions.
    Predict,
    /// Score predictions and write metrics.json.
    Evaluate {
        /// Defaults to the predictions of the configured segment count.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
}

fn resolve(cli: &Cli) -> ctbert::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &cli.out {
        cfg.set("out", &out.display().to_string())?;
    }
    if let Command::Preprocess { filter_ratio: Some(r) } = &cli.command {
        cfg.set("preprocess.filter_ratio", &r.to_string())?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> ctbert::Result<()> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Synth => {
            let records = pipeline::cmd_synth(&cfg)?;
            println!("wrote {} synthetic volumes to {}", records.len(), cfg.data_root().display());
        }
        Command::Preprocess { .. } => {
            let summary = pipeline::cmd_preprocess(&cfg)?;
            let kept: usize = summary.volumes.iter().map(|v| v.n_kept).sum();
            println!("preprocessed {} volumes, {kept} slices kept, {} warnings", summary.volumes.len(), summary.warnings.len());
        }
        Command::Train { stage } => {
            let stage: TrainStage = stage.parse()?;
            let record = pipeline::cmd_train(&cfg, stage)?;
            println!(
                "{stage}: best epoch {} of {}, val accuracy {:.4}, seed {}",
                record.best_epoch,
                record.epochs.len(),
                record.best_val_accuracy,
                record.seed
            );
        }
        Command::Extract => {
            let entries = pipeline::cmd_extract(&cfg)?;
            println!("embedded {} volumes", entries.len());
        }
        Command::Predict => {
            let preds = pipeline::cmd_predict(&cfg)?;
            println!("predicted {} volumes", preds.len());
        }
        Command::Evaluate { predictions } => {
            let eval = pipeline::cmd_evaluate(&cfg, predictions.as_deref())?;
            print!("{}", eval.table());
        }
    }
    Ok(())
}

fn configure_threads() {
    let Ok(v) = std::env::var("CTBERT_THREADS") else { return };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not cap worker threads: {e}");
            }
        }
        _ => log::warn!("ignoring CTBERT_THREADS={v:?}; expected a positive integer"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    configure_threads();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config(_)) { 1 } else { 2 })
        }
    }
}
