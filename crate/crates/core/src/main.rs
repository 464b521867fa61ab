//! Experiment runner CLI.
//!
//! Exit codes: 0 success, 2 config error, 3 training divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hyperadapt::config::ExperimentConfig;
use hyperadapt::runner::{self, RunError, SweepAxis};

#[derive(Parser)]
#[command(
    name = "hyperadapt",
    about = "Patient-conditioned parameter adaptation on synthetic subgroup benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run all configured methods over all seeds and write reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's seed list (comma-separated).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Sweep adapter capacity along one axis and emit a plot-ready table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// rank | depth
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the four-row adapter ablation (dense, channelwise, +lowrank, +sharing).
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Allow dense generation above the configured parameter cap.
        #[arg(long)]
        force_dense: bool,
    },
    /// Train HyperAdapt and export per-sample embeddings of a layer.
    ExportEmbeddings {
        #[arg(long)]
        config: PathBuf,
        /// pooled | logits
        #[arg(long)]
        layer: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &std::path::Path, out: Option<PathBuf>, seeds: Option<Vec<u64>>) -> Result<ExperimentConfig, RunError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(dir) = out {
        cfg.run.output_dir = dir;
    }
    if let Some(seeds) = seeds {
        cfg.run.seeds = seeds;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute() -> Result<(), RunError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out, seeds } => {
            let cfg = load_config(&config, out, seeds)?;
            let out_dir = cfg.run.output_dir.clone();
            let outcome = runner::run(&cfg, &out_dir)?;
            for agg in &outcome.aggregates {
                println!(
                    "{}: ACC {:.4}  F1 {:.4}  worst-group F1 {:.4}  Eopp1 {:.4}  Eodds {:.4}",
                    agg.method,
                    agg.mean.accuracy,
                    agg.mean.f1,
                    agg.mean.worst_group_f1,
                    agg.mean.eopp1,
                    agg.mean.eodds
                );
            }
            println!("wrote {} report files to {}", outcome.report_paths.len(), out_dir.display());
            Ok(())
        }
        Command::Sweep { config, axis, out } => {
            let cfg = load_config(&config, out, None)?;
            let axis: SweepAxis = axis
                .parse()
                .map_err(|e: String| RunError::Config(hyperadapt::config::ConfigError::Invalid(vec![e])))?;
            let out_dir = cfg.run.output_dir.clone();
            let table = runner::sweep(&cfg, axis, &out_dir)?;
            println!("setting\tparams\tgenerated\tACC\tF1");
            for row in &table.rows {
                println!(
                    "{}\t{}\t{}\t{:.4}\t{:.4}",
                    row.setting,
                    row.generator_params,
                    row.generated_per_sample,
                    row.accuracy,
                    row.f1
                );
            }
            Ok(())
        }
        Command::Ablate { config, out, force_dense } => {
            let cfg = load_config(&config, out, None)?;
            let out_dir = cfg.run.output_dir.clone();
            let table = runner::ablate(&cfg, &out_dir, force_dense)?;
            println!("channelwise\tlowrank\tsharing\tACC\tF1\tparams");
            for row in &table.rows {
                let mark = |b: bool| if b { "yes" } else { "no" };
                println!(
                    "{}\t{}\t{}\t{:.4}\t{:.4}\t{}",
                    mark(row.channelwise),
                    mark(row.lowrank),
                    mark(row.sharing),
                    row.accuracy,
                    row.f1,
                    row.generator_params
                );
            }
            Ok(())
        }
        Command::ExportEmbeddings { config, layer, out } => {
            let cfg = load_config(&config, out, None)?;
            let out_dir = cfg.run.output_dir.clone();
            let path = runner::export_embeddings(&cfg, &layer, &out_dir)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_config_error() {
                ExitCode::from(2)
            } else if err.is_divergence() {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
