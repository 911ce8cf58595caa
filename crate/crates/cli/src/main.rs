use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wmh_transfer::data::DomainTag;
use wmh_transfer::transfer::Scenario;
use wmh_cli::commands::{cmd_adapt, cmd_grid, cmd_report, cmd_segment, cmd_synth, cmd_train, sibling, MANIFEST_FILE};
use wmh_cli::config::full_grid;
use wmh_cli::{CliError, ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "wmh-transfer", version, about = "Layer-freezing transfer learning on synthetic two-domain MRI slices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source and target datasets and their manifest.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network from scratch on one domain.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "source")]
        domain: DomainTag,
        /// Train on the first N patients of the seeded ordering instead of all.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint path; the history CSV is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a source checkpoint on target patients.
    Adapt {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        size: usize,
        /// Number of shallowest layers kept frozen.
        #[arg(long)]
        freeze: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one volume with a checkpoint.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        /// Output directory for probability.txt and mask.pgm.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run scenarios 1-3 over target sizes, freeze indices and seeds.
    Grid {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        freeze: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
        /// Scenario numbers: 1 direct, 2 scratch, 3 adapted.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        scenario: Vec<u8>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Sizes 2..=12, 25, 50, 100 and every freeze index.
        #[arg(long)]
        full_grid: bool,
        /// Results CSV; heatmap and timing CSVs are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a results CSV.
    Report {
        results: PathBuf,
    },
}

fn load(config: Option<PathBuf>) -> Result<ExperimentConfig> {
    ExperimentConfig::load_or_default(config.as_deref())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = load(config)?;
            let manifest = cmd_synth(&cfg, &out)?;
            println!("wrote {} volumes to {}", manifest.entries.len(), out.join(MANIFEST_FILE).display());
        }
        Command::Train { manifest, domain, size, config, seed, out } => {
            let cfg = load(config)?;
            let ckpt = cmd_train(&manifest, domain, &cfg, size, seed.unwrap_or(cfg.seed), &out)?;
            println!(
                "best epoch {} of {}, val AUC {:.4}; saved {} and {}",
                ckpt.best_epoch,
                ckpt.history.len(),
                ckpt.best_val_auc,
                out.display(),
                sibling(&out, "_history.csv").display()
            );
        }
        Command::Adapt { source, manifest, size, freeze, config, seed, out } => {
            let cfg = load(config)?;
            let ckpt = cmd_adapt(&source, &manifest, size, freeze, &cfg, seed.unwrap_or(cfg.seed), &out)?;
            println!("{}: best epoch {}, val AUC {:.4}", ckpt.provenance, ckpt.best_epoch, ckpt.best_val_auc);
        }
        Command::Segment { checkpoint, volume, out, threshold, config } => {
            let cfg = load(config)?;
            let r = cmd_segment(&checkpoint, &volume, &out, threshold.unwrap_or(cfg.threshold))?;
            println!("dice {:.4} (overlap {}, predicted {}, reference {})", r.dice, r.counts.0, r.counts.1, r.counts.2);
        }
        Command::Grid { source, manifest, config, sizes, freeze, seed, scenario, jobs, threshold, full_grid: full, out } => {
            let mut cfg = load(config)?;
            if full {
                (cfg.sizes, cfg.freeze) = full_grid();
            }
            cfg.sizes = sizes.unwrap_or(cfg.sizes);
            cfg.freeze = freeze.unwrap_or(cfg.freeze);
            cfg.seeds = seed.unwrap_or(cfg.seeds);
            cfg.jobs = jobs.unwrap_or(cfg.jobs);
            cfg.threshold = threshold.unwrap_or(cfg.threshold);
            cfg.validate()?;
            let scenarios = scenario.into_iter().map(Scenario::from_number).collect::<wmh_transfer::Result<Vec<_>>>()?;
            let report = cmd_grid(&source, &manifest, &cfg, &scenarios, &cfg.seeds, cfg.jobs, &out)?;
            for r in report.records.iter().filter(|r| !r.is_ok()) {
                eprintln!("cell {:?} failed: {}", r.sort_key(), r.error.as_deref().unwrap_or(""));
            }
            println!("{} cells written to {}", report.records.len(), out.display());
            if report.failures() > 0 {
                return Err(CliError::GridFailed(report.failures()));
            }
        }
        Command::Report { results } => print!("{}", cmd_report(&results)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
