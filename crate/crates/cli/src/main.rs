use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use otfseg::NormKind;
use otfseg_cli::commands::{self, BaselineMethod, Domain};
use otfseg_cli::{exit_code, ExperimentConfig};

/// On-the-fly test-time adaptation experiments.
#[derive(Debug, Parser)]
#[command(name = "otfseg", version, about)]
struct Cli {
    /// TOML experiment config; built-in desk defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed and every per-section seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NormArg {
    Adabn,
    Bn,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Direct,
    Tent,
    Oracle,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the source, target and prior-generator corpus datasets.
    Synth,
    /// Pretrain the domain prior generator on the corpus.
    PretrainDpg,
    /// Train a segmentation model.
    Train {
        #[arg(long, value_enum, default_value = "adabn")]
        norm: NormArg,
        /// `target` with `--norm bn` trains the oracle.
        #[arg(long, value_enum, default_value = "source")]
        domain: DomainArg,
    },
    /// Episodic on-the-fly evaluation of the adaptive model.
    Adapt {
        /// Dataset to evaluate; defaults to the target domain.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a comparison method.
    Baseline {
        #[arg(long, value_enum)]
        method: MethodArg,
        /// TENT epochs over the test set.
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Build the comparison grid from run reports.
    Report {
        /// Run directories to include; all runs when empty.
        runs: Vec<PathBuf>,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn run(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = base.resolve(cli.seed, cli.output_dir.clone());
    let force = cli.force;
    match cli.command {
        Command::Synth => {
            for m in commands::synth(&cfg, force)? {
                println!("{}: {} samples ({})", m.root.display(), m.len(), m.domain_tag);
            }
        }
        Command::PretrainDpg => {
            let (dpg, ratio) = commands::pretrain(&cfg, force)?;
            println!("prior generator {}", dpg.fingerprint());
            if let Some(r) = ratio {
                println!("held-out MSE ratio {r:.4}");
            }
        }
        Command::Train { norm, domain } => {
            let norm = match norm {
                NormArg::Adabn => NormKind::AdaBn,
                NormArg::Bn => NormKind::Bn,
            };
            let domain = match domain {
                DomainArg::Source => Domain::Source,
                DomainArg::Target => Domain::Target,
            };
            let m = commands::train(&cfg, norm, domain, force)?;
            println!("model {}", m.fingerprint());
        }
        Command::Adapt { dataset } => {
            let r = commands::adapt(&cfg, dataset.as_deref(), force)?;
            println!("ours on {}: mean Dice {:.4}", r.metadata.target_domain, r.mean_dice());
        }
        Command::Baseline { method, shots, dataset } => {
            let method = match method {
                MethodArg::Direct => BaselineMethod::Direct,
                MethodArg::Tent => BaselineMethod::Tent,
                MethodArg::Oracle => BaselineMethod::Oracle,
            };
            let r = commands::baseline(&cfg, method, shots, dataset.as_deref(), force)?;
            println!("{} on {}: mean Dice {:.4}", r.metadata.method, r.metadata.target_domain, r.mean_dice());
        }
        Command::Report { runs } => print!("{}", commands::report(&cfg, &runs, force)?),
        Command::ShowConfig => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
