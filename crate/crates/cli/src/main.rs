use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use irm_cli::config::{self, CmnistRunConfig, IcpConfig, LandscapeConfig, SyntheticConfig, TheoryConfig, Validate};
use irm_cli::{CliError, Manifest, RunOutput};
use serde::{de::DeserializeOwned, Serialize};

#[derive(Parser)]
#[command(name = "irm", version, about = "Invariant risk minimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config; defaults are used for absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: out/<subcommand>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Penalty curves along Φ = Diag(1, c) on the two-variable example.
    Landscape,
    /// ERM / IRM / ICP on the eight chain-SEM setups.
    Synthetic,
    /// Colored MNIST: ERM, IRM and the grayscale model.
    Cmnist,
    /// Theory verifiers and orthogonality ellipsoids.
    Theory,
    /// Invariant causal prediction on one chain-SEM setup.
    Icp,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Landscape => "landscape",
            Command::Synthetic => "synthetic",
            Command::Cmnist => "cmnist",
            Command::Theory => "theory",
            Command::Icp => "icp",
        }
    }
}

fn load<C: DeserializeOwned + Default + Validate>(cli: &Cli) -> Result<C, CliError> {
    let text = match &cli.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|source| CliError::Io { path: p.clone(), source })?),
        None => None,
    };
    let mut cfg: C = config::parse(text.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn finish<C: Serialize>(cli: &Cli, seed: u64, cfg: &C, output: RunOutput, start: Instant) -> Result<(), CliError> {
    let name = cli.command.name();
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out").join(name));
    let manifest = Manifest::new(name, seed, cfg, &output, start.elapsed());
    irm_cli::write_run(&dir, &output, &manifest)?;
    for (f, _) in &output.files {
        println!("{}", dir.join(f).display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let start = Instant::now();
    match cli.command {
        Command::Landscape => {
            let cfg: LandscapeConfig = load(cli)?;
            finish(cli, cfg.seed, &cfg, irm_cli::run_landscape(&cfg)?, start)
        }
        Command::Synthetic => {
            let cfg: SyntheticConfig = load(cli)?;
            finish(cli, cfg.seed, &cfg, irm_cli::run_synthetic(&cfg, cli.jobs)?, start)
        }
        Command::Cmnist => {
            let cfg: CmnistRunConfig = load(cli)?;
            finish(cli, cfg.seed, &cfg, irm_cli::run_cmnist(&cfg, cli.jobs)?, start)
        }
        Command::Theory => {
            let cfg: TheoryConfig = load(cli)?;
            let out = irm_cli::run_theory(&cfg)?;
            if out.summary["all_pass"] == false {
                eprintln!("theory: some checks failed, see theory_report.csv");
            }
            finish(cli, cfg.seed, &cfg, out, start)
        }
        Command::Icp => {
            let cfg: IcpConfig = load(cli)?;
            finish(cli, cfg.seed, &cfg, irm_cli::run_icp(&cfg)?, start)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("irm {}: {e}", cli.command.name());
            ExitCode::FAILURE
        }
    }
}
