//! Command-line front end for the block random matrix laboratory.
//!
//! Every command reads one TOML run configuration (`--config`), applies the
//! documented overrides, and is then a pure function of the resolved config:
//! rerunning with the same file and seed reproduces every output byte for
//! byte. Results land in the configured output directory together with
//! `resolved_config.toml`, the fully explicit echo of the run.
//!
//! Exit codes: `0` success, `2` configuration error, `3` solver or I/O
//! failure, `4` identity-verification failure (`verify` only).

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

mod commands;
mod config;
mod output;

use blockrmt::Error;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "blockrmt",
    version,
    about = "Spectral theory and Monte Carlo diagnostics for coupled block random matrices"
)]
struct Cli {
    /// TOML run configuration (required by every command).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the root seed from the config file.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Override the worker-thread count (0 = one per core).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    /// Override the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Restrict tabular output to one format.
    #[arg(long, global = true, value_name = "FORMAT", value_parser = ["csv", "jsonl"])]
    format: Option<String>,

    /// Validate the config and print the resolved plan without computing.
    #[arg(long, global = true)]
    dry_run: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Deterministic spectral density on a grid around the support.
    Density,
    /// Support edges, curvatures, and the coupling-strength threshold.
    Edges,
    /// Quantiles of the deterministic density and of the semicircle.
    Quantiles,
    /// Monte Carlo run: spectra, edge statistics, and edge-law distances.
    Ensemble,
    /// Largest-block-mass curve across the edge (localization order parameter).
    Mobility,
    /// Resolvent local-law probes on sampled matrices.
    LocalLaw,
    /// Integrate the characteristic flow and check its exact invariants.
    FlowCheck,
    /// Ensemble mean of the two-resolvent loop against its size envelope.
    Loop,
    /// Tracy–Widom edge-law table: moments, optionally the full dump.
    Tw {
        /// Also write the table as `s,F2,f2` rows.
        #[arg(long)]
        dump: bool,
    },
    /// Run the deterministic identity suite; exits 4 on any failure.
    Verify,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Density => "density",
            Command::Edges => "edges",
            Command::Quantiles => "quantiles",
            Command::Ensemble => "ensemble",
            Command::Mobility => "mobility",
            Command::LocalLaw => "local-law",
            Command::FlowCheck => "flow-check",
            Command::Loop => "loop",
            Command::Tw { .. } => "tw",
            Command::Verify => "verify",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn run(cli: Cli) -> blockrmt::Result<ExitCode> {
    blockrmt::linalg::ensure_serial_blas();
    let path = cli
        .config
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut config = RunConfig::load(&path)?;
    config.apply_overrides(cli.seed, cli.workers, cli.out, cli.format)?;

    if cli.dry_run {
        print_plan(cli.command, &config);
        return Ok(ExitCode::SUCCESS);
    }

    match cli.command {
        Command::Density => commands::cmd_density(&config)?,
        Command::Edges => commands::cmd_edges(&config)?,
        Command::Quantiles => commands::cmd_quantiles(&config)?,
        Command::Ensemble => commands::cmd_ensemble(&config)?,
        Command::Mobility => commands::cmd_mobility(&config)?,
        Command::LocalLaw => commands::cmd_local_law(&config)?,
        Command::FlowCheck => commands::cmd_flow_check(&config)?,
        Command::Loop => commands::cmd_loop(&config)?,
        Command::Tw { dump } => commands::cmd_tw(&config, dump)?,
        Command::Verify => {
            if !commands::cmd_verify(&config)? {
                return Ok(ExitCode::from(4));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Describe what the command would do, without touching the file system.
fn print_plan(command: Command, config: &RunConfig) {
    println!("plan: {}", command.name());
    println!(
        "plan: model N = {}, D = {}, seed = {}, workers = {}",
        config.model.n, config.model.d, config.model.seed, config.parallelism.workers
    );
    let work = match command {
        Command::Density => format!("{} grid points", config.density.points),
        Command::Edges => "edge solve only".into(),
        Command::Quantiles => format!("k = {:?}", config.quantiles.k_list),
        Command::Ensemble => format!(
            "{} samples, track_k = {:?}",
            config.ensemble.samples, config.ensemble.track_k
        ),
        Command::Mobility => format!(
            "{} samples, k = 1..={}",
            config.mobility.samples, config.mobility.k_max
        ),
        Command::LocalLaw => format!(
            "{} samples at eta = {:?}",
            config.local_law.samples, config.local_law.eta_list
        ),
        Command::FlowCheck => format!(
            "t in [{}, {}] from z0 = {:?}",
            config.flow.t_span[0], config.flow.t_span[1], config.flow.z0
        ),
        Command::Loop => format!(
            "{} samples, k = {:?}",
            config.loop_.samples, config.loop_.k_list
        ),
        Command::Tw { dump } => format!("tol = {:.1e}, dump = {dump}", config.tw.tol),
        Command::Verify => "deterministic identity suite".into(),
    };
    println!("plan: {work}");
    println!(
        "plan: outputs -> {} as {:?}",
        config.output.directory.display(),
        config.output.formats
    );
    println!("--- resolved config ---");
    print!("{}", config.emit());
}
