use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aggrekit::config::ScenarioConfig;
use aggrekit::error::CliError;
use aggrekit::stages::{self, Verb};

#[derive(Parser)]
#[command(
    name = "aggrekit",
    version,
    about = "Simulation and inverse-reconstruction toolkit for nonlocal \
             aggregation-diffusion systems on the torus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the forward solver and persist snapshots
    Simulate(RunArgs),
    /// Extract first and second variations from an epsilon ladder
    Linearize(RunArgs),
    /// Recover spatially varying diffusion from boundary Laplace data
    InvertDiffusion(RunArgs),
    /// Recover a drift or potential coupling matrix from probe runs
    InvertAdvection(RunArgs),
    /// Recover kernel normalization or a full kernel transform
    InvertKernel(RunArgs),
    /// Re-emit the CSV tables of a completed run
    Report(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration
    #[arg(long)]
    config: PathBuf,
    /// Output root (default: $AGGREKIT_OUT, then "aggrekit-out")
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = library default)
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Seed recorded in the manifest, overriding the config's
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (verb, args) = match &cli.command {
        Command::Simulate(a) => (Verb::Simulate, a),
        Command::Linearize(a) => (Verb::Linearize, a),
        Command::InvertDiffusion(a) => (Verb::InvertDiffusion, a),
        Command::InvertAdvection(a) => (Verb::InvertAdvection, a),
        Command::InvertKernel(a) => (Verb::InvertKernel, a),
        Command::Report(a) => (Verb::Report, a),
    };
    match run(verb, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(verb: Verb, args: &RunArgs) -> Result<(), CliError> {
    aggrekit_core::parallel::configure_threads(args.threads)
        .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    let (config, raw) = ScenarioConfig::load(&args.config)?;
    let out_root = args
        .out
        .clone()
        .or_else(|| std::env::var_os(stages::OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(stages::DEFAULT_OUT));
    let seed = args.seed.unwrap_or(config.seed);
    let outcome = stages::execute(verb, &config, &raw, &out_root, seed)?;
    for rel in &outcome.written {
        println!("wrote {rel}");
    }
    println!("manifest {}", outcome.manifest_path.display());
    Ok(())
}
