//! `fera` command-line interface: analysis, training, sampling, routing
//! comparison, ablation sweeps and gradient self-checks.

mod commands;
mod config;
mod svg;

use clap::{Parser, Subcommand};
use commands::RunContext;
use config::RunConfig;
use fera_core::Result;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fera", about = "Frequency-energy routed adaptation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// INI-style configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for CSVs, SVGs, checkpoints and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Override the command's primary seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override single keys: --set section.key=value (repeatable).
    #[arg(long = "set", value_name = "KV")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Frequency-band energy evolution over the forward process.
    Analyze(CommonArgs),
    /// Per-band SNR table and crossing steps.
    Snr(CommonArgs),
    /// Pretrain the base denoiser or adapt experts and router.
    Train(CommonArgs),
    /// Ancestral sampling from a checkpoint.
    Sample(CommonArgs),
    /// Soft frequency routing vs discrete timestep switching.
    RouteCompare(CommonArgs),
    /// Cross-product ablation sweep.
    Ablate(CommonArgs),
    /// Gradient self-checks; nonzero exit on failure.
    Gradcheck(CommonArgs),
}

fn apply_seed_override(cmd_name: &str, cfg: &mut RunConfig, seed: Option<u64>) {
    let Some(s) = seed else { return };
    match cmd_name {
        "analyze" => cfg.analyze_seed = s,
        "snr" => cfg.snr_seed = s,
        "train" => cfg.train_seed = s,
        "sample" => cfg.sample_seed = s,
        "route-compare" => cfg.compare_seed = s,
        "ablate" => cfg.ablate_seeds = vec![s],
        _ => {}
    }
}

fn run(cmd: &Command) -> Result<()> {
    let (name, args): (&str, &CommonArgs) = match cmd {
        Command::Analyze(a) => ("analyze", a),
        Command::Snr(a) => ("snr", a),
        Command::Train(a) => ("train", a),
        Command::Sample(a) => ("sample", a),
        Command::RouteCompare(a) => ("route-compare", a),
        Command::Ablate(a) => ("ablate", a),
        Command::Gradcheck(a) => ("gradcheck", a),
    };
    let mut cfg = RunConfig::load(args.config.as_deref(), &args.sets)?;
    apply_seed_override(name, &mut cfg, args.seed);
    let mut ctx = RunContext::create(&args.out, &cfg)?;
    let status = match cmd {
        Command::Analyze(_) => commands::analyze::run(&cfg, &mut ctx),
        Command::Snr(_) => commands::snr::run(&cfg, &mut ctx),
        Command::Train(_) => commands::train::run(&cfg, &mut ctx),
        Command::Sample(_) => commands::sample::run(&cfg, &mut ctx),
        Command::RouteCompare(_) => commands::route_compare::run(&cfg, &mut ctx),
        Command::Ablate(_) => commands::ablate::run(&cfg, &mut ctx),
        Command::Gradcheck(_) => commands::gradcheck::run(&cfg, &mut ctx),
    };
    ctx.finish(&status);
    status
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(threads) = std::env::var("FERA_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
