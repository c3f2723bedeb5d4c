mod commands;
mod config;
mod error;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::config::{ExperimentConfig, Mode};
use crate::error::CliError;
use crate::output::{sha256_hex, Artifacts};

#[derive(Parser, Debug)]
#[command(name = "eqsel", version, about = "Equilibrium selection experiments for small-noise ergodic control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Omit timestamps from SVG metadata.
    #[arg(long)]
    deterministic: bool,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Equilibria table and regime report per nu.
    Analyze(Common),
    /// Ergodic HJB solutions on the (epsilon, nu) grid.
    Solve(Common),
    /// Monte Carlo stationary estimates.
    Simulate(Common),
    /// Optimal-value curves, slope fits and density overlays.
    Sweep(Common),
    /// Degenerate Riccati pair of a matrix.
    Riccati(Common),
}

fn run(mode: Mode, args: Common) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let cfg = ExperimentConfig::parse(&text)?;
    cfg.validate(mode)?;
    let config_sha = sha256_hex(text.as_bytes());
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set 'output'".into()))?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let timestamp = (!args.deterministic).then(|| {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        format!("unix time {secs}")
    });
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("cannot build thread pool: {e}")))?;
    let art = Artifacts::create(&out, args.deterministic)?;
    let mut ctx = Context {
        cfg,
        seed,
        art,
        timestamp,
    };
    pool.install(|| match mode {
        Mode::Analyze => commands::analyze(&mut ctx),
        Mode::Solve => commands::solve(&mut ctx),
        Mode::Simulate => commands::simulate(&mut ctx),
        Mode::Sweep => commands::sweep(&mut ctx),
        Mode::Riccati => commands::riccati(&mut ctx),
    })?;
    ctx.art.finish(mode, &config_sha, seed, commands::anchors(mode))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (mode, args) = match cli.command {
        Command::Analyze(a) => (Mode::Analyze, a),
        Command::Solve(a) => (Mode::Solve, a),
        Command::Simulate(a) => (Mode::Simulate, a),
        Command::Sweep(a) => (Mode::Sweep, a),
        Command::Riccati(a) => (Mode::Riccati, a),
    };
    match run(mode, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("eqsel: {e}");
            e.exit_code()
        }
    }
}
