use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use frl_cli::commands;
use frl_cli::{ExperimentConfig, Overrides};

/// Numerical laboratory for multiscale Cantor measures: search Λ(p)
/// alphabets, build random-translate stages, and measure Fourier decay,
/// restriction growth, and sharpness separations.
#[derive(Parser)]
#[command(name = "frl", version, about)]
struct Cli {
    /// Config file (TOML canonical; .json accepted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the RNG seed (FRL_SEED env var wins over this).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the target dimension α.
    #[arg(long, global = true)]
    alpha: Option<f64>,

    /// Override the ambient dimension d.
    #[arg(long, global = true)]
    dim: Option<usize>,

    /// Override the experiment exponent p.
    #[arg(long, global = true)]
    p: Option<f64>,

    /// Override the stage depth k.
    #[arg(long, global = true)]
    depth: Option<usize>,

    /// Override the first branching factor n₁.
    #[arg(long, global = true)]
    n1: Option<u64>,

    /// Override the requested sandwich constant c₀.
    #[arg(long, global = true)]
    c0: Option<f64>,

    /// Override the node budget.
    #[arg(long, global = true)]
    node_budget: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Cap the worker thread count (results are thread-count independent).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search and certify Λ(p) alphabets for the plan levels.
    SearchAlphabet {
        /// Search a single level (1-based) instead of all of them.
        #[arg(long)]
        level: Option<usize>,
    },
    /// Build the Cantor stage from searched alphabets and persist it.
    Build {
        /// Alphabet files (defaults to the search-alphabet outputs in out_dir).
        #[arg(long)]
        alphabets: Vec<PathBuf>,
    },
    /// Profile |μ̂| decay over frequency annuli and fit the exponent.
    Decay { stage: PathBuf },
    /// Measure localized restriction ratios over nested sub-stages.
    Restrict { stage: PathBuf },
    /// Measure L^p growth of μ̂ below and above the critical exponent.
    Sharpness { stage: PathBuf },
    /// Contrast the deterministic ternary-style stage with a random one.
    CompareTernary,
    /// Search, build, then run every experiment listed in the config.
    Run,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }
    let overrides = Overrides {
        alpha: cli.alpha,
        d: cli.dim,
        p: cli.p,
        depth: cli.depth,
        n1: cli.n1,
        c0: cli.c0,
        seed: cli.seed,
        node_budget: cli.node_budget,
        out_dir: cli.out_dir,
    };
    let config = match ExperimentConfig::load(cli.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::SearchAlphabet { level } => {
            commands::cmd_search_alphabet(&config, level).map(|_| ())
        }
        Command::Build { alphabets } => commands::cmd_build(&config, &alphabets).map(|_| ()),
        Command::Decay { stage } => commands::cmd_decay(&config, &stage).map(|_| ()),
        Command::Restrict { stage } => commands::cmd_restrict(&config, &stage).map(|_| ()),
        Command::Sharpness { stage } => commands::cmd_sharpness(&config, &stage).map(|_| ()),
        Command::CompareTernary => commands::cmd_compare_ternary(&config).map(|_| ()),
        Command::Run => commands::cmd_run(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
