use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use splitweak::harness::{
    run_convergence, run_hjm_demo, run_list_models, run_selftest, run_supermartingale, RunOptions,
};

/// Splitting schemes for S(P)DEs with weighted weak-error studies.
#[derive(Parser)]
#[command(name = "splitweak", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for CSVs and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = all cores). Outputs do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Also compute the non-derivative variant of the curve norm (hjm-demo).
    #[arg(long, global = true)]
    debug_hjm_norm: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Weighted weak errors per step count and fitted convergence orders.
    Convergence,
    /// Moment-growth exponent and supermartingale bound violations.
    Supermartingale,
    /// Forward-curve snapshots and the bond-payoff convergence table.
    HjmDemo,
    /// List the built-in models.
    ListModels,
    /// Run the invariant suite; exits nonzero on any failure.
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
        {
            eprintln!("error: cannot configure {} workers: {e}", cli.workers);
            return ExitCode::from(2);
        }
    }
    let opts = RunOptions {
        config_path: cli.config,
        out_dir: cli.out,
        seed_override: cli.seed,
        debug_hjm_norm: cli.debug_hjm_norm,
    };
    let code = match cli.command {
        Command::Convergence => run_convergence(&opts),
        Command::Supermartingale => run_supermartingale(&opts),
        Command::HjmDemo => run_hjm_demo(&opts),
        Command::ListModels => run_list_models(),
        Command::Selftest => run_selftest(),
    };
    ExitCode::from(code.clamp(0, 255) as u8)
}
