use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mar_cli::commands;
use mar_cli::config::{RunConfig, Scale};
use mar_cli::exit_code_for;

/// CT metal artifact reduction: simulation, classical solver, unrolled
/// network training, reconstruction, evaluation and benchmarking.
#[derive(Parser)]
#[command(name = "mar", version, about)]
struct Cli {
    /// Configuration file (INI-style sections; unknown keys are errors).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Random seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Geometry scale preset.
    #[arg(long, global = true, default_value = "desk")]
    scale: String,

    /// Worker threads (0 = automatic).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate paired clean/corrupted corpora (train/ and test/).
    Simulate,
    /// Run the classical proximal-gradient solver on one case bundle.
    Solve {
        /// Case bundle directory.
        #[arg(long)]
        case: PathBuf,
        /// Take the dictionary from a trained checkpoint instead of the
        /// seeded random bank.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the unrolled network on a corpus directory.
    Train {
        /// Corpus of case bundles (e.g. the simulate output's train/).
        #[arg(long)]
        corpus: PathBuf,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruct a case or corpus with a trained checkpoint.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A single case bundle or a corpus directory.
        #[arg(long)]
        case: PathBuf,
    },
    /// Evaluate reconstructions against a corpus's ground truth.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        /// Reconstruction directories (method name = directory name).
        #[arg(long)]
        recon: Vec<PathBuf>,
    },
    /// Parameter count and reconstruction timing for a checkpoint.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image size for the timing runs.
        #[arg(long, default_value_t = 128)]
        image_size: usize,
        /// Timing repetitions (at least 20).
        #[arg(long, default_value_t = 20)]
        runs: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, mar_cli::config::ConfigError> {
    let scale = Scale::parse(&cli.scale)?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, scale)?,
        None => RunConfig::defaults(scale),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.jobs > 0 {
        cfg.jobs = cli.jobs;
    }
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &RunConfig) -> mar_core::Result<()> {
    match &cli.command {
        Command::Simulate => {
            let cases = commands::cmd_simulate(cfg, &cli.out)?;
            println!("wrote {} cases under {}", cases.len(), cli.out.display());
        }
        Command::Solve { case, checkpoint } => {
            let state = commands::cmd_solve(cfg, case, &cli.out, checkpoint.as_deref())?;
            let final_objective = state.objective_trace.last().copied().unwrap_or(f64::NAN);
            println!(
                "solver finished after {} iterations, objective {final_objective:.6e}",
                state.iters_run
            );
        }
        Command::Train { corpus, resume } => {
            let log = commands::cmd_train(cfg, corpus, &cli.out, resume.as_deref())?;
            println!(
                "trained {} steps, loss {} -> {}",
                log.rows.len(),
                log.first_loss().unwrap_or(f64::NAN),
                log.last_loss().unwrap_or(f64::NAN)
            );
        }
        Command::Reconstruct { checkpoint, case } => {
            let outputs = commands::cmd_reconstruct(cfg, checkpoint, case, &cli.out)?;
            println!("reconstructed {} cases into {}", outputs.len(), cli.out.display());
        }
        Command::Eval { corpus, recon } => {
            let path = commands::cmd_eval(cfg, corpus, recon, &cli.out)?;
            println!("metrics written to {}", path.display());
        }
        Command::Bench {
            checkpoint,
            image_size,
            runs,
        } => {
            let report = commands::cmd_bench(cfg, checkpoint, *image_size, *runs, &cli.out)?;
            print!("{report}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    if cfg.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build_global()
        {
            eprintln!("failed to configure {} worker threads: {e}", cfg.jobs);
        }
    }
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
