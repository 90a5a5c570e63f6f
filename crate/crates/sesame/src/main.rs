//! Thin command-line wrapper around the library pipelines.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sesame::cli::{self, Overrides, RunConfig};
use sesame::eval::Method;
use sesame::Error;

#[derive(Parser)]
#[command(
    name = "sesame",
    version,
    about = "Bayesian multi-dipole estimation via adaptive SMC"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a batch of synthetic datasets.
    Simulate(CommonArgs),
    /// Localize dipoles in one dataset.
    Localize(CommonArgs),
    /// Analyze a simulated batch with both methods over the prior scale sweep.
    Evaluate(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Analysis mode override: "sesame" or "h-sesame".
    #[arg(long)]
    mode: Option<String>,
    /// Prior scale factor override.
    #[arg(long)]
    k: Option<f64>,
    /// Particle count override.
    #[arg(long)]
    particles: Option<usize>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
}

const EXIT_ERROR: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_INCOMPLETE: u8 = 3;

fn load_config(args: &CommonArgs) -> Result<RunConfig, Error> {
    let mut config = RunConfig::from_file(&args.config)?;
    let mode = match &args.mode {
        Some(s) => Some(s.parse::<Method>()?),
        None => None,
    };
    cli::apply_overrides(
        &mut config,
        &Overrides {
            seed: args.seed,
            mode,
            k: args.k,
            particles: args.particles,
            out: args.out.clone(),
        },
    );
    Ok(config)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_)
        | Error::InvalidGrid(_)
        | Error::ShapeMismatch { .. }
        | Error::NonFinite { .. } => EXIT_CONFIG,
        _ => EXIT_ERROR,
    }
}

fn main() -> ExitCode {
    if let Ok(workers) = std::env::var("SESAME_WORKERS") {
        if let Ok(n) = workers.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }

    let cli = Cli::parse();
    let result: Result<u8, Error> = match &cli.command {
        Command::Simulate(args) => load_config(args).and_then(|config| {
            let out = cli::cmd_simulate(&config)?;
            eprintln!(
                "simulate: wrote {} datasets to {}",
                out.dataset_dirs.len(),
                out.batch_dir.display()
            );
            Ok(0)
        }),
        Command::Localize(args) => load_config(args).and_then(|config| {
            let out = cli::cmd_localize(&config)?;
            eprintln!(
                "localize: est_n_dipoles {} at {:?}, summary {}",
                out.summary.est_n_dipoles,
                out.summary.est_locations,
                out.summary_path.display()
            );
            if out.complete {
                Ok(0)
            } else {
                eprintln!("localize: hit max_iterations before alpha reached 1");
                Ok(EXIT_INCOMPLETE)
            }
        }),
        Command::Evaluate(args) => load_config(args).and_then(|config| {
            let out = cli::cmd_evaluate(&config)?;
            eprintln!(
                "evaluate: {} datasets, {} cells, report {}",
                out.n_datasets,
                out.n_cells,
                out.report_dir.display()
            );
            Ok(0)
        }),
    };

    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
