use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use primeq::driver::{self, exit_code};
use primeq::io::load_config;
use primeq::{Error, Result};

/// Thread-count override for the rayon pool.
const THREADS_ENV: &str = "PRIMEQ_THREADS";

#[derive(Parser)]
#[command(name = "primeq", version, about = "Primitive equations with anisotropic horizontal viscosity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Nonlinear evolution in the configured mode (imex, picard or linearized).
    Run {
        config: PathBuf,
        /// Overrides `output_dir`.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Galerkin and grid solutions of the linear problem with the energy bound.
    Linearized {
        config: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Time-step and resolution refinement with observed orders.
    Convergence {
        config: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Continuation over the configured eps ladder.
    EpsStudy {
        config: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Invariant audit and Rayleigh report for a stored snapshot.
    Check {
        snapshot: PathBuf,
        #[arg(long)]
        eta: Option<f64>,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

fn config_with(path: &Path, output: Option<PathBuf>) -> Result<primeq::io::RunConfig> {
    let mut c = load_config(path)?;
    if let Some(o) = output {
        c.output_dir = o;
    }
    Ok(c)
}

fn dispatch(cmd: Command) -> Result<()> {
    configure_threads()?;
    match cmd {
        Command::Run { config, output } => driver::run_command(&config_with(&config, output)?),
        Command::Linearized { config, output } => {
            let s = driver::linearized_command(&config_with(&config, output)?)?;
            if let Some(last) = s.last() {
                println!(
                    "t = {}: relative distance {:.3e}, energy {:.4e} <= bound {:.4e}",
                    last.t, last.distance, last.energy, last.bound
                );
            }
            Ok(())
        }
        Command::Convergence { config, output } => {
            let (dt, dx) = driver::convergence_command(&config_with(&config, output)?)?;
            println!("dt orders: {:?}", dt.orders);
            println!("dx orders: {:?}", dx.orders);
            Ok(())
        }
        Command::EpsStudy { config, output } => {
            for r in driver::eps_study_command(&config_with(&config, output)?)? {
                let d = r.distance_to_next.map_or(String::from("-"), |d| format!("{d:.4e}"));
                println!("eps = {:<10} t = {:<8} distance to next {d}", r.eps, r.final_t);
            }
            Ok(())
        }
        Command::Check { snapshot, eta } => {
            print!("{}", driver::check_command(&snapshot, eta)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = dispatch(cli.command);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&result) as u8)
}
