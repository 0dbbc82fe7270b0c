use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sniftle_cli::{cmd_bound_study, cmd_point, cmd_scan, cmd_validate, CliError, Invocation};

#[derive(Parser)]
#[command(
    name = "sniftle",
    version,
    about = "FTLE, stochastic sensitivity and uncertainty measures for flows"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, env = "SNIFTLE_WORKERS")]
    workers: Option<usize>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PointArgs {
    /// Initial condition, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    xi0: Option<Vec<f64>>,
    #[arg(long)]
    time: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Measures and covariance terms at one initial condition.
    Point {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        point: PointArgs,
    },
    /// Measure fields over a grid of initial conditions.
    Scan {
        #[command(flatten)]
        common: Common,
        /// Continue from a binary checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write a binary checkpoint while scanning.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Monte Carlo check of the Gaussian linearization.
    Validate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        point: PointArgs,
    },
    /// Log-log slope of the coupling moments against one scale.
    BoundStudy {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        point: PointArgs,
    },
}

type Runner = fn(&Invocation, &mut dyn std::io::Write) -> Result<(), CliError>;

fn invocation(common: Common, point: Option<PointArgs>) -> (Invocation, Option<usize>) {
    let (xi0, time) = point.map(|p| (p.xi0, p.time)).unwrap_or_default();
    let inv = Invocation {
        config: common.config,
        output: common.output,
        seed: common.seed,
        xi0,
        time,
        ..Default::default()
    };
    (inv, common.workers)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (inv, workers, run): (Invocation, _, Runner) = match cli.command {
        Command::Point { common, point } => {
            let (inv, w) = invocation(common, Some(point));
            (inv, w, cmd_point)
        }
        Command::Scan {
            common,
            resume,
            checkpoint,
        } => {
            let (mut inv, w) = invocation(common, None);
            inv.resume = resume;
            inv.checkpoint = checkpoint;
            (inv, w, cmd_scan)
        }
        Command::Validate { common, point } => {
            let (inv, w) = invocation(common, Some(point));
            (inv, w, cmd_validate)
        }
        Command::BoundStudy { common, point } => {
            let (inv, w) = invocation(common, Some(point));
            (inv, w, cmd_bound_study)
        }
    };

    if let Some(n) = workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(4);
        }
    }

    match run(&inv, &mut std::io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
