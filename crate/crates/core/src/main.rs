use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use splr::cli_io;
use splr::types::Granularity;

#[derive(Parser)]
#[command(name = "splr", version, about = "Sparse plus low-rank layer decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose one layer and write its components, trace and summary.
    Decompose {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        activations: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Rank and nonzero budgets for a compression ratio.
    Budget {
        /// `N:M` for a fixed-compression rank, `k` for a rank-ratio split.
        #[arg(long)]
        pattern: String,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long)]
        nin: usize,
        #[arg(long)]
        nout: usize,
    },
    /// Score stored components against a layer.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        activations: PathBuf,
        #[arg(long)]
        sparse: PathBuf,
        #[arg(long)]
        u: PathBuf,
        #[arg(long)]
        v: PathBuf,
        /// Run configuration supplying damping and the pattern to check.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compress a chain of layers in order.
    Pipeline {
        #[arg(long, value_delimiter = ',')]
        layers: Vec<PathBuf>,
        #[arg(long)]
        activations: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    #[command(hide = true)]
    Oracle {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        activations: PathBuf,
        #[arg(long)]
        pattern: String,
        #[arg(long)]
        per_column: bool,
        #[arg(long, default_value_t = 0.01)]
        percdamp: f64,
    },
}

fn run(cli: Cli) -> splr::Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Decompose { weights, activations, config, out_prefix } => {
            let s = cli_io::run_decompose(&weights, &activations, &config, &out_prefix)?;
            writeln!(
                out,
                "objective_damped={:e} objective_raw={:e} rank={} pattern={}",
                s.objective_damped, s.objective_raw, s.rank, s.pattern
            )?;
        }
        Command::Budget { pattern, rho, kappa, nin, nout } => {
            cli_io::run_budget(&pattern, rho, kappa, nin, nout, &mut out)?;
        }
        Command::Eval { weights, activations, sparse, u, v, config } => {
            cli_io::run_eval(&weights, &activations, &sparse, &u, &v, config.as_deref(), &mut out)?;
        }
        Command::Pipeline { layers, activations, config, out_dir } => {
            cli_io::run_pipeline(&layers, &activations, &config, &out_dir)?;
        }
        Command::Oracle { weights, activations, pattern, per_column, percdamp } => {
            let granularity =
                if per_column { Granularity::PerColumn } else { Granularity::PerMatrix };
            cli_io::run_oracle(&weights, &activations, &pattern, granularity, percdamp, &mut out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("splr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
