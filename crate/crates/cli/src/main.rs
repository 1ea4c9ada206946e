mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunArgs;
use optbp::Error;

#[derive(Parser, Debug)]
#[command(name = "optbp", version, about = "Optical backpropagation experiments")]
struct Cli {
    /// JSON file with run parameters; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for sweeps (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one network and write metrics, run record and best checkpoint.
    Train(RunArgs),
    /// Train over a list of optical depths with exact and optical derivatives.
    SweepAlpha {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated optical depths.
        #[arg(long, value_delimiter = ',', default_value = "0,1,5,10,30,50")]
        alphas: Vec<f64>,
    },
    /// Error of the probe-response derivative approximation per optical depth.
    ApproxError {
        #[arg(long, value_delimiter = ',', default_value = "0,1,5,10,20,30,40,50")]
        alphas: Vec<f64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Train with random tabulated derivatives over a grid of approximation errors.
    RandomStudy {
        #[command(flatten)]
        run: RunArgs,
        /// Number of random derivatives.
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Use the full 200-function study.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 0.02)]
        min_error: f64,
        #[arg(long, default_value_t = 0.5)]
        max_error: f64,
    },
    /// Amplifier gain bounds of every weight matrix in a checkpoint.
    GainBounds {
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Distribution of first-layer neuron inputs for a checkpoint.
    Histogram {
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 100)]
        bins: usize,
    },
    /// Download and verify a dataset into the cache.
    Fetch {
        dataset: String,
        /// Manifest JSON; the built-in one is used when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Base URL replacing each file's host and path.
        #[arg(long)]
        mirror: Option<String>,
        #[arg(long)]
        offline: bool,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Validation { .. } | Error::Dimension(_) | Error::Json(_) => 1,
        Error::Numeric(_) | Error::Degenerate(_) | Error::SearchFailure(_) | Error::State(_) => 2,
        Error::Io(_) | Error::Parse { .. } | Error::MissingDataset { .. } | Error::HashMismatch { .. } => 3,
        Error::Download(_) | Error::Csv(_) => 3,
    }
}

fn load_config(path: Option<&PathBuf>) -> optbp::Result<RunArgs> {
    match path {
        Some(p) => RunArgs::from_json(&std::fs::read_to_string(p)?),
        None => Ok(RunArgs::default()),
    }
}

fn run(cli: Cli) -> optbp::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::validation("threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::validation("threads", e.to_string()))?;
    }
    let file = load_config(cli.config.as_ref())?;
    match cli.command {
        Command::Train(args) => commands::train(args.over(file)),
        Command::SweepAlpha { run, alphas } => commands::sweep_alpha(run.over(file), &alphas),
        Command::ApproxError { alphas, out } => commands::approx_error(&alphas, &out),
        Command::RandomStudy { run, count, full, min_error, max_error } => {
            let count = if full { 200 } else { count };
            commands::random_study(run.over(file), count, min_error, max_error)
        }
        Command::GainBounds { checkpoint, out } => commands::gain_bounds(&checkpoint, &out),
        Command::Histogram { checkpoint, run, samples, bins } => {
            commands::histogram(&checkpoint, run.over(file), samples, bins)
        }
        Command::Fetch { dataset, manifest, mirror, offline, data_dir } => {
            commands::fetch(&dataset, manifest.as_deref(), mirror.as_deref(), offline, data_dir)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
