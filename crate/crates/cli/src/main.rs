//! `meshlgcp`: bin point patterns, simulate, fit, and summarise fits.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_tile, Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "meshlgcp", version, about = "Multi-subject spatial factor LGCP with a meshed GP prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; changes wall time only.
    #[arg(long)]
    threads: Option<usize>,
    /// Number of latent factors.
    #[arg(long)]
    k: Option<usize>,
    /// Mesh tile size in pixels, `AxB` or `A`.
    #[arg(long, value_parser = parse_tile)]
    tile: Option<(usize, usize)>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Bin a point-pattern CSV into count grids.
    Bin {
        #[command(flatten)]
        common: Common,
        /// CSV with header `image_id,x,y,cell_type` (microns).
        #[arg(long)]
        points: PathBuf,
        /// CSV with header `image_id,l_x,l_y` (microns). Without it each
        /// image's domain is the bounding box of its points.
        #[arg(long)]
        extents: Option<PathBuf>,
        /// Output directory for `counts.csv` and `manifest.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate count grids with known truth.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output directory for `counts.csv`, `manifest.json` and `truth.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the sampler on a counts directory.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Directory holding `counts.csv` and `manifest.json`.
        #[arg(long)]
        data: PathBuf,
        /// Output draws store directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Posterior marginal and cross-correlation curves of a fit.
    Xcorr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        store: PathBuf,
        /// Output curves CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Convergence diagnostics and WAIC of a fit, or a WAIC sweep over k.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Draws store to diagnose.
        #[arg(long, required_unless_present = "sweep_k")]
        store: Option<PathBuf>,
        /// Fit each listed k on `--data` and tabulate WAIC.
        #[arg(long, value_delimiter = ',', requires = "data")]
        sweep_k: Option<Vec<usize>>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Difference of correlation curves between two fitted groups.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Output curves CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Bin { common, .. }
            | Command::Simulate { common, .. }
            | Command::Fit { common, .. }
            | Command::Xcorr { common, .. }
            | Command::Diagnose { common, .. }
            | Command::Compare { common, .. } => common,
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<meshlgcp::Error>() {
        Some(e) if e.is_numerical() => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common = cli.command.common();
    let cfg = RunConfig::load(
        &common.config,
        Overrides {
            seed: common.seed,
            k: common.k,
            tile: common.tile,
        },
    )?;
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(meshlgcp::Error::Config("--threads must be >= 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Bin { points, extents, out, .. } => commands::bin(&cfg, points, extents.as_deref(), out),
        Command::Simulate { out, .. } => commands::simulate(&cfg, out),
        Command::Fit { data, out, .. } => commands::fit(&cfg, data, out),
        Command::Xcorr { store, out, .. } => commands::xcorr(&cfg, store, out),
        Command::Diagnose {
            store,
            sweep_k,
            data,
            out,
            ..
        } => match (sweep_k, data, store) {
            (Some(ks), Some(data), _) => commands::sweep_k(&cfg, data, ks, out),
            (_, _, Some(store)) => commands::diagnose(&cfg, store, out),
            _ => Err(meshlgcp::Error::Config("diagnose needs --store or --sweep-k with --data".into()).into()),
        },
        Command::Compare { a, b, out, .. } => commands::compare(&cfg, a, b, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
