use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use blv_cli::commands::AblateAxis;
use blv_cli::{cmd_ablate, cmd_freq, cmd_train, load_config};

/// Frequency-balanced logit variation: label-map analysis, experiment runs,
/// and ablation sweeps with JSON/CSV/SVG reports.
#[derive(Parser)]
#[command(name = "blv", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count class frequencies over binary PGM label maps and report the
    /// induced balancing coefficients.
    Freq {
        /// Number of classes C; labels must be < C or equal the ignore index.
        #[arg(long)]
        classes: usize,
        /// Label value excluded from counting.
        #[arg(long, default_value_t = 255)]
        ignore: u32,
        /// Additive smoothing in pixels.
        #[arg(long, default_value_t = 0.0)]
        smoothing: f64,
        /// Output directory for the report.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// PGM (P5) label maps.
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Run one configured experiment and write a run report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Overrides train.seed (falls back to BLV_SEED, then 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Also emit SVG plots of the loss and tail-mIoU curves.
        #[arg(long)]
        plot: bool,
        /// Dotted-path config override, e.g. --set noise.sigma=4.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Sweep one ablation axis over the configured seed list.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated axis values; defaults to the standard grid.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Restrict the sweep to this single seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        plot: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AxisArg {
    VariationFamily,
    Sigma,
    Components,
}

impl From<AxisArg> for AblateAxis {
    fn from(axis: AxisArg) -> Self {
        match axis {
            AxisArg::VariationFamily => AblateAxis::VariationFamily,
            AxisArg::Sigma => AblateAxis::Sigma,
            AxisArg::Components => AblateAxis::Components,
        }
    }
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Freq {
            classes,
            ignore,
            smoothing,
            out,
            files,
        } => {
            cmd_freq(&files, classes, ignore, smoothing, &out)?;
        }
        Command::Train {
            config,
            out,
            seed,
            plot,
            set,
        } => {
            let config = load_config(&config, &set, seed)?;
            cmd_train(&config, &out, plot)?;
        }
        Command::Ablate {
            config,
            axis,
            values,
            out,
            seed,
            plot,
            set,
        } => {
            let mut config = load_config(&config, &set, seed)?;
            if seed.is_some() {
                config.train.seeds = None;
            }
            cmd_ablate(&config, axis.into(), values, &out, plot)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
