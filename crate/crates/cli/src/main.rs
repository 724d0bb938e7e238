//! `halluguard` command-line entry point.
//!
//! Exit codes: 0 success, 1 internal failure, 2 bad input (unreadable file,
//! invalid flag or parameter, missing labels, invalid bundle), 3 metric
//! undefined because only one class is present.

mod args;
mod commands;
mod config_file;
mod tinylm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use halluguard::eval::ThresholdMode;
use halluguard::Error;

use args::ScoringArgs;
use tinylm::TinyLmCmd;

#[derive(Parser, Debug)]
#[command(name = "halluguard", version, about = "Spectral hallucination scoring for sampled LM trajectories")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Score trajectory bundles with the selected detectors (CSV out)
    Score {
        /// Bundle files or directories of *.hgb files
        #[arg(required = true)]
        bundles: Vec<PathBuf>,
        #[command(flatten)]
        scoring: ScoringArgs,
        #[arg(long, default_value = "0")]
        seed: u64,
        /// Output CSV (stdout when omitted)
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Flat key=value file supplying flag defaults
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// AUROC, AUPRC, F1 and TPR at 5% and 10% FPR per detector
    Eval {
        /// Bundle files or directories (scored on the fly)
        #[arg(required_unless_present = "scores", conflicts_with = "scores")]
        bundles: Vec<PathBuf>,
        /// Previously written score CSV
        #[arg(long)]
        scores: Option<PathBuf>,
        #[command(flatten)]
        scoring: ScoringArgs,
        /// match-prevalence, quantile:PI, fixed-fpr:F or bayes:C_FP,C_FN,PI
        #[arg(long, default_value = "match-prevalence")]
        threshold: ThresholdMode,
        #[arg(long, default_value = "0")]
        seed: u64,
        /// Also write the report as CSV
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Risk bound against a noisy empirical risk over a range of horizons
    SimulateBound {
        /// key=value parameter file (built-in example when omitted)
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value = "0")]
        t_min: u32,
        #[arg(long, default_value = "20")]
        t_max: u32,
        /// Relative noise on each term of the empirical risk
        #[arg(long, default_value = "0.05")]
        noise: f64,
        #[arg(long, default_value = "0")]
        seed: u64,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Tiny transformer: training, sampling, datasets and guided decoding
    Tinylm {
        #[command(subcommand)]
        cmd: TinyLmCmd,
    },
    /// Bundle file utilities
    Bundle {
        #[command(subcommand)]
        cmd: BundleCmd,
    },
}

#[derive(Subcommand, Debug)]
enum BundleCmd {
    /// Check files against the bundle invariants
    Validate {
        #[arg(required = true)]
        bundles: Vec<PathBuf>,
    },
    /// Print a human-readable summary of one bundle
    Inspect { bundle: PathBuf },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::UndefinedMetric { .. }) => 3,
        Some(
            Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::Truncated { .. }
            | Error::Malformed(_)
            | Error::InvalidBundle(_)
            | Error::InvalidParam { .. }
            | Error::UnknownSymbol(_)
            | Error::ContextOverflow { .. }
            | Error::DimensionMismatch(_)
            | Error::Io(_)
            | Error::Csv(_),
        ) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.cmd {
        Cmd::Score {
            bundles,
            scoring,
            seed,
            out,
            config: _,
        } => commands::score(&bundles, &scoring, seed, out.as_deref())?,
        Cmd::Eval {
            bundles,
            scores,
            scoring,
            threshold,
            seed,
            report,
            config: _,
        } => commands::eval(&bundles, scores.as_deref(), &scoring, threshold, seed, report.as_deref())?,
        Cmd::SimulateBound {
            params,
            t_min,
            t_max,
            noise,
            seed,
            out,
            config: _,
        } => commands::simulate_bound(params.as_deref(), t_min, t_max, noise, seed, out.as_deref())?,
        Cmd::Tinylm { cmd } => tinylm::run(cmd)?,
        Cmd::Bundle { cmd } => match cmd {
            BundleCmd::Validate { bundles } => {
                if commands::bundle_validate(&bundles)? > 0 {
                    return Ok(2);
                }
            }
            BundleCmd::Inspect { bundle } => commands::bundle_inspect(&bundle)?,
        },
    }
    Ok(0)
}

fn main() -> ExitCode {
    let argv = match config_file::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let cli = Cli::parse_from(argv);
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Output cut short by a closed reader such as `head` is not a failure.
fn broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    })
}
