//! Command-line driver: closed-form curves, Monte Carlo scans, event-level
//! coincidence pipelines, curve fitting, bundled experiment presets, and
//! metadata replay.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 fit non-convergence.

mod config;
mod exec;
mod output;
mod reproduce;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use g2sim_core::Error;

use config::{KvMap, RunConfig};
use output::Metadata;

#[derive(Parser)]
#[command(
    name = "g2sim",
    version,
    about = "Second-order coherence of thermal bosons, fermions, and classical particles: \
             closed forms, Monte Carlo, event simulation, and fits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct KvArgs {
    /// Flat key=value config file (values may carry unit suffixes: 0.59mm,
    /// 296ns, 25kHz)
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value overrides; they win over config-file keys
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form g2 curves (CSV + metadata), or a single-point query
    Analytic(KvArgs),
    /// Amplitude-level Monte Carlo curves with standard errors
    Mc(KvArgs),
    /// Event pipeline: thermal streams, coincidence histogram, normalized
    /// g2, optional fermionic synthesis
    Events(KvArgs),
    /// Fit a closed-form model to a curve file and report the parameters
    Fit(KvArgs),
    /// Bundled experiment presets with reference comparisons
    Reproduce {
        /// One of: fig3, fig4, fig5, fig6
        #[arg(long)]
        figure: String,
        /// Output directory
        #[arg(long, default_value = "reproduce")]
        out: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-execute a run from its emitted metadata
    Rerun {
        /// Path to a .meta.json file
        #[arg(long)]
        metadata: PathBuf,
        /// Override the output prefix (defaults to the recorded one)
        #[arg(long)]
        out: Option<String>,
    },
}

fn kv_from(args: &KvArgs) -> Result<KvMap, Error> {
    let mut kv = match &args.config {
        Some(path) => KvMap::from_file(path)?,
        None => KvMap::new(),
    };
    kv.apply_overrides(&args.overrides)?;
    Ok(kv)
}

fn build_config(command: &Command) -> Result<RunConfig, Error> {
    match command {
        Command::Analytic(a) => config::analytic_config(kv_from(a)?),
        Command::Mc(a) => config::mc_config(kv_from(a)?),
        Command::Events(a) => config::events_config(kv_from(a)?),
        Command::Fit(a) => config::fit_config(kv_from(a)?),
        _ => unreachable!("handled by run()"),
    }
}

/// Maps error kinds onto the documented exit codes.
fn exit_code_for(err: &Error, configuring: bool) -> u8 {
    if configuring {
        return 2;
    }
    match err {
        Error::Parse(_)
        | Error::UnknownParameter(_)
        | Error::BadBounds(_)
        | Error::SeparationMissing
        | Error::SeparationNegative
        | Error::PolarizationMissing
        | Error::PolarizationUnexpected
        | Error::BetaOutOfRange
        | Error::SourceLengthNotPositive
        | Error::WavelengthNotPositive
        | Error::BandwidthNegative
        | Error::DistanceNotPositive
        | Error::TooFewSubSources
        | Error::TooFewModes
        | Error::TraceModesTooFew(_)
        | Error::JitterNegative
        | Error::BadTraceExtent
        | Error::RateTooHigh(_)
        | Error::UndersampledTrace { .. }
        | Error::TooFewRealizations { .. }
        | Error::TooFewProbes { .. }
        | Error::WrongAxis(_, _)
        | Error::ClassicalFit
        | Error::Io(_) => 2,
        Error::NotConverged => 4,
        _ => 3,
    }
}

fn run(cli: &Cli) -> Result<i32, (Error, bool)> {
    match &cli.command {
        Command::Reproduce { figure, out, seed } => {
            let lines = reproduce::run(figure, out, seed.unwrap_or_else(reproduce::default_seed))
                .map_err(|e| {
                    let configuring = matches!(e, Error::Parse(_));
                    (e, configuring)
                })?;
            for line in lines {
                println!("{line}");
            }
            Ok(0)
        }
        Command::Rerun { metadata, out } => {
            let meta = Metadata::read(metadata).map_err(|e| (e, true))?;
            let mut cfg = meta.config;
            if let Some(out) = out {
                let resolved = config::resolve_out(out);
                match &mut cfg {
                    RunConfig::Analytic(c) => c.out = resolved,
                    RunConfig::Mc(c) => c.scan.out = resolved,
                    RunConfig::Events(c) => c.out = resolved,
                    RunConfig::Fit(c) => c.out = Some(resolved),
                }
            }
            let outcome = exec::execute(&cfg).map_err(|e| (e, false))?;
            for line in &outcome.messages {
                println!("{line}");
            }
            Ok(outcome.exit_code)
        }
        command => {
            let cfg = build_config(command).map_err(|e| (e, true))?;
            let outcome = exec::execute(&cfg).map_err(|e| (e, false))?;
            for line in &outcome.messages {
                println!("{line}");
            }
            Ok(outcome.exit_code)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err((err, configuring)) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err, configuring))
        }
    }
}
