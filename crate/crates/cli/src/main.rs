//! `rtower` command-line front end.
//!
//! Exit codes: 0 pass, 1 assumption or criterion failure, 2 usage or I/O error.

mod experiments;
mod model;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use experiments::{Resolved, EXPERIMENTS};
use rtower::env::validate_family;

#[derive(Parser, Debug)]
#[command(name = "rtower", version = rtower::VERSION, about = "Random Young towers: operators, cones and limit theorems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check aperiodicity, exponential tails and the cover condition of a model.
    Validate {
        /// Built-in model (gm3, gm3-irregular, geo, single-atom) or a TOML file.
        #[arg(long, default_value = "gm3")]
        model: String,
    },
    /// Run one experiment and write report.json plus a table under --out.
    Run(RunArgs),
    /// Summarize every experiment found under a directory.
    Report {
        dir: PathBuf,
    },
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// mgf-oracle, duality, ly, cone-certify, convergence, be, lclt, deviations,
    /// mixing, variance or spectral.
    experiment: String,
    /// Built-in model (gm3, gm3-irregular, geo, single-atom) or a TOML file.
    /// Defaults to gm3-irregular for convergence and gm3 otherwise.
    #[arg(long)]
    model: Option<String>,
    /// Environment seed; defaults to the model file seed, then 2026.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Horizons as `a..b` (inclusive) or a comma list. Meaning per experiment:
    /// largest n (mgf-oracle, variance), N values (ly), fit range (convergence),
    /// exact n (be), n (lclt, deviations), lags (mixing), iterations (spectral).
    #[arg(long, value_parser = parse_ns)]
    n: Option<Vec<usize>>,
    /// Sample count: pairs (duality), triples (ly), cone samples (cone-certify),
    /// functions per z (convergence), Monte Carlo draws (be), importance samples
    /// (deviations), battery size (mixing).
    #[arg(long)]
    samples: Option<usize>,
    /// Cocycle length for cone-certify.
    #[arg(long)]
    k: Option<usize>,
    /// Fiber index the experiment starts from.
    #[arg(long)]
    anchor: Option<i64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

const DEFAULT_SEED: u64 = 2026;

fn parse_ns(s: &str) -> Result<Vec<usize>, String> {
    let bad = |_| format!("expected `a..b` or a comma list of integers, got {s}");
    let out: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
        (a..=b).collect()
    } else {
        s.split(',').map(|p| p.trim().parse().map_err(bad)).collect::<Result<_, _>>()?
    };
    if out.is_empty() || out.contains(&0) {
        return Err(format!("horizons must be positive and nonempty, got {s}"));
    }
    Ok(out)
}

/// Failures split by exit code.
enum Failure {
    /// Assumption or criterion failure: exit 1.
    Model(rtower::Error),
    /// Usage or I/O: exit 2.
    Io(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Io(e)
    }
}

fn validate(model: &str) -> Result<bool, Failure> {
    let m = model::load(model)?;
    match validate_family(&m.symbols, &m.probs) {
        Ok(rep) => {
            let out = json!({ "version": rtower::VERSION, "model": m.name, "valid": true, "report": rep });
            println!("{}", serde_json::to_string_pretty(&out).expect("json"));
            Ok(true)
        }
        Err(e) => {
            let out = json!({
                "version": rtower::VERSION,
                "model": m.name,
                "valid": false,
                "reason": e.code(),
                "message": e.to_string(),
            });
            println!("{}", serde_json::to_string_pretty(&out).expect("json"));
            Ok(false)
        }
    }
}

fn run(args: RunArgs) -> Result<bool, Failure> {
    if !EXPERIMENTS.iter().any(|e| e.0 == args.experiment) {
        return Err(Failure::Io(anyhow::anyhow!(
            "unknown experiment {}; expected one of {}",
            args.experiment,
            EXPERIMENTS.iter().map(|e| e.0).collect::<Vec<_>>().join(", ")
        )));
    }
    if let Some(j) = args.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let model = args.model.clone().unwrap_or_else(|| experiments::default_model(&args.experiment).to_string());
    let m = model::load(&model)?;
    validate_family(&m.symbols, &m.probs).map_err(Failure::Model)?;
    let family = m.family().map_err(Failure::Model)?;
    let (n, samples, k) = experiments::defaults(&args.experiment);
    let cfg = Resolved {
        model: m.name.clone(),
        seed: args.seed.or(m.seed).unwrap_or(DEFAULT_SEED),
        anchor: args.anchor.unwrap_or(0),
        n: args.n.unwrap_or(n),
        samples: args.samples.unwrap_or(samples),
        k: args.k.unwrap_or(k),
    };
    let start = Instant::now();
    let outcome = experiments::run(&args.experiment, &family, &m.probs, &cfg).map_err(Failure::Model)?;
    let elapsed = start.elapsed().as_secs_f64();
    let dir = args.out.join(&args.experiment);
    output::write(&dir, &outcome.report, &cfg, args.format)?;
    let passed = outcome.report.passed;
    let tag = match passed {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "INFO",
    };
    println!("{tag} {}: {} ({elapsed:.1} s)", args.experiment, outcome.summary);
    Ok(passed != Some(false))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { model } => validate(&model),
        Command::Run(args) => run(args),
        Command::Report { dir } => {
            print!("{}", output::dashboard(&dir));
            Ok(true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Model(e)) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::from(1)
        }
        Err(Failure::Io(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizon_syntax() {
        assert_eq!(parse_ns("4..7").unwrap(), vec![4, 5, 6, 7]);
        assert_eq!(parse_ns("8, 16,32").unwrap(), vec![8, 16, 32]);
        assert_eq!(parse_ns("12").unwrap(), vec![12]);
        assert!(parse_ns("0..3").is_err());
        assert!(parse_ns("a").is_err());
        assert!(parse_ns("5..2").is_err());
    }
}
