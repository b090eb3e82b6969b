//! `dsd`: run, sweep, verify and calibrate windowed speculative decoding
//! experiments, and query the closed-form latency model.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or input error,
//! 3 relaxed verification measurably changes the output distribution.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsd::config::{default_config, load_config, ExperimentConfig};
use dsd::experiment::{self, AnalyticQuery, ANALYTIC_FILE};
use dsd::metrics::{fmt_sig, SummaryRow};
use dsd::DsdError;

#[derive(Parser, Debug)]
#[command(
    name = "dsd",
    version,
    about = "Windowed speculative decoding experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment config; the built-in default is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; nothing is written anywhere else.
    #[arg(long, global = true, default_value = "dsd-out")]
    out: PathBuf,
    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for concurrent points (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate once per seed and simulate both decoding schemes.
    Run,
    /// Run every sweep value for every seed.
    Sweep,
    /// Compare the exact output distribution with the target model's.
    VerifyLossless,
    /// Pick key-token thresholds on the config's validation set.
    Calibrate,
    /// Tabulate the closed-form latency model over a grid.
    Analytic(AnalyticArgs),
}

/// Each value is a comma-separated list whose items are numbers or inclusive
/// ranges `start:end[:step]` (step defaults to 1).
#[derive(Args, Debug)]
struct AnalyticArgs {
    #[arg(long, default_value = "4")]
    n_nodes: String,
    #[arg(long, default_value = "1")]
    t0: String,
    #[arg(long, default_value = "5")]
    t1: String,
    #[arg(long, default_value = "1:8")]
    k: String,
    /// Acceptance ratios; defaults to min(1, k / (gamma + 1)).
    #[arg(long)]
    rho: Option<String>,
    #[arg(long, default_value_t = 8)]
    gamma: usize,
}

enum Failure {
    Input(String),
    Runtime(String),
}

impl From<DsdError> for Failure {
    fn from(e: DsdError) -> Self {
        if e.is_input_error() {
            Failure::Input(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => default_config(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn execute(cli: &Cli) -> Result<u8, Failure> {
    let common = &cli.common;
    match &cli.command {
        Command::Run => {
            let cfg = load(common)?;
            prepare_out(&common.out)?;
            let out = experiment::run(&cfg, &common.out, common.workers)?;
            print_summary(&out.summary);
            print_files(&out.files);
            Ok(0)
        }
        Command::Sweep => {
            let cfg = load(common)?;
            if cfg.sweep.is_none() {
                return Err(Failure::Input("the config has no sweep section".into()));
            }
            prepare_out(&common.out)?;
            let out = experiment::sweep(&cfg, &common.out, common.workers)?;
            print_summary(
                out.summary
                    .iter()
                    .filter(|r| r.run_id.ends_with("/mean"))
                    .cloned()
                    .collect::<Vec<_>>()
                    .as_slice(),
            );
            print_files(&out.files);
            Ok(0)
        }
        Command::VerifyLossless => {
            let cfg = load(common)?;
            let report = experiment::verify_lossless(&cfg)?;
            for i in &report.instances {
                println!("{:<18} tv={}", i.label, fmt_sig(i.total_variation));
            }
            println!("max_tv={} tau={}", fmt_sig(report.max_tv), fmt_sig(cfg.tau));
            if report.is_lossless() {
                println!("lossless");
                Ok(0)
            } else if report.strict {
                Err(Failure::Runtime(format!(
                    "strict verification diverged from the target (tv={})",
                    fmt_sig(report.max_tv)
                )))
            } else {
                println!("relaxed verification changes the output distribution");
                Ok(3)
            }
        }
        Command::Calibrate => {
            let cfg = load(common)?;
            prepare_out(&common.out)?;
            match experiment::calibrate(&cfg, &common.out) {
                Ok(r) => {
                    println!(
                        "lambda1={} lambda2={} lambda3={} top_m={}",
                        fmt_sig(r.criteria.lambda1),
                        fmt_sig(r.criteria.lambda2),
                        fmt_sig(r.criteria.lambda3),
                        r.criteria.top_m
                    );
                    println!(
                        "avg_accepted_length={} divergence={} points={}",
                        fmt_sig(r.avg_accepted_length),
                        fmt_sig(r.divergence),
                        r.grid_log.len()
                    );
                    print_files(&[
                        common.out.join(experiment::CALIBRATION_FILE),
                        common.out.join(experiment::CALIBRATION_GRID_FILE),
                    ]);
                    Ok(0)
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::Analytic(a) => {
            let query = AnalyticQuery {
                n_nodes: parse_values(&a.n_nodes, "n_nodes")?
                    .into_iter()
                    .map(|x| as_count(x, "n_nodes"))
                    .collect::<Result<_, _>>()?,
                t0_ms: parse_values(&a.t0, "t0")?,
                t1_ms: parse_values(&a.t1, "t1")?,
                k: parse_values(&a.k, "k")?,
                rho: match &a.rho {
                    Some(r) => parse_values(r, "rho")?,
                    None => Vec::new(),
                },
                gamma: a.gamma,
            };
            let rows = experiment::analytic(&query)?;
            let text = experiment::render_analytic(&rows);
            prepare_out(&common.out)?;
            let path = common.out.join(ANALYTIC_FILE);
            dsd::metrics::write_file(&path, &text)?;
            print!("{text}");
            print_files(&[path]);
            Ok(0)
        }
    }
}

fn as_count(x: f64, field: &str) -> Result<usize, Failure> {
    if x >= 1.0 && x.fract() == 0.0 && x.is_finite() {
        Ok(x as usize)
    } else {
        Err(Failure::Input(format!(
            "{field}: {x} is not a positive integer"
        )))
    }
}

/// Parses `1,2,5:8,0.5:1.5:0.25` into a flat list of values.
fn parse_values(spec: &str, field: &str) -> Result<Vec<f64>, Failure> {
    let bad = |why: &str| Failure::Input(format!("{field}: invalid value list '{spec}': {why}"));
    let num = |s: &str| -> Result<f64, Failure> {
        let x: f64 = s
            .trim()
            .parse()
            .map_err(|_| bad(&format!("'{s}' is not a number")))?;
        if x.is_finite() {
            Ok(x)
        } else {
            Err(bad("values must be finite"))
        }
    };
    let mut out = Vec::new();
    for item in spec.split(',') {
        let parts: Vec<&str> = item.split(':').collect();
        match parts.as_slice() {
            [x] => out.push(num(x)?),
            [a, b] | [a, b, _] => {
                let (start, end) = (num(a)?, num(b)?);
                let step = if parts.len() == 3 {
                    num(parts[2])?
                } else {
                    1.0
                };
                if step <= 0.0 || end < start {
                    return Err(bad("ranges need start <= end and a positive step"));
                }
                let n = ((end - start) / step + 1e-9).floor() as usize;
                if n > 100_000 {
                    return Err(bad("range is too long"));
                }
                out.extend((0..=n).map(|i| start + i as f64 * step));
            }
            _ => return Err(bad("expected number or start:end[:step]")),
        }
    }
    Ok(out)
}

fn print_summary(rows: &[SummaryRow]) {
    println!(
        "{:<24} {:>8} {:>10} {:>8} {:>8} {:>10} {:>10}",
        "run_id", "rho", "avg_len", "tokens", "syncs", "analytic", "measured"
    );
    for r in rows {
        println!(
            "{:<24} {:>8} {:>10} {:>8} {:>8} {:>10} {:>10}",
            r.run_id,
            fmt_sig(r.rho),
            fmt_sig(r.avg_accepted_len),
            fmt_sig(r.total_tokens),
            fmt_sig(r.sync_rounds),
            fmt_sig(r.analytic_speedup),
            fmt_sig(r.measured_speedup)
        );
    }
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn values(s: &str) -> Vec<f64> {
        match parse_values(s, "x") {
            Ok(v) => v,
            Err(_) => panic!("{s} should parse"),
        }
    }

    #[test]
    fn value_lists_and_ranges() {
        assert_eq!(values("4"), vec![4.0]);
        assert_eq!(values("1,3:5"), vec![1.0, 3.0, 4.0, 5.0]);
        assert_eq!(values("0.5:1.5:0.5"), vec![0.5, 1.0, 1.5]);
        assert!(parse_values("5:3", "x").is_err());
        assert!(parse_values("1:2:0", "x").is_err());
        assert!(parse_values("abc", "x").is_err());
        assert!(parse_values("1:2:3:4", "x").is_err());
    }
}
