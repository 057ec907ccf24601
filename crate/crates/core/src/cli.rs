//! Command-line front end.

use std::ffi::OsString;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::decay;
use crate::error::{Error, Result};
use crate::kernel::{drift, load_kernel, validate_kernel, Kernel, Lattice};
use crate::matrix_analytic::{self, SolveOptions, Triple};
use crate::models;
use crate::oracle::{self, State};
use crate::spectral;

/// Comma-separated list such as `1,0,1`.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T> {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|_| format!("cannot parse '{p}' in '{s}'")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(List)
    }
}

fn positive_f64(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("'{s}' is not a positive number")),
    }
}

#[derive(Debug, Parser)]
#[command(name = "mmrw", version, about = "Decay rates of occupation measures for Markov-modulated random walks")]
pub struct RunConfig {
    /// Write the result to this file instead of standard output.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a kernel and report its drift.
    Validate { kernel: PathBuf },
    /// Minimum of chi, and chi at a given point.
    Spectral {
        kernel: PathBuf,
        #[arg(long)]
        theta: Option<List<f64>>,
    },
    /// Decay rate for each direction (JSON).
    Decay {
        kernel: PathBuf,
        #[arg(long = "c", required = true)]
        c: Vec<List<i64>>,
    },
    /// Boundary points of the region chi < 1 (CSV).
    GammaBoundary {
        kernel: PathBuf,
        #[arg(long)]
        rays: usize,
    },
    /// R, G, N and identity residuals of a one-dimensional kernel.
    SolveRg {
        kernel: PathBuf,
        #[arg(long, default_value_t = 1e-13, value_parser = positive_f64)]
        tol: f64,
    },
    /// Occupation-measure slopes against decay rates.
    Oracle {
        kernel: PathBuf,
        #[arg(long = "box")]
        box_size: usize,
        #[arg(long = "c", required = true)]
        c: Vec<List<i64>>,
        /// Regression window `k_min,k_max`; defaults to `[M/6, M/(2 max c)]`.
        #[arg(long)]
        window: Option<List<usize>>,
        #[arg(long)]
        start: Option<List<i64>>,
        #[arg(long, default_value_t = 0)]
        phase: usize,
    },
    /// Decay-rate table of the three-queue polling model (CSV).
    PollingTable {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        table: u8,
    },
    /// Monte Carlo visit counts (JSON).
    Simulate {
        kernel: PathBuf,
        #[arg(long)]
        paths: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1_000_000)]
        cap: u64,
        #[arg(long)]
        start: Option<List<i64>>,
        #[arg(long, default_value_t = 0)]
        phase: usize,
    },
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn origin(k: &Kernel, start: Option<List<i64>>) -> Vec<i64> {
    start.map_or_else(|| vec![0; k.dim()], |s| s.0)
}

/// Runs one command and returns its output text.
pub fn execute(command: Command) -> Result<String> {
    match command {
        Command::Validate { kernel } => {
            let k = load_kernel(kernel)?;
            let report = validate_kernel(&k);
            let drift = drift(&k).ok();
            Ok(pretty(&json!({ "validation": report, "drift": drift })))
        }
        Command::Spectral { kernel, theta } => {
            let k = load_kernel(kernel)?;
            let summary = spectral::minimize_chi(&k)?;
            let at = match theta {
                Some(List(t)) => {
                    if t.len() != k.dim() {
                        return Err(Error::DimensionMismatch(format!("theta has {} components, kernel has d = {}", t.len(), k.dim())));
                    }
                    let m = spectral::gamma_contains(&k, &t)?;
                    Some(json!({ "theta": t, "chi": m.chi, "inside": m.inside }))
                }
                None => None,
            };
            Ok(pretty(&json!({ "summary": summary, "at": at })))
        }
        Command::Decay { kernel, c } => {
            let k = load_kernel(kernel)?;
            let reports = c.into_par_iter().map(|List(c)| decay::decay_rate(&k, &c)).collect::<Result<Vec<_>>>()?;
            Ok(pretty(&reports))
        }
        Command::GammaBoundary { kernel, rays } => {
            let k = load_kernel(kernel)?;
            Ok(decay::gamma_boundary_trace(&k, rays)?.to_csv())
        }
        Command::SolveRg { kernel, tol } => {
            let k = load_kernel(kernel)?;
            let t = Triple::from_kernel(&k)?;
            let sol = matrix_analytic::solve_triple(&t, SolveOptions { tol, ..SolveOptions::default() })?;
            let cp = matrix_analytic::cp_identities_check(&t, &sol)?;
            let grid = [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0];
            let wiener_hopf: Vec<_> = grid.iter().map(|&th| json!({ "theta": th, "residual": matrix_analytic::wiener_hopf_residual(&t, &sol, th) })).collect();
            let rows = |m: &nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> { m.row_iter().map(|r| r.iter().copied().collect()).collect() };
            Ok(pretty(&json!({
                "r": rows(&sol.r),
                "g": rows(&sol.g),
                "n": rows(&sol.n),
                "h": rows(&sol.h),
                "iterations": { "r": sol.iterations_r, "g": sol.iterations_g },
                "gamma_dagger": sol.gamma_dagger,
                "residuals": sol.residuals,
                "cp_identities": cp,
                "wiener_hopf": wiener_hopf,
            })))
        }
        Command::Oracle { kernel, box_size, c, window, start, phase } => {
            let k = load_kernel(kernel)?;
            let start = State::new(origin(&k, start), phase);
            let table = oracle::occupation_truncated(&k, &start, box_size)?;
            let rows = c
                .into_par_iter()
                .map(|List(c)| {
                    let report = decay::decay_rate(&k, &c)?;
                    let win = match &window {
                        Some(List(w)) if w.len() == 2 => (w[0], w[1]),
                        Some(_) => return Err(Error::InsufficientData("window must be k_min,k_max".into())),
                        None => {
                            let top = c.iter().copied().max().unwrap_or(1).max(1) as usize;
                            (box_size / 6, box_size / (2 * top))
                        }
                    };
                    let l = vec![0; k.dim()];
                    let fit = oracle::slope_estimate(&table, &c, &l, phase, win)?;
                    Ok(json!({
                        "c": c,
                        "rate": report.rate,
                        "slope": fit.slope,
                        "r_squared": fit.r_squared,
                        "difference": fit.slope + report.rate,
                        "window": [win.0, win.1],
                    }))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(pretty(&json!({ "box": box_size, "start": start, "sweeps": table.sweeps, "comparisons": rows })))
        }
        Command::PollingTable { table } => Ok(models::table_csv(&models::reproduce_table(table)?)),
        Command::Simulate { kernel, paths, seed, cap, start, phase } => {
            let k = load_kernel(kernel)?;
            let start = State::new(origin(&k, start), phase);
            Ok(pretty(&oracle::simulate_paths(&k, &start, paths, seed, cap)?))
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 1 on a domain error, 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let config = match RunConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let output = config.output.clone();
    let text = match execute(config.command) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match output {
        Some(path) => {
            if let Err(e) = std::fs::write(&path, text) {
                eprintln!("error: cannot write {}: {e}", path.display());
                return 1;
            }
        }
        None => print!("{text}"),
    }
    0
}
