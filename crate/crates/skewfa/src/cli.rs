//! Command-line surface: fit, select, score, sample, metrics.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error (from clap),
//! 3 fit finished without convergence.

use crate::dist::DEFAULT_REL_TOL;
use crate::ecm::{e_step, factor_scores, fit_with_progress, map_labels, FitConfig, FitReport};
use crate::error::{Error, Result};
use crate::init::{best_of_restarts, InitKind, InitStrategy};
use crate::io::{
    read_csv, read_labels, read_model, write_csv, write_csv_labeled, write_model, FitMeta,
};
use crate::metrics::{ami, ari, ccr};
use crate::model::{sample_mixture, Dataset, Family};
use crate::select::{grid_search, Criterion, SelectionGrid};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

const _: f64 = DEFAULT_REL_TOL; // CDF default documented alongside the CLI

#[derive(Parser, Debug)]
#[command(
    name = "skewfa",
    version,
    about = "Model-based clustering with mixtures of skew-t factor analyzers"
)]
pub struct Cli {
    /// Worker threads (default: all cores; SKEWFA_THREADS as fallback).
    /// Never changes numeric output.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a mixture model to CSV data.
    Fit(FitArgs),
    /// Grid search over (g, q, r) with BIC/ICL selection.
    Select(SelectArgs),
    /// Score data under a saved model: labels, posteriors, factor scores.
    Score(ScoreArgs),
    /// Draw synthetic data from a saved model.
    Sample(SampleArgs),
    /// External clustering metrics between two label files.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub g: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub q: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..))]
    pub r: u64,
    #[arg(long, default_value = "cfustfa")]
    pub family: String,
    #[arg(long, default_value = "kmeans")]
    pub init: String,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub restarts: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long = "max-iter", default_value_t = 2000)]
    pub max_iter: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Inclusive range, e.g. `1:3`, or a single value.
    #[arg(long)]
    pub g: String,
    #[arg(long)]
    pub q: String,
    #[arg(long)]
    pub r: String,
    #[arg(long, default_value = "bic")]
    pub criterion: String,
    #[arg(long, default_value = "cfustfa")]
    pub family: String,
    #[arg(long, default_value = "kmeans")]
    pub init: String,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub restarts: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long = "max-iter", default_value_t = 2000)]
    pub max_iter: usize,
    #[arg(long = "param-cap")]
    pub param_cap: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub table: PathBuf,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Append the generating component as a `label` column.
    #[arg(long)]
    pub labels: bool,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
}

/// Runs a parsed command, translating errors into the exit-code contract.
pub fn run(cli: Cli) -> i32 {
    let threads = cli.threads.or_else(|| {
        std::env::var("SKEWFA_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(t) = threads {
        if t >= 1 {
            // Ignore the error if a global pool already exists (tests).
            let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
        }
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Fit(args) => cmd_fit(args),
        Command::Select(args) => cmd_select(args),
        Command::Score(args) => cmd_score(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Metrics(args) => cmd_metrics(args),
    }
}

fn load_dataset(path: &PathBuf) -> Result<Dataset> {
    let table = read_csv(path)?;
    Dataset::new(table.features, table.labels)
}

fn fit_config_from(
    g: u64,
    q: u64,
    r: u64,
    family: &str,
    init: &str,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<FitConfig> {
    let family: Family = family.parse()?;
    let init: InitKind = init.parse()?;
    let mut cfg = FitConfig::new(g as usize, q as usize, r as usize, family);
    cfg.init = init;
    cfg.seed = seed;
    cfg.tol = tol;
    cfg.max_iter = max_iter;
    Ok(cfg)
}

fn print_fit_summary(report: &FitReport) {
    println!(
        "loglik={:.6} bic={:.6} icl={:.6} iterations={} converged={}",
        report.loglik(),
        report.bic,
        report.icl,
        report.iterations,
        report.converged
    );
}

fn fit_meta(report: &FitReport, seed: u64) -> FitMeta {
    FitMeta {
        loglik: report.loglik(),
        iterations: report.iterations,
        converged: report.converged,
        bic: report.bic,
        icl: report.icl,
        seed,
    }
}

fn cmd_fit(args: FitArgs) -> Result<i32> {
    let data = load_dataset(&args.data)?;
    let cfg = fit_config_from(
        args.g,
        args.q,
        args.r,
        &args.family,
        &args.init,
        args.seed,
        args.tol,
        args.max_iter,
    )?;
    let report = if args.restarts == 1 {
        fit_with_progress(&data, &cfg, |iter, loglik, gap| {
            match gap {
                Some(g) => eprintln!("iter={iter} loglik={loglik:.8} aitken_gap={g:.3e}"),
                None => eprintln!("iter={iter} loglik={loglik:.8} aitken_gap=--"),
            };
        })?
    } else {
        let strategy = InitStrategy::new(cfg.init, args.restarts as usize, cfg.seed)?;
        best_of_restarts(&data, &cfg, &strategy)?
    };
    write_model(&args.out, &report.model, Some(fit_meta(&report, args.seed)))?;
    print_fit_summary(&report);
    Ok(if report.converged { 0 } else { 3 })
}

fn parse_range(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(':').collect();
    let parse_one = |v: &str| -> Result<usize> {
        v.parse()
            .map_err(|_| Error::Config(format!("invalid range component {v:?}")))
    };
    match parts.as_slice() {
        [one] => {
            let v = parse_one(one)?;
            Ok((v, v))
        }
        [lo, hi] => {
            let lo = parse_one(lo)?;
            let hi = parse_one(hi)?;
            if lo > hi {
                return Err(Error::Config(format!("empty range {s:?}")));
            }
            Ok((lo, hi))
        }
        _ => Err(Error::Config(format!(
            "range must be `lo:hi` or a single value, got {s:?}"
        ))),
    }
}

fn cmd_select(args: SelectArgs) -> Result<i32> {
    let data = load_dataset(&args.data)?;
    let g_range = parse_range(&args.g)?;
    let q_range = parse_range(&args.q)?;
    let r_range = parse_range(&args.r)?;
    let criterion: Criterion = args.criterion.parse()?;
    let cfg = fit_config_from(
        g_range.0.max(1) as u64,
        q_range.0.max(1) as u64,
        r_range.0 as u64,
        &args.family,
        &args.init,
        args.seed,
        args.tol,
        args.max_iter,
    )?;
    let mut grid = SelectionGrid::new(g_range, q_range, r_range, criterion);
    grid.param_cap = args.param_cap;
    let (best, table) = grid_search(&data, &grid, &cfg, args.restarts as usize)?;

    let mut out = nalgebra::DMatrix::zeros(table.len(), 8);
    for (i, row) in table.iter().enumerate() {
        out[(i, 0)] = row.g as f64;
        out[(i, 1)] = row.q as f64;
        out[(i, 2)] = row.r as f64;
        out[(i, 3)] = row.m as f64;
        out[(i, 4)] = row.loglik;
        out[(i, 5)] = row.bic;
        out[(i, 6)] = row.icl;
        out[(i, 7)] = f64::from(u8::from(row.converged));
    }
    let header: Vec<String> = ["g", "q", "r", "m", "loglik", "bic", "icl", "converged"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write_csv(&args.table, &header, &out)?;
    write_model(&args.out, &best.model, Some(fit_meta(&best, args.seed)))?;
    println!(
        "best g={} q={} r={} {}={:.6}",
        best.model.g(),
        best.model.dims.q,
        best.model.dims.r,
        args.criterion,
        match criterion {
            Criterion::Bic => best.bic,
            Criterion::Icl => best.icl,
        }
    );
    Ok(0)
}

fn cmd_score(args: ScoreArgs) -> Result<i32> {
    let (model, _) = read_model(&args.model)?;
    let data = load_dataset(&args.data)?;
    if data.p() != model.dims.p {
        return Err(Error::Dimension(format!(
            "model expects p = {} columns, data has {}",
            model.dims.p,
            data.p()
        )));
    }
    let stats = e_step(&model, &data, 0)?;
    let labels = map_labels(&stats.z);
    let scores = factor_scores(&model, &data, &stats);
    let g = model.g();
    let q = model.dims.q;
    let n = data.n();
    let mut out = nalgebra::DMatrix::zeros(n, 1 + g + q);
    for j in 0..n {
        out[(j, 0)] = f64::from(labels[j]);
        for i in 0..g {
            out[(j, 1 + i)] = stats.z[(i, j)];
        }
        for k in 0..q {
            out[(j, 1 + g + k)] = scores[(j, k)];
        }
    }
    let mut header = vec!["label".to_string()];
    header.extend((1..=g).map(|i| format!("post_{i}")));
    header.extend((1..=q).map(|k| format!("score_{k}")));
    write_csv(&args.out, &header, &out)?;
    println!("scored {n} observations under a g={g} {} model", model.family);
    Ok(0)
}

fn cmd_sample(args: SampleArgs) -> Result<i32> {
    let (model, _) = read_model(&args.model)?;
    let (sample, labels) = sample_mixture(&model, args.n as usize, args.seed)?;
    let mut header: Vec<String> = (1..=model.dims.p).map(|k| format!("y{k}")).collect();
    if args.labels {
        header.push("label".into());
        write_csv_labeled(&args.out, &header, &sample, &labels)?;
    } else {
        write_csv(&args.out, &header, &sample)?;
    }
    println!("sampled n={} rows from a g={} model", args.n, model.g());
    Ok(0)
}

fn cmd_metrics(args: MetricsArgs) -> Result<i32> {
    let pred = read_labels(&args.pred)?;
    let truth = read_labels(&args.truth)?;
    println!("ccr={}", ccr(&pred, &truth)?);
    println!("ari={}", ari(&pred, &truth)?);
    println!("ami={}", ami(&pred, &truth)?);
    Ok(0)
}
