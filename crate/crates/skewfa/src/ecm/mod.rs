//! The ECM fitting loop: E-step expectations, CM-steps, Aitken-accelerated
//! convergence, factor scores, and MAP labels.

mod cmstep;
mod estep;

pub use cmstep::{cm_step_sequence, cm_steps, q_function, q_nu_block, solve_nu, NuRoot};
pub use estep::{e_step, SuffStats};

use crate::error::{Error, Result};
use crate::init::{initialize, InitKind, InitStrategy};
use crate::model::{count_params, Dataset, Family, MixtureModel};
use crate::select::{bic, icl};
use nalgebra::DMatrix;

/// Fit configuration. Defaults follow the implementation notes: Aitken
/// threshold 1e-6, at most 2000 iterations, df bounded to [2.0001, 200]
/// (below 2 the covariance ceases to exist, above 200 the fit is
/// indistinguishable from Gaussian tails).
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub g: usize,
    pub q: usize,
    pub r: usize,
    pub family: Family,
    pub tol: f64,
    pub max_iter: usize,
    pub init: InitKind,
    pub seed: u64,
    pub nu_bounds: (f64, f64),
}

impl FitConfig {
    pub fn new(g: usize, q: usize, r: usize, family: Family) -> Self {
        Self {
            g,
            q,
            r,
            family,
            tol: 1e-6,
            max_iter: 2000,
            init: InitKind::Kmeans,
            seed: 0,
            nu_bounds: (2.0001, 200.0),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if self.g == 0 || self.q == 0 {
            return Err(Error::Config("g and q must be at least 1".into()));
        }
        if self.family.is_skew() && self.r == 0 {
            return Err(Error::Config("skew families require r >= 1".into()));
        }
        if self.q > data.p() {
            return Err(Error::Config(format!(
                "q = {} exceeds the data dimension p = {}",
                self.q,
                data.p()
            )));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::Config("tol must be positive and max_iter >= 1".into()));
        }
        if data.n() < self.g {
            return Err(Error::Config(format!(
                "n = {} is smaller than g = {}",
                data.n(),
                self.g
            )));
        }
        if !(self.nu_bounds.0 > 2.0 && self.nu_bounds.1 > self.nu_bounds.0) {
            return Err(Error::Config("nu bounds must satisfy 2 < lo < hi".into()));
        }
        Ok(())
    }
}

/// Result of a fit: the model, the likelihood trace, posteriors (g x n),
/// MAP labels (1-based), factor scores (n x q), and selection criteria.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: MixtureModel,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub posteriors: DMatrix<f64>,
    pub labels: Vec<u32>,
    pub scores: DMatrix<f64>,
    pub bic: f64,
    pub icl: f64,
}

impl FitReport {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("non-empty trace")
    }
}

/// Aitken extrapolation gap from the last three log-likelihood values:
/// a = (l2 - l1)/(l1 - l0), linf = l1 + (l2 - l1)/(1 - a), gap = |linf - l1|.
/// Returns None while fewer than three values exist or when the
/// acceleration denominator |1 - a| falls below 1e-8 (the test is skipped
/// on such iterations and the iteration cap rules).
pub fn aitken_gap(trace: &[f64]) -> Option<f64> {
    if trace.len() < 3 {
        return None;
    }
    let l0 = trace[trace.len() - 3];
    let l1 = trace[trace.len() - 2];
    let l2 = trace[trace.len() - 1];
    let denom = l1 - l0;
    if denom.abs() < 1e-300 {
        return Some((l2 - l1).abs());
    }
    let a = (l2 - l1) / denom;
    if (1.0 - a).abs() < 1e-8 {
        return None;
    }
    Some(((l2 - l1) / (1.0 - a)).abs())
}

/// Fits the configured mixture, starting from the configured initializer.
pub fn fit(data: &Dataset, config: &FitConfig) -> Result<FitReport> {
    fit_with_progress(data, config, |_, _, _| {})
}

/// Like [`fit`] with a per-iteration observer `(iteration, loglik, gap)`.
pub fn fit_with_progress<F: FnMut(usize, f64, Option<f64>)>(
    data: &Dataset,
    config: &FitConfig,
    on_iter: F,
) -> Result<FitReport> {
    config.validate(data)?;
    let strategy = InitStrategy {
        kind: config.init,
        restarts: 1,
        seed: config.seed,
    };
    let initial = initialize(data, config, &strategy)?;
    fit_from_with_progress(data, config, initial, on_iter)
}

/// Fits starting from an explicit initial model.
pub fn fit_from(data: &Dataset, config: &FitConfig, initial: MixtureModel) -> Result<FitReport> {
    fit_from_with_progress(data, config, initial, |_, _, _| {})
}

pub fn fit_from_with_progress<F: FnMut(usize, f64, Option<f64>)>(
    data: &Dataset,
    config: &FitConfig,
    initial: MixtureModel,
    mut on_iter: F,
) -> Result<FitReport> {
    config.validate(data)?;
    initial.validate()?;
    let n = data.n();
    let pi_floor = 1.0 / (10.0 * n as f64);

    let mut model = initial;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut current_stats: Option<SuffStats> = None;

    for k in 1..=config.max_iter {
        let stats = e_step(&model, data, config.seed)?;
        trace.push(stats.loglik);
        let gap = aitken_gap(&trace);
        on_iter(k, stats.loglik, gap);
        if let Some(gap) = gap {
            if gap < config.tol {
                converged = true;
                iterations = k;
                current_stats = Some(stats);
                break;
            }
        }
        iterations = k;
        let next = cm_steps(&stats, data, &model, config.nu_bounds)?;
        for (i, c) in next.components.iter().enumerate() {
            if c.pi < pi_floor {
                return Err(Error::DegenerateComponent {
                    component: i + 1,
                    iteration: k,
                    pi: c.pi,
                    floor: pi_floor,
                });
            }
        }
        model = next;
        current_stats = None;
    }

    // Reporting pass: posteriors and scores must describe the final model.
    let stats = match current_stats {
        Some(s) => s,
        None => {
            let s = e_step(&model, data, config.seed)?;
            trace.push(s.loglik);
            s
        }
    };

    let labels = map_labels(&stats.z);
    let scores = factor_scores(&model, data, &stats);
    let m = count_params(model.dims, model.family, model.g());
    let loglik = *trace.last().expect("trace");
    let bic_v = bic(loglik, m, n);
    let icl_v = icl(bic_v, &stats.z);
    Ok(FitReport {
        model,
        loglik_trace: trace,
        iterations,
        converged,
        posteriors: stats.z.clone(),
        labels,
        scores,
        bic: bic_v,
        icl: icl_v,
    })
}

/// MAP labels from a g x n posterior matrix; 1-based, ties broken by the
/// lowest component index.
pub fn map_labels(posteriors: &DMatrix<f64>) -> Vec<u32> {
    let (g, n) = posteriors.shape();
    (0..n)
        .map(|j| {
            let mut best = 0usize;
            for i in 1..g {
                if posteriors[(i, j)] > posteriors[(best, j)] {
                    best = i;
                }
            }
            best as u32 + 1
        })
        .collect()
}

/// Estimated factor scores: u_hat_j = sum_i z_ij e3_ij.
pub fn factor_scores(model: &MixtureModel, data: &Dataset, stats: &SuffStats) -> DMatrix<f64> {
    let n = data.n();
    let q = model.dims.q;
    let g = model.g();
    let mut scores = DMatrix::zeros(n, q);
    for j in 0..n {
        let mut acc = nalgebra::DVector::zeros(q);
        for i in 0..g {
            acc += &stats.e3[i][j] * stats.z[(i, j)];
        }
        scores.row_mut(j).copy_from(&acc.transpose());
    }
    scores
}
