//! Model selection: BIC, ICL, and grid search over (g, q, r).

use crate::ecm::{FitConfig, FitReport};
use crate::error::{Error, Result};
use crate::init::{best_of_restarts, InitStrategy};
use crate::model::{count_params, Dataset, Dims, Family};
use nalgebra::DMatrix;
use rayon::prelude::*;

/// m log n - 2 loglik; smaller is preferred.
pub fn bic(loglik: f64, m: usize, n: usize) -> f64 {
    m as f64 * (n as f64).ln() - 2.0 * loglik
}

/// BIC + 2 ENT with ENT = -sum z log z (0 log 0 := 0); the entropy term
/// penalizes overlap between components.
pub fn icl(bic_value: f64, posteriors: &DMatrix<f64>) -> f64 {
    let ent: f64 = posteriors
        .iter()
        .map(|&z| if z > 0.0 { -z * z.ln() } else { 0.0 })
        .sum();
    bic_value + 2.0 * ent
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    Bic,
    Icl,
}

impl std::str::FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bic" => Ok(Criterion::Bic),
            "icl" => Ok(Criterion::Icl),
            other => Err(Error::Config(format!("unknown criterion {other:?}"))),
        }
    }
}

/// Inclusive ranges over g, q, r; `param_cap` caps the free-parameter
/// count. When absent, a cell is admissible only if its factor model has
/// strictly fewer free parameters than the corresponding full mixture on
/// the same (g, r) — fitting a factor model with more parameters than the
/// unconstrained mixture has no point.
#[derive(Debug, Clone)]
pub struct SelectionGrid {
    pub g_range: (usize, usize),
    pub q_range: (usize, usize),
    pub r_range: (usize, usize),
    pub criterion: Criterion,
    pub param_cap: Option<usize>,
    /// The r <= q working restriction; on by default.
    pub enforce_r_le_q: bool,
}

impl SelectionGrid {
    pub fn new(
        g_range: (usize, usize),
        q_range: (usize, usize),
        r_range: (usize, usize),
        criterion: Criterion,
    ) -> Self {
        Self {
            g_range,
            q_range,
            r_range,
            criterion,
            param_cap: None,
            enforce_r_le_q: true,
        }
    }
}

/// One fitted grid cell.
#[derive(Debug, Clone)]
pub struct GridRow {
    pub g: usize,
    pub q: usize,
    pub r: usize,
    pub m: usize,
    pub loglik: f64,
    pub bic: f64,
    pub icl: f64,
    pub converged: bool,
}

/// Free parameters of the full (non-factor) mixture used by the default
/// admissibility rule.
fn full_mixture_params(family: Family, p: usize, r: usize, g: usize) -> usize {
    let scale = p * (p + 1) / 2;
    let per = match family {
        Family::Cfustfa => p + scale + p * r + 1,
        Family::Cfusnfa => p + scale + p * r,
        Family::Mtfa => p + scale + 1,
        Family::Mfa => p + scale,
    };
    (g - 1) + g * per
}

/// Fits every admissible cell with `best_of_restarts` and returns the
/// criterion-minimizing report plus the full table (sorted by (g, q, r)).
/// Cells whose fits fail are logged and omitted from the table; if every
/// cell fails the errors are aggregated.
pub fn grid_search(
    data: &Dataset,
    grid: &SelectionGrid,
    base: &FitConfig,
    restarts: usize,
) -> Result<(FitReport, Vec<GridRow>)> {
    let p = data.p();
    let mut cells = Vec::new();
    for g in grid.g_range.0..=grid.g_range.1 {
        for q in grid.q_range.0..=grid.q_range.1 {
            for r in grid.r_range.0..=grid.r_range.1 {
                if g == 0 || q == 0 || q > p {
                    continue;
                }
                let r_eff = base.family.effective_r(r);
                if grid.enforce_r_le_q && r_eff > q {
                    continue;
                }
                let m = count_params(Dims { p, q, r: r_eff }, base.family, g);
                let cap = grid
                    .param_cap
                    .unwrap_or_else(|| full_mixture_params(base.family, p, r_eff, g));
                if m >= cap + usize::from(grid.param_cap.is_some()) {
                    // explicit caps are inclusive, the default rule is strict
                    continue;
                }
                cells.push((g, q, r, m));
            }
        }
    }
    // For symmetric families different r values collapse to the same model.
    if !base.family.is_skew() {
        let mut seen = std::collections::HashSet::new();
        cells.retain(|&(g, q, _, _)| seen.insert((g, q)));
    }
    if cells.is_empty() {
        return Err(Error::EmptyGrid(
            "no admissible (g, q, r) cell after the parameter cap and r <= q filters".into(),
        ));
    }

    let outcomes: Vec<(usize, usize, usize, usize, std::result::Result<FitReport, String>)> = cells
        .par_iter()
        .map(|&(g, q, r, m)| {
            let mut cfg = base.clone();
            cfg.g = g;
            cfg.q = q;
            cfg.r = r;
            let strategy = InitStrategy {
                kind: cfg.init,
                restarts,
                seed: cfg.seed,
            };
            let out = best_of_restarts(data, &cfg, &strategy).map_err(|e| e.to_string());
            (g, q, r, m, out)
        })
        .collect();

    let mut table = Vec::new();
    let mut best: Option<(f64, FitReport)> = None;
    let mut failures = Vec::new();
    for (g, q, r, m, out) in outcomes {
        match out {
            Ok(report) => {
                let row = GridRow {
                    g,
                    q,
                    r,
                    m,
                    loglik: report.loglik(),
                    bic: report.bic,
                    icl: report.icl,
                    converged: report.converged,
                };
                let score = match grid.criterion {
                    Criterion::Bic => row.bic,
                    Criterion::Icl => row.icl,
                };
                table.push(row);
                let better = match &best {
                    None => true,
                    Some((s, _)) => score < *s,
                };
                if better {
                    best = Some((score, report));
                }
            }
            Err(cause) => {
                log::warn!("grid cell (g={g}, q={q}, r={r}) failed: {cause}");
                failures.push(format!("(g={g}, q={q}, r={r}): {cause}"));
            }
        }
    }
    table.sort_by_key(|row| (row.g, row.q, row.r));
    match best {
        Some((_, report)) => Ok((report, table)),
        None => Err(Error::AllRestartsFailed {
            count: failures.len(),
            causes: failures,
        }),
    }
}
