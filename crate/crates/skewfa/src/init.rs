//! Starting-value strategies: partition the data, fit a classical factor
//! analyzer per cluster, and seed the skewness from the sign of the factor
//!-score skewness. The nested strategy instead fits a simpler family first
//! and lifts its parameters.

use crate::ecm::{fit, fit_from, FitConfig, FitReport};
use crate::error::{Error, Result};
use crate::model::{ComponentParams, Dataset, Dims, Family, MixtureModel};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::str::FromStr;

/// Near-Gaussian starting df so early iterations are not dominated by
/// tail-weight estimation.
const NU_START: f64 = 40.0;

/// How the initial partition is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Kmeans,
    RandomPartition,
    NestedModel,
}

impl FromStr for InitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kmeans" => Ok(InitKind::Kmeans),
            "random" | "random_partition" => Ok(InitKind::RandomPartition),
            "nested" | "nested_model" => Ok(InitKind::NestedModel),
            other => Err(Error::Config(format!(
                "unknown init strategy {other:?}; expected kmeans|random|nested"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InitStrategy {
    pub kind: InitKind,
    pub restarts: usize,
    pub seed: u64,
}

impl InitStrategy {
    pub fn new(kind: InitKind, restarts: usize, seed: u64) -> Result<Self> {
        if restarts == 0 {
            return Err(Error::Config("restarts must be >= 1".into()));
        }
        Ok(Self {
            kind,
            restarts,
            seed,
        })
    }
}

/// Builds a starting model. Partition-based strategies require every
/// cluster to have at least q + 2 points and re-partition with fresh seeds
/// up to 20 times before giving up.
pub fn initialize(data: &Dataset, config: &FitConfig, strategy: &InitStrategy) -> Result<MixtureModel> {
    config.validate(data)?;
    if strategy.kind == InitKind::NestedModel {
        return nested_init(data, config, strategy.seed);
    }
    let g = config.g;
    let min_size = config.q + 2;
    let mut last_err = None;
    for attempt in 0..20 {
        let seed = strategy.seed.wrapping_add(attempt as u64 * 0x9E37_79B9);
        let assign = match strategy.kind {
            InitKind::Kmeans => kmeans_labels(&data.y, g, seed),
            InitKind::RandomPartition => random_partition(data.n(), g, seed),
            InitKind::NestedModel => unreachable!(),
        };
        let sizes = cluster_sizes(&assign, g);
        if sizes.iter().any(|&s| s < min_size) {
            last_err = Some(format!(
                "attempt {}: cluster sizes {sizes:?} below minimum {min_size}",
                attempt + 1
            ));
            continue;
        }
        return model_from_partition(data, config, &assign);
    }
    Err(Error::Initialization {
        g,
        n: data.n(),
        reason: last_err.unwrap_or_else(|| "no valid partition".into()),
    })
}

/// Runs `fit` from each restart (seeded by `seed + restart index`) and
/// returns the report with the highest final log-likelihood; ties keep the
/// lowest restart index.
pub fn best_of_restarts(
    data: &Dataset,
    config: &FitConfig,
    strategy: &InitStrategy,
) -> Result<FitReport> {
    let runs: Vec<std::result::Result<FitReport, String>> = (0..strategy.restarts)
        .into_par_iter()
        .map(|t| {
            let mut cfg = config.clone();
            cfg.seed = strategy.seed.wrapping_add(t as u64);
            cfg.init = strategy.kind;
            fit(data, &cfg).map_err(|e| format!("restart {t}: {e}"))
        })
        .collect();

    let mut best: Option<FitReport> = None;
    let mut causes = Vec::new();
    for run in runs {
        match run {
            Ok(report) => {
                let better = match &best {
                    None => true,
                    Some(b) => report.loglik() > b.loglik(),
                };
                if better {
                    best = Some(report);
                }
            }
            Err(cause) => causes.push(cause),
        }
    }
    best.ok_or(Error::AllRestartsFailed {
        count: strategy.restarts,
        causes,
    })
}

fn cluster_sizes(assign: &[usize], g: usize) -> Vec<usize> {
    let mut sizes = vec![0usize; g];
    for &a in assign {
        sizes[a] += 1;
    }
    sizes
}

fn random_partition(n: usize, g: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // One point per cluster guaranteed, remainder uniform.
    let mut assign: Vec<usize> = (0..n).map(|_| rng.random_range(0..g)).collect();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    for (i, &j) in idx.iter().take(g).enumerate() {
        assign[j] = i;
    }
    assign
}

/// Lloyd's algorithm with k-means++ seeding; deterministic for a fixed seed.
pub fn kmeans_labels(y: &DMatrix<f64>, g: usize, seed: u64) -> Vec<usize> {
    let n = y.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<DVector<f64>> = Vec::with_capacity(g);
    centers.push(y.row(rng.random_range(0..n)).transpose());
    while centers.len() < g {
        let d2: Vec<f64> = (0..n)
            .map(|j| {
                let row = y.row(j).transpose();
                centers
                    .iter()
                    .map(|c| (&row - c).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            centers.push(y.row(rng.random_range(0..n)).transpose());
            continue;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (j, &d) in d2.iter().enumerate() {
            target -= d;
            if target <= 0.0 {
                pick = j;
                break;
            }
        }
        centers.push(y.row(pick).transpose());
    }

    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for j in 0..n {
            let row = y.row(j).transpose();
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, c) in centers.iter().enumerate() {
                let d = (&row - c).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            if assign[j] != best {
                assign[j] = best;
                changed = true;
            }
        }
        // Recompute centers; an emptied cluster takes the farthest point.
        for i in 0..g {
            let members: Vec<usize> = (0..n).filter(|&j| assign[j] == i).collect();
            if members.is_empty() {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = (y.row(a).transpose() - &centers[assign[a]]).norm_squared();
                        let db = (y.row(b).transpose() - &centers[assign[b]]).norm_squared();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centers[i] = y.row(far).transpose();
                assign[far] = i;
                changed = true;
                continue;
            }
            let mut c = DVector::zeros(y.ncols());
            for &j in &members {
                c += y.row(j).transpose();
            }
            centers[i] = c / members.len() as f64;
        }
        if !changed {
            break;
        }
    }
    assign
}

fn model_from_partition(data: &Dataset, config: &FitConfig, assign: &[usize]) -> Result<MixtureModel> {
    let g = config.g;
    let p = data.p();
    let q = config.q;
    let r = config.family.effective_r(config.r);
    let n = data.n() as f64;
    let nu0 = if config.family.heavy_tailed() {
        NU_START
    } else {
        f64::INFINITY
    };

    let mut components = Vec::with_capacity(g);
    for i in 0..g {
        let members: Vec<usize> = (0..data.n()).filter(|&j| assign[j] == i).collect();
        let ni = members.len();
        let mut mu = DVector::zeros(p);
        for &j in &members {
            mu += data.row(j);
        }
        mu /= ni as f64;
        let mut cov = DMatrix::zeros(p, p);
        for &j in &members {
            let d = data.row(j) - &mu;
            cov += &d * d.transpose();
        }
        cov /= ni as f64;

        let (loadings, uniq) = fa_em(&cov, q);

        // Regression-method factor scores of the cluster under (B, D).
        let d_inv = DVector::from_iterator(p, uniq.iter().map(|&d| 1.0 / d));
        let bt_dinv = {
            let mut m = loadings.transpose();
            for (col, di) in d_inv.iter().enumerate() {
                m.column_mut(col).scale_mut(*di);
            }
            m
        };
        let c_small = (&bt_dinv * &loadings + DMatrix::identity(q, q))
            .try_inverse()
            .ok_or_else(|| Error::NotPositiveDefinite("FA posterior precision".into()))?;
        let gamma = &c_small * &bt_dinv;

        let skew = if r > 0 {
            let scores: Vec<DVector<f64>> = members
                .iter()
                .map(|&j| &gamma * (data.row(j) - &mu))
                .collect();
            skew_sign_init(&scores, q, r)
        } else {
            DMatrix::zeros(q, 0)
        };

        components.push(ComponentParams {
            pi: ni as f64 / n,
            mu,
            loadings,
            skew,
            uniquenesses: uniq,
            nu: nu0,
        });
    }
    MixtureModel::new(
        components,
        Dims {
            p,
            q,
            r: config.family.effective_r(config.r),
        },
        config.family,
    )
}

/// Column k of Delta starts as sign(skewness_k) * (s_k / 2) on coordinate
/// k (cycled modulo q when r > q), where s_k is the standard deviation of
/// the k-th factor score.
fn skew_sign_init(scores: &[DVector<f64>], q: usize, r: usize) -> DMatrix<f64> {
    let n = scores.len() as f64;
    let mut delta = DMatrix::zeros(q, r);
    for k in 0..r {
        let dim = k % q;
        let vals: Vec<f64> = scores.iter().map(|s| s[dim]).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-6);
        let m3 = vals.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
        let skewness = m3 / sd.powi(3);
        delta[(dim, k)] = skewness.signum() * 0.5 * sd;
    }
    delta
}

/// Classical factor-analysis EM on a covariance matrix: principal-axis
/// start from the top-q eigenvectors, then at most 200 iterations of the
/// standard B/D updates (relative tolerance 1e-8 on the parameters).
pub fn fa_em(cov: &DMatrix<f64>, q: usize) -> (DMatrix<f64>, DVector<f64>) {
    let p = cov.nrows();
    let eig = cov.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mean_tail = if p > q {
        order[q..].iter().map(|&i| eig.eigenvalues[i].max(0.0)).sum::<f64>() / (p - q) as f64
    } else {
        0.0
    };
    let mut b = DMatrix::zeros(p, q);
    for (col, &idx) in order.iter().take(q).enumerate() {
        let lam = (eig.eigenvalues[idx] - mean_tail).max(eig.eigenvalues[idx].max(1e-8) * 0.1);
        b.set_column(col, &(eig.eigenvectors.column(idx) * lam.sqrt()));
    }
    let mut d = DVector::from_fn(p, |l, _| {
        (cov[(l, l)] - b.row(l).norm_squared()).max(cov[(l, l)].max(1e-8) * 0.05)
    });

    for _ in 0..200 {
        let d_inv = DVector::from_iterator(p, d.iter().map(|&v| 1.0 / v));
        let bt_dinv = {
            let mut m = b.transpose();
            for (col, di) in d_inv.iter().enumerate() {
                m.column_mut(col).scale_mut(*di);
            }
            m
        };
        let c = match (&bt_dinv * &b + DMatrix::identity(q, q)).try_inverse() {
            Some(c) => c,
            None => break,
        };
        let gamma = &c * &bt_dinv; // q x p
        let g_s = &gamma * cov; // q x p
        let exx = &c + &g_s * gamma.transpose(); // q x q
        let b_new = match exx.clone().try_inverse() {
            Some(inv) => g_s.transpose() * inv,
            None => break,
        };
        let mut d_new = DVector::zeros(p);
        let bg_s = &b_new * &g_s; // p x p
        for l in 0..p {
            d_new[l] = (cov[(l, l)] - bg_s[(l, l)]).max(1e-10);
        }
        let rel = ((&b_new - &b).norm() + (&d_new - &d).norm())
            / (b.norm() + d.norm()).max(1e-12);
        b = b_new;
        d = d_new;
        if rel < 1e-8 {
            break;
        }
    }
    (b, d)
}

/// Nested-model initialization: fit the next-simpler family and lift its
/// parameters. CFUSTFA lifts a CFUSNFA fit with nu reset to the starting
/// value; CFUSNFA and MtFA lift an MFA fit (with the skew-sign heuristic
/// applied to the MFA factor scores for CFUSNFA); MFA falls back to the
/// k-means path.
fn nested_init(data: &Dataset, config: &FitConfig, seed: u64) -> Result<MixtureModel> {
    let kmeans_strategy = InitStrategy {
        kind: InitKind::Kmeans,
        restarts: 1,
        seed,
    };
    let nested_family = match config.family {
        Family::Cfustfa => Family::Cfusnfa,
        Family::Cfusnfa | Family::Mtfa => Family::Mfa,
        Family::Mfa => {
            return initialize(data, config, &kmeans_strategy);
        }
    };
    let mut nested_cfg = config.clone();
    nested_cfg.family = nested_family;
    nested_cfg.r = nested_family.effective_r(config.r);
    nested_cfg.init = InitKind::Kmeans;
    nested_cfg.tol = (config.tol * 100.0).min(1e-3);
    nested_cfg.max_iter = config.max_iter.min(200);
    let start = initialize(data, &nested_cfg, &kmeans_strategy)?;
    let nested_report = fit_from(data, &nested_cfg, start)?;

    let target_r = config.family.effective_r(config.r);
    let nu0 = if config.family.heavy_tailed() {
        NU_START
    } else {
        f64::INFINITY
    };
    let components = nested_report
        .model
        .components
        .iter()
        .map(|c| {
            let mut skew = DMatrix::zeros(config.q, target_r);
            let copy_cols = c.skew.ncols().min(target_r);
            for k in 0..copy_cols {
                skew.set_column(k, &c.skew.column(k));
            }
            if config.family.is_skew() && c.skew.ncols() == 0 {
                // Lifting from a symmetric family: seed a mild diagonal skew.
                for k in 0..target_r {
                    skew[(k % config.q, k)] = 0.1;
                }
            }
            ComponentParams {
                pi: c.pi,
                mu: c.mu.clone(),
                loadings: c.loadings.clone(),
                skew,
                uniquenesses: c.uniquenesses.clone(),
                nu: nu0,
            }
        })
        .collect();
    MixtureModel::new(
        components,
        Dims {
            p: data.p(),
            q: config.q,
            r: target_r,
        },
        config.family,
    )
}
