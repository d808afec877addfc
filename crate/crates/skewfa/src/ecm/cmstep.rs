//! Conditional maximization steps and the df score equation.

use super::estep::SuffStats;
use crate::error::{Error, Result};
use crate::model::{ComponentParams, Dataset, MixtureModel};
use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::function::gamma::{digamma, ln_gamma};

/// Relative floor applied to each updated uniqueness, as a multiple of the
/// corresponding data column variance (Heywood-case protection).
const D_FLOOR_REL: f64 = 1e-8;

/// Outcome of the df score-equation solve.
#[derive(Debug, Clone, Copy)]
pub struct NuRoot {
    pub nu: f64,
    /// True when no sign change existed inside the bounds and the value was
    /// clamped to the nearer bound.
    pub clamped: bool,
}

/// One full sweep of CM-steps.
///
/// Update order: pi, Delta, mu, B, d, nu. The location update conditions on
/// the previous loadings (its closed form uses B^(k)), and the loadings
/// update conditions on the fresh location (its closed form uses mu^(k+1));
/// each step is the exact conditional maximizer of the Q-function, which
/// keeps the observed log-likelihood monotone.
pub fn cm_steps(
    stats: &SuffStats,
    data: &Dataset,
    prev: &MixtureModel,
    nu_bounds: (f64, f64),
) -> Result<MixtureModel> {
    Ok(cm_step_sequence(stats, data, prev, nu_bounds)?
        .pop()
        .expect("six stage models"))
}

/// The six cumulative stage models of one CM sweep, in update order
/// (pi, Delta, mu, B, d, nu); the last entry is the full `cm_steps` result.
/// Exposed so that the Q-function can be evaluated before and after every
/// sub-step.
pub fn cm_step_sequence(
    stats: &SuffStats,
    data: &Dataset,
    prev: &MixtureModel,
    nu_bounds: (f64, f64),
) -> Result<Vec<MixtureModel>> {
    let g = prev.g();
    let n = data.n();
    let p = prev.dims.p;
    let q = prev.dims.q;
    let r = prev.family.effective_r(prev.dims.r);
    let skew = prev.family.is_skew() && r > 0;
    let heavy = prev.family.heavy_tailed();
    let col_vars = column_variances(&data.y);

    let mut pi_new = Vec::with_capacity(g);
    let mut skew_news = Vec::with_capacity(g);
    let mut mu_news = Vec::with_capacity(g);
    let mut loading_news = Vec::with_capacity(g);
    let mut d_news = Vec::with_capacity(g);
    let mut nu_news = Vec::with_capacity(g);
    for i in 0..g {
        let comp = &prev.components[i];
        let n_i: f64 = (0..n).map(|j| stats.z[(i, j)]).sum();
        if !(n_i > 0.0) {
            return Err(Error::Config(format!(
                "component {} received zero total responsibility",
                i + 1
            )));
        }

        // CM-step 2: skewness.
        let skew_new = if skew {
            let mut sum_e5 = DMatrix::zeros(q, r);
            let mut sum_e2 = DMatrix::zeros(r, r);
            for j in 0..n {
                let z = stats.z[(i, j)];
                sum_e5 += &stats.e5[i][j] * z;
                sum_e2 += &stats.e2[i][j] * z;
            }
            solve_right(&sum_e5, &sum_e2, "sum z e2")?
        } else {
            DMatrix::zeros(q, 0)
        };

        // CM-step 4 (computed before B, matching the superscripts of the
        // closed forms): mu uses the previous loadings.
        let mut sum_zw = 0.0;
        let mut sum_zwy = DVector::zeros(p);
        let mut sum_ze3 = DVector::zeros(q);
        for j in 0..n {
            let z = stats.z[(i, j)];
            let w = stats.w[(i, j)];
            sum_zw += z * w;
            sum_zwy += data.row(j) * (z * w);
            sum_ze3 += &stats.e3[i][j] * z;
        }
        let mu_new = (&sum_zwy - &comp.loadings * &sum_ze3) / sum_zw;

        // CM-step 3: loadings against the fresh location.
        let mut sum_dy_e3 = DMatrix::zeros(p, q);
        let mut sum_e4 = DMatrix::zeros(q, q);
        let mut sum_zw_dy2 = DVector::zeros(p);
        for j in 0..n {
            let z = stats.z[(i, j)];
            let w = stats.w[(i, j)];
            let dy = data.row(j) - &mu_new;
            sum_dy_e3 += &dy * stats.e3[i][j].transpose() * z;
            sum_e4 += &stats.e4[i][j] * z;
            sum_zw_dy2 += dy.component_mul(&dy) * (z * w);
        }
        let loadings_new = solve_right(&sum_dy_e3, &sum_e4, "sum z e4")?;

        // CM-step 5: uniquenesses, diagonal extraction with a relative floor.
        let be4 = &loadings_new * &sum_e4 * loadings_new.transpose();
        let mut d_new = DVector::zeros(p);
        for l in 0..p {
            let cross: f64 = (0..q).map(|k| loadings_new[(l, k)] * sum_dy_e3[(l, k)]).sum();
            let v = (sum_zw_dy2[l] - 2.0 * cross + be4[(l, l)]) / n_i;
            let floor = D_FLOOR_REL * col_vars[l];
            if v < floor {
                log::warn!(
                    "component {}: uniqueness {} floored ({v:.3e} -> {floor:.3e})",
                    i + 1,
                    l + 1
                );
                d_new[l] = floor;
            } else {
                d_new[l] = v;
            }
        }

        // CM-step 6: degrees of freedom from the score equation at the
        // freshly updated component.
        let nu_new = if heavy {
            let partial = ComponentParams {
                pi: n_i / n as f64,
                mu: mu_new.clone(),
                loadings: loadings_new.clone(),
                skew: skew_new.clone(),
                uniquenesses: d_new.clone(),
                nu: comp.nu,
            };
            let root = solve_nu(stats, data, &partial, i, nu_bounds)?;
            if root.clamped {
                log::warn!(
                    "component {}: nu clamped to {} (no root inside bounds)",
                    i + 1,
                    root.nu
                );
            }
            root.nu
        } else {
            f64::INFINITY
        };

        pi_new.push(n_i / n as f64);
        skew_news.push(skew_new);
        mu_news.push(mu_new);
        loading_news.push(loadings_new);
        d_news.push(d_new);
        nu_news.push(nu_new);
    }

    // CM-step 1 result, normalized on exposure.
    let total_pi: f64 = pi_new.iter().sum();
    for pi in &mut pi_new {
        *pi /= total_pi;
    }

    // Cumulative stage models.
    let mut stages = Vec::with_capacity(6);
    let mut comps: Vec<ComponentParams> = prev.components.clone();
    for (c, &pi) in comps.iter_mut().zip(pi_new.iter()) {
        c.pi = pi;
    }
    stages.push(MixtureModel::new(comps.clone(), prev.dims, prev.family)?);
    for (c, sk) in comps.iter_mut().zip(skew_news.into_iter()) {
        c.skew = sk;
    }
    stages.push(MixtureModel::new(comps.clone(), prev.dims, prev.family)?);
    for (c, mu) in comps.iter_mut().zip(mu_news.into_iter()) {
        c.mu = mu;
    }
    stages.push(MixtureModel::new(comps.clone(), prev.dims, prev.family)?);
    for (c, b) in comps.iter_mut().zip(loading_news.into_iter()) {
        c.loadings = b;
    }
    stages.push(MixtureModel::new(comps.clone(), prev.dims, prev.family)?);
    for (c, d) in comps.iter_mut().zip(d_news.into_iter()) {
        c.uniquenesses = d;
    }
    stages.push(MixtureModel::new(comps.clone(), prev.dims, prev.family)?);
    for (c, nu) in comps.iter_mut().zip(nu_news.into_iter()) {
        c.nu = nu;
    }
    stages.push(MixtureModel::new(comps, prev.dims, prev.family)?);
    Ok(stages)
}

/// Solves A = X S for X (i.e. X = A S^{-1}) with S symmetric; falls back to
/// a ridge of 1e-10 * trace when S is singular.
fn solve_right(a: &DMatrix<f64>, s: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let k = s.nrows();
    if k == 0 {
        return Ok(DMatrix::zeros(a.nrows(), 0));
    }
    let try_solve = |s: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        Cholesky::new(s.clone()).map(|ch| ch.solve(&a.transpose()).transpose())
    };
    if let Some(x) = try_solve(s) {
        return Ok(x);
    }
    let ridge = 1e-10 * s.trace().abs().max(1e-30);
    log::warn!("{what} accumulation singular; adding ridge {ridge:.3e}");
    let mut s2 = s.clone();
    for l in 0..k {
        s2[(l, l)] += ridge;
    }
    try_solve(&s2).ok_or_else(|| Error::NotPositiveDefinite(format!("{what} (after ridge)")))
}

/// Root of the df score equation for component `i`, over `nu_bounds`:
///
/// 0 = n_i [ln(nu/2) - psi(nu/2) + 1]
///   + sum_j z_ij [psi((nu_old + p)/2) - ln((nu_old + eta_j)/2)
///                 - (nu_old + p)/(nu_old + eta_j)]
///
/// with eta_j the Mahalanobis form under the freshly updated component
/// scale B (I + Delta Delta') B' + D. The left side is strictly decreasing
/// in nu; when it has no zero inside the bounds the nearer bound is
/// returned with `clamped` set.
pub fn solve_nu(
    stats: &SuffStats,
    data: &Dataset,
    updated: &ComponentParams,
    i: usize,
    nu_bounds: (f64, f64),
) -> Result<NuRoot> {
    let n = data.n();
    let p = updated.mu.len() as f64;
    let nu_old = updated.nu;
    let (lo, hi) = nu_bounds;

    let q = updated.loadings.ncols();
    let scale = &updated.loadings
        * (DMatrix::identity(q, q) + &updated.skew * updated.skew.transpose())
        * updated.loadings.transpose()
        + DMatrix::from_diagonal(&updated.uniquenesses);
    let chol = Cholesky::new(scale)
        .ok_or_else(|| Error::NotPositiveDefinite(format!("nu-step scale of component {}", i + 1)))?;

    let mut n_i = 0.0;
    let mut s_term = 0.0;
    let dig = digamma(0.5 * (nu_old + p));
    for j in 0..n {
        let z = stats.z[(i, j)];
        if z == 0.0 {
            continue;
        }
        let dy = data.row(j) - &updated.mu;
        let mut half = dy;
        chol.l_dirty().solve_lower_triangular_unchecked_mut(&mut half);
        let eta = half.dot(&half);
        n_i += z;
        s_term += z * (dig - (0.5 * (nu_old + eta)).ln() - (nu_old + p) / (nu_old + eta));
    }
    if !(n_i > 0.0) {
        return Err(Error::Config(format!(
            "solve_nu: component {} has zero responsibility",
            i + 1
        )));
    }

    let f = |nu: f64| -> f64 { n_i * ((0.5 * nu).ln() - digamma(0.5 * nu) + 1.0) + s_term };

    let f_lo = f(lo);
    let f_hi = f(hi);
    // f is strictly decreasing: no root when both ends share a sign.
    if f_lo <= 0.0 {
        return Ok(NuRoot {
            nu: lo,
            clamped: true,
        });
    }
    if f_hi >= 0.0 {
        return Ok(NuRoot {
            nu: hi,
            clamped: true,
        });
    }
    // Bracketed bisection with a secant proposal each step.
    let (mut a, mut b) = (lo, hi);
    let (mut fa, mut fb) = (f_lo, f_hi);
    let mut x = 0.5 * (a + b);
    for _ in 0..200 {
        let secant = a - fa * (b - a) / (fb - fa);
        x = if secant.is_finite() && secant > a && secant < b {
            secant
        } else {
            0.5 * (a + b)
        };
        let fx = f(x);
        if fx.abs() < 1e-10 || (b - a) < 1e-12 * x.max(1.0) {
            return Ok(NuRoot {
                nu: x,
                clamped: false,
            });
        }
        if fx > 0.0 {
            a = x;
            fa = fx;
        } else {
            b = x;
            fb = fx;
        }
    }
    Ok(NuRoot {
        nu: x,
        clamped: false,
    })
}

/// The (pi, Delta, B, mu, D) part of the Q-function — the conditional
/// expectation of the complete-data log-likelihood given `stats` — exactly
/// assembled from the sufficient statistics. Terms that involve only the
/// degrees of freedom (the mixing-density block) are omitted; they are
/// constant across CM-steps 1-5.
pub fn q_function(stats: &SuffStats, data: &Dataset, model: &MixtureModel) -> Result<f64> {
    let g = model.g();
    let n = data.n();
    let q = model.dims.q;
    let r = model.family.effective_r(model.dims.r);
    let mut total = 0.0;
    for i in 0..g {
        let comp = &model.components[i];
        let ln_pi = comp.pi.ln();
        let ln_det_d = comp.uniquenesses.iter().map(|d| d.ln()).sum::<f64>();
        let d_inv = DVector::from_iterator(
            comp.uniquenesses.len(),
            comp.uniquenesses.iter().map(|&d| 1.0 / d),
        );
        let dtd = if r > 0 {
            comp.skew.transpose() * &comp.skew
        } else {
            DMatrix::zeros(0, 0)
        };
        for j in 0..n {
            let z = stats.z[(i, j)];
            if z == 0.0 {
                continue;
            }
            let w = stats.w[(i, j)];
            let e3 = &stats.e3[i][j];
            let e4 = &stats.e4[i][j];
            let dy = data.row(j) - &comp.mu;

            // factor block: -1/2 E[(1/W)(X - Delta|U|)'(X - Delta|U|)]
            let mut factor_block = e4.trace();
            if r > 0 {
                let e5 = &stats.e5[i][j];
                let e2 = &stats.e2[i][j];
                let cross: f64 = (0..q)
                    .map(|a| (0..r).map(|b| comp.skew[(a, b)] * e5[(a, b)]).sum::<f64>())
                    .sum();
                factor_block += -2.0 * cross + (&dtd * e2).trace();
            }

            // error block: -1/2 E[(1/W)(dy - BX)' D^{-1} (dy - BX)] - 1/2 ln|D|
            let bt_dinv_dy = comp.loadings.transpose() * dy.component_mul(&d_inv);
            let quad = w * dy.component_mul(&d_inv).dot(&dy) - 2.0 * bt_dinv_dy.dot(e3)
                + btdb_quad(&comp.loadings, &d_inv, e4);
            total += z * (ln_pi - 0.5 * factor_block - 0.5 * quad - 0.5 * ln_det_d);
        }
    }
    Ok(total)
}

/// tr(B' D^{-1} B e4)
fn btdb_quad(b: &DMatrix<f64>, d_inv: &DVector<f64>, e4: &DMatrix<f64>) -> f64 {
    let q = b.ncols();
    let mut m = DMatrix::zeros(q, q);
    for l in 0..b.nrows() {
        let row = b.row(l);
        m += row.transpose() * row * d_inv[l];
    }
    (m * e4).trace()
}

/// Expected inverse-gamma mixing block of the Q-function for one component,
/// given externally computed conditional expectations kappa_j = E[ln W_j | y]
/// and w_j = E[1/W_j | y]:
/// sum_j z_ij [ (nu/2) ln(nu/2) - ln Gamma(nu/2) - (nu/2)(kappa_j + w_j) ].
/// The -(nu/2 + 1) E[ln W] piece contributes the kappa term; the remaining
/// -E[ln W] is parameter-free and omitted.
pub fn q_nu_block(z_row: &[f64], kappa: &[f64], w: &[f64], nu: f64) -> f64 {
    let half = 0.5 * nu;
    let mut total = 0.0;
    for ((&z, &k), &wi) in z_row.iter().zip(kappa).zip(w) {
        total += z * (half * half.ln() - ln_gamma(half) - half * (k + wi));
    }
    total
}

fn column_variances(y: &DMatrix<f64>) -> DVector<f64> {
    let n = y.nrows() as f64;
    let p = y.ncols();
    let mut out = DVector::zeros(p);
    for c in 0..p {
        let col = y.column(c);
        let mean = col.sum() / n;
        out[c] = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n.max(1.0);
    }
    out
}
