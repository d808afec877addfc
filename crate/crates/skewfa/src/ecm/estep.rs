//! E-step: responsibilities and the conditional expectations feeding the
//! CM-steps.

use crate::dist::{logsumexp, mvn_cdf, mvt_cdf, positive_orthant_moments_with};
use crate::error::{Error, Result};
use crate::model::{Dataset, MixtureModel};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Gamma, Normal};
use statrs::function::gamma::ln_gamma;
use std::f64::consts::{LN_2, PI};
use std::sync::atomic::{AtomicUsize, Ordering};

/// Quadrature tolerance for the CDFs inside densities and responsibilities.
const Z_REL_TOL: f64 = 1e-9;
/// Quadrature tolerance for the truncated-moment reductions.
const MOMENT_REL_TOL: f64 = 1e-8;
/// Number of quasi-Monte Carlo draws in the per-point underflow fallback.
const FALLBACK_DRAWS: usize = 4096;

/// Per-(component, observation) conditional expectations. `z` columns sum
/// to one; `w` holds E[1/W]; `e1`..`e5` follow the factor-model hierarchy:
/// e1 = E[W^{-1}|U|], e2 = E[W^{-1}|U||U|'], e3 = E[W^{-1}X],
/// e4 = E[W^{-1}XX'], e5 = E[W^{-1}X|U|'], all conditional on the
/// observation and component membership.
#[derive(Debug, Clone)]
pub struct SuffStats {
    pub z: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub e1: Vec<Vec<DVector<f64>>>,
    pub e2: Vec<Vec<DMatrix<f64>>>,
    pub e3: Vec<Vec<DVector<f64>>>,
    pub e4: Vec<Vec<DMatrix<f64>>>,
    pub e5: Vec<Vec<DMatrix<f64>>>,
    /// Observed-data log-likelihood at the model that produced these stats.
    pub loglik: f64,
}

/// Per-component quantities that do not depend on the observation.
pub(crate) struct PreparedComponent {
    pub ln_pi: f64,
    pub mu: DVector<f64>,
    pub nu: f64,
    pub delta_star: DMatrix<f64>,
    pub chol_omega: Cholesky<f64, Dyn>,
    pub lambda: DMatrix<f64>,
    /// C = (B' D^{-1} B + I_q)^{-1}
    pub c_mat: DMatrix<f64>,
    /// gamma = C B' D^{-1}
    pub gamma: DMatrix<f64>,
    /// C Delta
    pub c_delta: DMatrix<f64>,
    /// log normalizing constant of the symmetric base density under Omega
    pub ln_base_const: f64,
    /// Cholesky of Sigma* and its log-determinant, for the fallback path.
    pub chol_sigma_star: Cholesky<f64, Dyn>,
    pub ln_det_sigma_star: f64,
}

impl PreparedComponent {
    pub(crate) fn build(model: &MixtureModel, i: usize) -> Result<Self> {
        let comp = &model.components[i];
        let p = model.dims.p as f64;
        let (sigma_star, delta_star) = comp.observed_scale();
        let omega = &sigma_star + &delta_star * delta_star.transpose();
        let chol_omega = Cholesky::new(omega)
            .ok_or_else(|| Error::NotPositiveDefinite(format!("Omega of component {}", i + 1)))?;
        let ln_det_omega = 2.0
            * chol_omega
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        let r = delta_star.ncols();
        let omega_inv_delta = chol_omega.solve(&delta_star);
        let mut lambda = DMatrix::identity(r, r) - delta_star.transpose() * &omega_inv_delta;
        crate::dist::symmetrize(&mut lambda);

        let d_inv = DVector::from_iterator(
            comp.uniquenesses.len(),
            comp.uniquenesses.iter().map(|&d| 1.0 / d),
        );
        let bt_dinv = {
            let mut m = comp.loadings.transpose();
            for (col, di) in d_inv.iter().enumerate() {
                m.column_mut(col).scale_mut(*di);
            }
            m
        };
        let q = model.dims.q;
        let m_small = &bt_dinv * &comp.loadings + DMatrix::identity(q, q);
        let chol_m = Cholesky::new(m_small)
            .ok_or_else(|| Error::NotPositiveDefinite(format!("B'D^-1B + I of component {}", i + 1)))?;
        let c_mat = chol_m.inverse();
        let gamma = &c_mat * &bt_dinv;
        let c_delta = &c_mat * &comp.skew;

        let nu = comp.nu;
        let ln_base_const = if nu.is_finite() {
            ln_gamma(0.5 * (nu + p)) - ln_gamma(0.5 * nu)
                - 0.5 * p * (nu * PI).ln()
                - 0.5 * ln_det_omega
        } else {
            -0.5 * p * (2.0 * PI).ln() - 0.5 * ln_det_omega
        };

        let chol_sigma_star = Cholesky::new(sigma_star).ok_or_else(|| {
            Error::NotPositiveDefinite(format!("Sigma* of component {}", i + 1))
        })?;
        let ln_det_sigma_star = 2.0
            * chol_sigma_star
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();

        Ok(Self {
            ln_pi: comp.pi.ln(),
            mu: comp.mu.clone(),
            nu,
            delta_star,
            chol_omega,
            lambda,
            c_mat,
            gamma,
            c_delta,
            ln_base_const,
            chol_sigma_star,
            ln_det_sigma_star,
        })
    }
}

struct PointComp {
    d_ij: f64,
    c_ij: DVector<f64>,
    gv: DVector<f64>,
    t_den: f64,
}

struct PointOut {
    lse: f64,
    z: Vec<f64>,
    w: Vec<f64>,
    e1: Vec<DVector<f64>>,
    e2: Vec<DMatrix<f64>>,
    e3: Vec<DVector<f64>>,
    e4: Vec<DMatrix<f64>>,
    e5: Vec<DMatrix<f64>>,
}

/// Runs the E-step, returning responsibilities, conditional expectations,
/// and the observed-data log-likelihood. Deterministic given `(model,
/// data, seed)` and independent of the worker-thread count: per-point work
/// is embarrassingly parallel and the reduction order is fixed.
pub fn e_step(model: &MixtureModel, data: &Dataset, seed: u64) -> Result<SuffStats> {
    let g = model.g();
    let n = data.n();
    let p = model.dims.p as f64;
    let skew = model.family.is_skew();
    let heavy = model.family.heavy_tailed();
    let preps: Vec<PreparedComponent> = (0..g)
        .map(|i| PreparedComponent::build(model, i))
        .collect::<Result<Vec<_>>>()?;
    let fallbacks = AtomicUsize::new(0);

    let points: Vec<PointOut> = (0..n)
        .into_par_iter()
        .map(|j| {
            point_stats(
                model, &preps, data, j, skew, heavy, p, seed, &fallbacks,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let nf = fallbacks.load(Ordering::Relaxed);
    if nf > 0 {
        log::warn!("E-step used the Monte Carlo fallback for {nf} (component, point) pairs");
    }

    let mut z = DMatrix::zeros(g, n);
    let mut w = DMatrix::zeros(g, n);
    let mut e1 = vec![Vec::with_capacity(n); g];
    let mut e2 = vec![Vec::with_capacity(n); g];
    let mut e3 = vec![Vec::with_capacity(n); g];
    let mut e4 = vec![Vec::with_capacity(n); g];
    let mut e5 = vec![Vec::with_capacity(n); g];
    let mut loglik = 0.0;
    for (j, mut pt) in points.into_iter().enumerate() {
        loglik += pt.lse;
        for i in (0..g).rev() {
            z[(i, j)] = pt.z[i];
            w[(i, j)] = pt.w[i];
            e1[i].push(pt.e1.pop().expect("e1"));
            e2[i].push(pt.e2.pop().expect("e2"));
            e3[i].push(pt.e3.pop().expect("e3"));
            e4[i].push(pt.e4.pop().expect("e4"));
            e5[i].push(pt.e5.pop().expect("e5"));
        }
    }
    Ok(SuffStats {
        z,
        w,
        e1,
        e2,
        e3,
        e4,
        e5,
        loglik,
    })
}

#[allow(clippy::too_many_arguments)]
fn point_stats(
    model: &MixtureModel,
    preps: &[PreparedComponent],
    data: &Dataset,
    j: usize,
    skew: bool,
    heavy: bool,
    p: f64,
    seed: u64,
    fallbacks: &AtomicUsize,
) -> Result<PointOut> {
    let g = preps.len();
    let y = data.row(j);
    let r = model.family.effective_r(model.dims.r);

    // First pass: log densities per component.
    let mut comps = Vec::with_capacity(g);
    let mut ln_terms = Vec::with_capacity(g);
    for prep in preps {
        let dy = &y - &prep.mu;
        let half = {
            let mut v = dy.clone();
            prep.chol_omega
                .l_dirty()
                .solve_lower_triangular_unchecked_mut(&mut v);
            v
        };
        let d_ij = half.dot(&half);
        let nu = prep.nu;
        let ln_sym = if nu.is_finite() {
            prep.ln_base_const - 0.5 * (nu + p) * (d_ij / nu).ln_1p()
        } else {
            prep.ln_base_const - 0.5 * d_ij
        };
        let gv = &prep.gamma * &dy;
        let (ln_f, c_ij, t_den) = if skew && r > 0 {
            let omega_inv_dy = prep.chol_omega.solve(&dy);
            let c_ij = prep.delta_star.transpose() * omega_inv_dy;
            let t_den = skewing_prob(&c_ij, &prep.lambda, nu, d_ij, p)?;
            let ln_skew = if t_den > 0.0 {
                t_den.ln()
            } else {
                f64::NEG_INFINITY
            };
            (r as f64 * LN_2 + ln_sym + ln_skew, c_ij, t_den)
        } else {
            (ln_sym, DVector::zeros(0), 1.0)
        };
        ln_terms.push(prep.ln_pi + ln_f);
        comps.push(PointComp {
            d_ij,
            c_ij,
            gv,
            t_den,
        });
    }
    let lse = logsumexp(&ln_terms);

    let mut out = PointOut {
        lse,
        z: Vec::with_capacity(g),
        w: Vec::with_capacity(g),
        e1: Vec::with_capacity(g),
        e2: Vec::with_capacity(g),
        e3: Vec::with_capacity(g),
        e4: Vec::with_capacity(g),
        e5: Vec::with_capacity(g),
    };

    for (i, (prep, pc)) in preps.iter().zip(comps.iter()).enumerate() {
        let z_ij = if lse.is_finite() {
            (ln_terms[i] - lse).exp()
        } else {
            // every component underflowed; spread responsibility evenly
            1.0 / g as f64
        };
        let nu = prep.nu;
        // A pair with negligible responsibility contributes nothing to any
        // CM accumulation; skip the truncated-moment work and zero-fill.
        if skew && r > 0 && z_ij < 1e-16 {
            let w_ij = if nu.is_finite() {
                (nu + p) / (nu + pc.d_ij)
            } else {
                1.0
            };
            out.z.push(z_ij);
            out.w.push(w_ij);
            out.e1.push(DVector::zeros(r));
            out.e2.push(DMatrix::zeros(r, r));
            out.e3.push(DVector::zeros(model.dims.q));
            out.e4.push(DMatrix::zeros(model.dims.q, model.dims.q));
            out.e5.push(DMatrix::zeros(model.dims.q, r));
            continue;
        }
        let (w_ij, m1, m2) = if skew && r > 0 {
            // The df-shifted CDF inside the second moment coincides with
            // the skewing denominator: (nu+p+2)/(nu+p) * (nu+d)/(nu+p+2)
            // = (nu+d)/(nu+p), so T_den is reused instead of recomputed.
            let alpha2 = (pc.t_den >= 1e-300).then_some(pc.t_den);
            let trunc = if nu.is_finite() {
                let scale = &prep.lambda * ((nu + pc.d_ij) / (nu + p + 2.0));
                positive_orthant_moments_with(&pc.c_ij, &scale, nu + p + 2.0, MOMENT_REL_TOL, alpha2)
            } else {
                positive_orthant_moments_with(&pc.c_ij, &prep.lambda, f64::INFINITY, MOMENT_REL_TOL, alpha2)
            };
            match trunc {
                Ok(m) if pc.t_den >= 1e-300 => {
                    let w_ij = if nu.is_finite() {
                        (nu + p) / (nu + pc.d_ij) * (m.prob / pc.t_den)
                    } else {
                        1.0
                    };
                    (w_ij, m.mean, m.second)
                }
                Ok(_) | Err(Error::Underflow(_)) => {
                    fallbacks.fetch_add(1, Ordering::Relaxed);
                    fallback_moments(prep, &y, r, seed, j as u64, i as u64)?
                }
                Err(e) => return Err(e),
            }
        } else {
            let w_ij = if heavy {
                (nu + p) / (nu + pc.d_ij)
            } else {
                1.0
            };
            (w_ij, DVector::zeros(0), DMatrix::zeros(0, 0))
        };
        // e1/e2 include the 1/W factor: e1 = w E[a], e2 = w E[a a'].
        let e1 = &m1 * w_ij;
        let e2 = &m2 * w_ij;
        let e3 = &pc.gv * w_ij + &prep.c_delta * &e1;
        let e5 = &pc.gv * e1.transpose() + &prep.c_delta * &e2;
        let mut e4 = &e3 * pc.gv.transpose() + &e5 * prep.c_delta.transpose() + &prep.c_mat;
        crate::dist::symmetrize(&mut e4);
        out.z.push(z_ij);
        out.w.push(w_ij);
        out.e1.push(e1);
        out.e2.push(e2);
        out.e3.push(e3);
        out.e4.push(e4);
        out.e5.push(e5);
    }
    Ok(out)
}

/// Skewing probability T_r(c; ((nu + d)/(nu + p)) Lambda, nu + p), or the
/// Gaussian counterpart Phi_r(c; Lambda) for infinite df.
fn skewing_prob(c: &DVector<f64>, lambda: &DMatrix<f64>, nu: f64, d_ij: f64, p: f64) -> Result<f64> {
    if nu.is_finite() {
        let scale = lambda * ((nu + d_ij) / (nu + p));
        mvt_cdf(c, &scale, nu + p, Z_REL_TOL)
    } else {
        mvn_cdf(c, lambda, Z_REL_TOL)
    }
}

/// Direct quasi-Monte Carlo conditional expectations over the latent
/// (W, |U|) prior, importance-weighted by the observation likelihood. Used
/// only when the skewing probability underflows.
fn fallback_moments(
    prep: &PreparedComponent,
    y: &DVector<f64>,
    r: usize,
    seed: u64,
    j: u64,
    i: u64,
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let nu = prep.nu;
    let p = y.len() as f64;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let gamma = if nu.is_finite() {
        Some(Gamma::new(nu / 2.0, nu / 2.0).map_err(|e| Error::Domain(format!("gamma: {e}")))?)
    } else {
        None
    };
    let dim = r + usize::from(nu.is_finite());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ j.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i);
    let shift: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
    const PRIMES: [u64; 9] = [2, 3, 5, 7, 11, 13, 17, 19, 23];
    let gens: Vec<f64> = (0..dim)
        .map(|k| (PRIMES[k % PRIMES.len()] as f64).sqrt().fract())
        .collect();

    let dy = y - &prep.mu;
    let mut ln_wt = Vec::with_capacity(FALLBACK_DRAWS);
    let mut inv_w = Vec::with_capacity(FALLBACK_DRAWS);
    let mut us = Vec::with_capacity(FALLBACK_DRAWS);
    for s in 0..FALLBACK_DRAWS {
        let mut u = vec![0.0; dim];
        for d in 0..dim {
            u[d] = ((s as f64 + 1.0) * gens[d] + shift[d]).fract().clamp(1e-12, 1.0 - 1e-12);
        }
        let w = match &gamma {
            Some(gam) => 1.0 / gam.inverse_cdf(1.0 - u[0]).max(1e-300),
            None => 1.0,
        };
        let off = usize::from(nu.is_finite());
        let u_abs = DVector::from_fn(r, |k, _| {
            normal.inverse_cdf(0.5 + 0.5 * u[off + k]) * w.sqrt()
        });
        // log phi_p(y; mu + Delta* |u|, w Sigma*)
        let resid = &dy - &prep.delta_star * &u_abs;
        let mut half = resid.clone();
        prep.chol_sigma_star
            .l_dirty()
            .solve_lower_triangular_unchecked_mut(&mut half);
        let maha = half.dot(&half) / w;
        let ln_phi = -0.5 * (p * (2.0 * PI).ln() + p * w.ln() + prep.ln_det_sigma_star + maha);
        ln_wt.push(ln_phi);
        inv_w.push(1.0 / w);
        us.push(u_abs);
    }
    let lse = logsumexp(&ln_wt);
    if !lse.is_finite() {
        return Err(Error::Underflow(
            "Monte Carlo fallback weights all underflowed".into(),
        ));
    }
    let mut w_post = 0.0;
    let mut m1 = DVector::zeros(r);
    let mut m2 = DMatrix::zeros(r, r);
    for s in 0..FALLBACK_DRAWS {
        let wt = (ln_wt[s] - lse).exp();
        w_post += wt * inv_w[s];
        m1 += &us[s] * (wt * inv_w[s]);
        m2 += &us[s] * us[s].transpose() * (wt * inv_w[s]);
    }
    // Normalization: weights already sum to one after the softmax.
    // Convert E[(1/W) g(U)] into the e1/e2 convention (divided by w later).
    let w_mean = w_post;
    let m1 = m1 / w_mean;
    let m2 = m2 / w_mean;
    Ok((w_mean, m1, m2))
}
