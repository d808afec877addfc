//! Shared fixtures and independent oracles for the integration and
//! acceptance suites. Everything here deliberately avoids the library's
//! computational paths: densities are assembled from textbook formulas with
//! explicit inverses and determinants, integrals run through a local
//! adaptive Simpson, and moments come from sampling or direct quadrature.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use skewfa::{ComponentParams, Dataset, Dims, Family, MixtureModel};
use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};
use statrs::function::gamma::{digamma, ln_gamma};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

// ---------------------------------------------------------------------
// fixtures
// ---------------------------------------------------------------------

/// The reference generating model used across acceptance criteria:
/// g = 2, p = 6, q = 2, r = 2, nu = (5, 8), distinct loadings and two
/// genuinely different skew directions per component.
pub fn acceptance_model() -> MixtureModel {
    let p = 6;
    let q = 2;
    let comp1 = ComponentParams {
        pi: 0.45,
        mu: DVector::from_column_slice(&[0.0, 0.5, -0.5, 0.0, 0.5, -0.5]),
        loadings: DMatrix::from_row_slice(
            p,
            q,
            &[
                1.0, 0.2, //
                0.8, -0.3, //
                0.6, 0.7, //
                -0.4, 0.9, //
                0.3, 0.8, //
                -0.2, 0.6,
            ],
        ),
        skew: DMatrix::from_row_slice(2, 2, &[1.8, -0.4, 0.3, -1.7]),
        uniquenesses: DVector::from_column_slice(&[0.30, 0.35, 0.40, 0.45, 0.50, 0.55]),
        nu: 5.0,
    };
    let comp2 = ComponentParams {
        pi: 0.55,
        mu: DVector::from_column_slice(&[6.0, 5.0, 6.5, 5.5, 6.0, 5.0]),
        loadings: DMatrix::from_row_slice(
            p,
            q,
            &[
                0.7, -0.5, //
                1.0, 0.1, //
                -0.3, 0.8, //
                0.5, 0.6, //
                0.9, -0.2, //
                0.1, 1.0,
            ],
        ),
        skew: DMatrix::from_row_slice(2, 2, &[-1.6, 0.3, -0.2, 1.8]),
        uniquenesses: DVector::from_column_slice(&[0.35, 0.30, 0.50, 0.40, 0.55, 0.45]),
        nu: 8.0,
    };
    MixtureModel::new(vec![comp1, comp2], Dims { p, q, r: 2 }, Family::Cfustfa).unwrap()
}

/// Small two-component model with heavy overlap, for ICL-vs-BIC behavior.
pub fn overlap_model() -> MixtureModel {
    let p = 4;
    let q = 2;
    let base = ComponentParams {
        pi: 0.5,
        mu: DVector::zeros(p),
        loadings: DMatrix::from_row_slice(p, q, &[0.9, 0.1, 0.7, -0.2, 0.2, 0.8, -0.1, 0.6]),
        skew: DMatrix::from_row_slice(2, 1, &[1.2, -0.8]),
        uniquenesses: DVector::from_element(p, 0.5),
        nu: 6.0,
    };
    let mut shifted = base.clone();
    shifted.mu = DVector::from_column_slice(&[1.4, 1.1, -1.0, 0.9]);
    shifted.skew = DMatrix::from_row_slice(2, 1, &[-1.0, 0.9]);
    MixtureModel::new(vec![base, shifted], Dims { p, q, r: 1 }, Family::Cfustfa).unwrap()
}

/// Toy p = 2, q = 1, r = 1, g = 2 model for the quadrature-oracle criteria.
pub fn toy_model() -> MixtureModel {
    let c1 = ComponentParams {
        pi: 0.4,
        mu: DVector::from_column_slice(&[0.0, 0.0]),
        loadings: DMatrix::from_column_slice(2, 1, &[0.9, 0.6]),
        skew: DMatrix::from_element(1, 1, 1.1),
        uniquenesses: DVector::from_column_slice(&[0.4, 0.6]),
        nu: 5.0,
    };
    let c2 = ComponentParams {
        pi: 0.6,
        mu: DVector::from_column_slice(&[2.5, 1.5]),
        loadings: DMatrix::from_column_slice(2, 1, &[0.7, -0.8]),
        skew: DMatrix::from_element(1, 1, -0.9),
        uniquenesses: DVector::from_column_slice(&[0.5, 0.3]),
        nu: 7.0,
    };
    MixtureModel::new(vec![c1, c2], Dims { p: 2, q: 1, r: 1 }, Family::Cfustfa).unwrap()
}

pub fn sampled_dataset(model: &MixtureModel, n: usize, seed: u64) -> (Dataset, Vec<i64>) {
    let (y, labels) = skewfa::sample_mixture(model, n, seed).unwrap();
    let labels: Vec<i64> = labels.iter().map(|&l| l as i64).collect();
    (Dataset::new(y, None).unwrap(), labels)
}

// ---------------------------------------------------------------------
// quadrature
// ---------------------------------------------------------------------

/// Plain adaptive Simpson, local to the test suite.
pub fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn rule(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = rule(fa, flm, fm, m - a);
        let right = rule(fm, frm, fb, b - m);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    rec(f, a, b, fa, fm, fb, rule(fa, fm, fb, b - a), tol, depth)
}

// ---------------------------------------------------------------------
// textbook densities with explicit inverses (independent route)
// ---------------------------------------------------------------------

pub fn mvn_pdf_explicit(y: &DVector<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let p = mu.len() as f64;
    let inv = sigma.clone().try_inverse().expect("invertible");
    let det = sigma.determinant();
    let d = y - mu;
    let maha = (d.transpose() * inv * &d)[(0, 0)];
    (-0.5 * (p * LN_2PI + det.ln() + maha)).exp()
}

pub fn mvt_logpdf_explicit(
    y: &DVector<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    nu: f64,
) -> f64 {
    let p = mu.len() as f64;
    let inv = sigma.clone().try_inverse().expect("invertible");
    let det = sigma.determinant();
    let d = y - mu;
    let maha = (d.transpose() * inv * &d)[(0, 0)];
    ln_gamma(0.5 * (nu + p)) - ln_gamma(0.5 * nu) - 0.5 * p * (nu * std::f64::consts::PI).ln()
        - 0.5 * det.ln()
        - 0.5 * (nu + p) * (1.0 + maha / nu).ln()
}

pub fn inv_gamma_pdf(w: f64, shape: f64, rate: f64) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    (shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * w.ln() - rate / w).exp()
}

pub fn t_cdf_scalar(x: f64, nu: f64) -> f64 {
    StudentsT::new(0.0, 1.0, nu).unwrap().cdf(x)
}

pub fn t_pdf_scalar(x: f64, nu: f64) -> f64 {
    StudentsT::new(0.0, 1.0, nu).unwrap().pdf(x)
}

pub fn norm_cdf_scalar(x: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

// ---------------------------------------------------------------------
// hierarchy quadrature oracle for the E-step (p = 2, q = 1, r = 1)
// ---------------------------------------------------------------------

/// Vector-valued adaptive Simpson: all components share nodes, and a
/// panel is accepted only when every component meets its error budget
/// (budgets derived from a coarse top-level pass, halved per split).
pub fn simpson_vec<const N: usize, F: Fn(f64) -> [f64; N]>(
    f: &F,
    a: f64,
    b: f64,
    rel_tol: f64,
    depth: u32,
) -> [f64; N] {
    fn add<const N: usize>(x: [f64; N], y: [f64; N]) -> [f64; N] {
        std::array::from_fn(|k| x[k] + y[k])
    }
    fn rule<const N: usize>(fa: &[f64; N], fm: &[f64; N], fb: &[f64; N], h: f64) -> [f64; N] {
        std::array::from_fn(|k| h / 6.0 * (fa[k] + 4.0 * fm[k] + fb[k]))
    }
    #[allow(clippy::too_many_arguments)]
    fn rec<const N: usize, F: Fn(f64) -> [f64; N]>(
        f: &F,
        a: f64,
        b: f64,
        fa: [f64; N],
        fm: [f64; N],
        fb: [f64; N],
        whole: [f64; N],
        budget: &[f64; N],
        depth: u32,
    ) -> [f64; N] {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = rule(&fa, &flm, &fm, m - a);
        let right = rule(&fm, &frm, &fb, b - m);
        let ok = (0..N).all(|k| (left[k] + right[k] - whole[k]).abs() <= 15.0 * budget[k]);
        if depth == 0 || ok {
            std::array::from_fn(|k| left[k] + right[k] + (left[k] + right[k] - whole[k]) / 15.0)
        } else {
            let half: [f64; N] = std::array::from_fn(|k| 0.5 * budget[k]);
            add(
                rec(f, a, m, fa, flm, fm, left, &half, depth - 1),
                rec(f, m, b, fm, frm, fb, right, &half, depth - 1),
            )
        }
    }
    // Coarse 8-panel pass to set per-component scales.
    let mut coarse = [0.0; N];
    let step = (b - a) / 8.0;
    for i in 0..8 {
        let (x0, x1) = (a + i as f64 * step, a + (i + 1) as f64 * step);
        let r = rule(&f(x0), &f(0.5 * (x0 + x1)), &f(x1), x1 - x0);
        coarse = add(coarse, r);
    }
    let floor = coarse.iter().fold(0.0f64, |m, v| m.max(v.abs())) * 1e-4 + 1e-300;
    let budget: [f64; N] =
        std::array::from_fn(|k| rel_tol * coarse[k].abs().max(floor) / 8.0);
    let mut total = [0.0; N];
    for i in 0..8 {
        let (x0, x1) = (a + i as f64 * step, a + (i + 1) as f64 * step);
        let m = 0.5 * (x0 + x1);
        let (fa, fm, fb) = (f(x0), f(m), f(x1));
        let whole = rule(&fa, &fm, &fb, x1 - x0);
        total = add(total, rec(f, x0, x1, fa, fm, fb, whole, &budget, depth));
    }
    total
}

/// Conditional expectations of one component at one observation, computed
/// by nested adaptive quadrature over the latent (w, u) hierarchy:
/// W ~ invGamma(nu/2, nu/2), U | w half-normal scaled by sqrt(w),
/// Y | u, w ~ N_p(mu + Delta* u, w Sigma*). All moment integrands share
/// quadrature nodes.
pub struct HierarchyOracle {
    /// marginal component density f_i(y)
    pub density: f64,
    pub w: f64,
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    pub e4: f64,
    pub e5: f64,
    /// E[ln W | y] and E[1/W | y] for the df Q-block
    pub mean_ln_w: f64,
    pub mean_inv_w: f64,
}

pub fn hierarchy_oracle(comp: &ComponentParams, y: &DVector<f64>) -> HierarchyOracle {
    let nu = comp.nu;
    let b = &comp.loadings; // p x 1
    let delta = comp.skew[(0, 0)];
    let d_diag = &comp.uniquenesses;
    let sigma_star = b * b.transpose() + DMatrix::from_diagonal(d_diag);
    let delta_star = b * delta; // p x 1

    // scalar conditional-normal pieces for X | y, u, w
    let d_inv = DVector::from_iterator(d_diag.len(), d_diag.iter().map(|&v| 1.0 / v));
    let bt_dinv_b: f64 = b
        .iter()
        .zip(d_inv.iter())
        .map(|(&bi, &di)| bi * bi * di)
        .sum();
    let c_small = 1.0 / (bt_dinv_b + 1.0);
    let bt_dinv_dy: f64 = b
        .iter()
        .zip(d_inv.iter())
        .zip((y - &comp.mu).iter())
        .map(|((&bi, &di), &ri)| bi * di * ri)
        .sum();
    let m_base = c_small * bt_dinv_dy; // C B'D^-1 (y - mu)
    let m_skew = c_small * delta; // C Delta

    // Scalar evaluation of the joint with a precomputed explicit inverse of
    // the p = 2 error scale (no allocations inside the quadrature).
    let s_inv = sigma_star.clone().try_inverse().expect("invertible");
    let s_det = sigma_star.determinant();
    let dy0 = y[0] - comp.mu[0];
    let dy1 = y[1] - comp.mu[1];
    let (ds0, ds1) = (delta_star[0], delta_star[1]);
    let (i00, i01, i11) = (s_inv[(0, 0)], s_inv[(0, 1)], s_inv[(1, 1)]);
    let half_nu = 0.5 * nu;
    let ln_ig_const = half_nu * half_nu.ln() - ln_gamma(half_nu);
    let joint = move |w: f64, u: f64| -> f64 {
        let r0 = dy0 - ds0 * u;
        let r1 = dy1 - ds1 * u;
        let maha = i00 * r0 * r0 + 2.0 * i01 * r0 * r1 + i11 * r1 * r1;
        let ln_lik = -0.5 * (2.0 * LN_2PI + 2.0 * w.ln() + s_det.ln() + maha / w);
        let ln_half_normal =
            std::f64::consts::LN_2 - 0.5 * (LN_2PI + w.ln()) - 0.5 * u * u / w;
        let ln_ig = ln_ig_const - (half_nu + 1.0) * w.ln() - half_nu / w;
        (ln_lik + ln_half_normal + ln_ig).exp()
    };

    // outer over s = ln w; inner over u on [0, u_hi(w)]:
    // accumulators [I0, I0/w, I1/w, I2/w, I0 ln w] with I_k = int u^k joint du.
    let outer = |s: f64| -> [f64; 5] {
        let w = s.exp();
        let u_hi = 12.0 * w.sqrt() + 15.0;
        let inner = |u: f64| -> [f64; 3] {
            let j = joint(w, u);
            [j, u * j, u * u * j]
        };
        let iv = simpson_vec(&inner, 0.0, u_hi, 1e-10, 20);
        [
            iv[0] * w,
            iv[0],
            iv[1],
            iv[2],
            iv[0] * w * w.ln(),
        ]
    };
    // d w = w d s accounted inside: components carrying 1/w lose the factor.
    let j = simpson_vec(&outer, -12.0, 12.0, 1e-10, 18);

    let density = j[0];
    let w_post = j[1] / density;
    let e1 = j[2] / density;
    let e2 = j[3] / density;
    let mean_ln_w = j[4] / density;
    // X | y, u, w ~ N(m(u), w C) with m(u) = m_base + m_skew u, scalar q = 1.
    let e3 = m_base * w_post + m_skew * e1;
    let e5 = m_base * e1 + m_skew * e2;
    let e4 = m_base * m_base * w_post
        + 2.0 * m_base * m_skew * e1
        + m_skew * m_skew * e2
        + c_small;
    HierarchyOracle {
        density,
        w: w_post,
        e1,
        e2,
        e3,
        e4,
        e5,
        mean_ln_w,
        mean_inv_w: w_post,
    }
}

/// E[ln W | y] and E[1/W | y] via the one-dimensional scale-mixture route:
/// f(y | w) is the CFUSN density with scale w Omega and skewing argument
/// c / sqrt(w). Independent of the hierarchy factorization; r = 1 only.
pub fn w_posterior_moments(comp: &ComponentParams, y: &DVector<f64>) -> (f64, f64) {
    let nu = comp.nu;
    let b = &comp.loadings;
    let delta = comp.skew[(0, 0)];
    let sigma_star = b * b.transpose() + DMatrix::from_diagonal(&comp.uniquenesses);
    let delta_star = b * delta;
    let omega = &sigma_star + &delta_star * delta_star.transpose();
    let inv = omega.clone().try_inverse().expect("invertible");
    let dy = y - &comp.mu;
    let c = (delta_star.transpose() * &inv * &dy)[(0, 0)];
    let lambda = 1.0 - (delta_star.transpose() * &inv * &delta_star)[(0, 0)];
    let sq_lambda = lambda.sqrt();

    let outer = |s: f64| -> [f64; 3] {
        let w = s.exp();
        let lik = 2.0
            * mvn_pdf_explicit(y, &comp.mu, &(omega.clone() * w))
            * norm_cdf_scalar(c / (w.sqrt() * sq_lambda));
        let f = inv_gamma_pdf(w, nu / 2.0, nu / 2.0) * lik * w; // d w = w d s
        [f, f * w.ln(), f / w]
    };
    let j = simpson_vec(&outer, -12.0, 12.0, 1e-11, 22);
    (j[1] / j[0], j[2] / j[0])
}

// ---------------------------------------------------------------------
// classical MFA EM oracle (covariance form)
// ---------------------------------------------------------------------

pub struct MfaOracleFit {
    pub loglik: f64,
    pub iterations: usize,
}

/// Independent classical mixture-of-factor-analyzers EM: responsibilities
/// from explicit-inverse normal densities, M-step in the
/// Ghahramani-Hinton covariance form. Started from an explicit model so
/// both routes share the same basin.
pub fn mfa_em_oracle(
    y: &DMatrix<f64>,
    start: &MixtureModel,
    max_iter: usize,
    tol: f64,
) -> MfaOracleFit {
    let n = y.nrows();
    let p = y.ncols();
    let g = start.g();
    let q = start.dims.q;
    let mut pi: Vec<f64> = start.components.iter().map(|c| c.pi).collect();
    let mut mu: Vec<DVector<f64>> = start.components.iter().map(|c| c.mu.clone()).collect();
    let mut b: Vec<DMatrix<f64>> = start.components.iter().map(|c| c.loadings.clone()).collect();
    let mut d: Vec<DVector<f64>> = start
        .components
        .iter()
        .map(|c| c.uniquenesses.clone())
        .collect();

    let mut loglik = f64::NEG_INFINITY;
    let mut iterations = 0;
    for it in 0..max_iter {
        // E-step: responsibilities via explicit-inverse normal densities.
        let mut covs: Vec<DMatrix<f64>> = Vec::with_capacity(g);
        let mut invs: Vec<DMatrix<f64>> = Vec::with_capacity(g);
        let mut ln_norms: Vec<f64> = Vec::with_capacity(g);
        for i in 0..g {
            let cov = &b[i] * b[i].transpose() + DMatrix::from_diagonal(&d[i]);
            let inv = cov.clone().try_inverse().expect("invertible");
            let ln_norm = -0.5 * (p as f64 * LN_2PI + cov.determinant().ln());
            covs.push(cov);
            invs.push(inv);
            ln_norms.push(ln_norm);
        }
        let mut z = DMatrix::zeros(g, n);
        let mut ll = 0.0;
        for j in 0..n {
            let yj = y.row(j).transpose();
            let mut terms = Vec::with_capacity(g);
            for i in 0..g {
                let r = &yj - &mu[i];
                let maha = (r.transpose() * &invs[i] * &r)[(0, 0)];
                terms.push(pi[i].ln() + ln_norms[i] - 0.5 * maha);
            }
            let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
            ll += lse;
            for i in 0..g {
                z[(i, j)] = (terms[i] - lse).exp();
            }
        }
        iterations = it + 1;
        if (ll - loglik).abs() < tol * ll.abs().max(1.0) && it > 2 {
            loglik = ll;
            break;
        }
        loglik = ll;

        // M-step, covariance form.
        for i in 0..g {
            let n_i: f64 = (0..n).map(|j| z[(i, j)]).sum();
            pi[i] = n_i / n as f64;
            let mut mu_new = DVector::zeros(p);
            for j in 0..n {
                mu_new += y.row(j).transpose() * z[(i, j)];
            }
            mu_new /= n_i;
            let mut s = DMatrix::zeros(p, p);
            for j in 0..n {
                let r = y.row(j).transpose() - &mu_new;
                s += &r * r.transpose() * z[(i, j)];
            }
            s /= n_i;
            let gamma = b[i].transpose()
                * (&b[i] * b[i].transpose() + DMatrix::from_diagonal(&d[i]))
                    .try_inverse()
                    .expect("invertible");
            let theta = DMatrix::identity(q, q) - &gamma * &b[i] + &gamma * &s * gamma.transpose();
            let b_new = &s * gamma.transpose() * theta.try_inverse().expect("invertible");
            let sg = &b_new * &gamma * &s;
            for l in 0..p {
                d[i][l] = (s[(l, l)] - sg[(l, l)]).max(1e-10);
            }
            b[i] = b_new;
            mu[i] = mu_new;
        }
    }
    MfaOracleFit { loglik, iterations }
}

// ---------------------------------------------------------------------
// scalar restricted skew-t (r = 1) ECM oracle
// ---------------------------------------------------------------------

/// An independently coded r = 1 skew-t factor-analyzer ECM: scalar skewing
/// machinery only (univariate CDFs, closed-form univariate truncated-t
/// moments via the classical tail identity, explicit matrix inverses).
pub fn mstfa_scalar_oracle(
    y: &DMatrix<f64>,
    start: &MixtureModel,
    max_iter: usize,
    tol: f64,
) -> f64 {
    let n = y.nrows();
    let p = y.ncols();
    let pf = p as f64;
    let g = start.g();
    let q = start.dims.q;
    assert_eq!(start.dims.r, 1, "oracle is r = 1 only");
    let mut pi: Vec<f64> = start.components.iter().map(|c| c.pi).collect();
    let mut mu: Vec<DVector<f64>> = start.components.iter().map(|c| c.mu.clone()).collect();
    let mut b: Vec<DMatrix<f64>> = start.components.iter().map(|c| c.loadings.clone()).collect();
    let mut dd: Vec<DVector<f64>> = start
        .components
        .iter()
        .map(|c| c.uniquenesses.clone())
        .collect();
    let mut del: Vec<DVector<f64>> = start
        .components
        .iter()
        .map(|c| c.skew.column(0).into_owned())
        .collect();
    let mut nu: Vec<f64> = start.components.iter().map(|c| c.nu).collect();

    // unnormalized first moment of a central scalar t above a0, by the
    // classical identity int_a^inf x t_nu(x) dx = (nu + a^2)/(nu - 1) t_nu(a)
    let m1_central = |a0: f64, df: f64| -> f64 { (df + a0 * a0) / (df - 1.0) * t_pdf_scalar(a0, df) };
    // unnormalized second moment by direct quadrature (independent route)
    let m2_central = |a0: f64, df: f64| -> f64 {
        let f = |x: f64| x * x * t_pdf_scalar(x, df);
        let hi = 60.0f64.max(a0.abs() * 40.0);
        simpson(&f, a0, hi, 1e-12, 26)
    };

    let mut last_ll = f64::NEG_INFINITY;
    for _ in 0..max_iter {
        // per-component observed-space prep with explicit inverses
        let mut omega_inv = Vec::with_capacity(g);
        let mut ln_det_omega = Vec::with_capacity(g);
        let mut dstar = Vec::with_capacity(g);
        let mut lambda = Vec::with_capacity(g);
        for i in 0..g {
            let sigma_star = &b[i] * b[i].transpose() + DMatrix::from_diagonal(&dd[i]);
            let ds = &b[i] * &del[i];
            let omega = &sigma_star + &ds * ds.transpose();
            let inv = omega.clone().try_inverse().expect("invertible");
            ln_det_omega.push(omega.determinant().ln());
            lambda.push(1.0 - (ds.transpose() * &inv * &ds)[(0, 0)]);
            omega_inv.push(inv);
            dstar.push(ds);
        }

        // E-step
        let mut z = DMatrix::zeros(g, n);
        let mut w = DMatrix::zeros(g, n);
        let mut e1 = DMatrix::zeros(g, n);
        let mut e2 = DMatrix::zeros(g, n);
        let mut e3: Vec<Vec<DVector<f64>>> = vec![Vec::with_capacity(n); g];
        let mut e4: Vec<Vec<DMatrix<f64>>> = vec![Vec::with_capacity(n); g];
        let mut ll = 0.0;
        for j in 0..n {
            let yj = y.row(j).transpose();
            let mut terms = Vec::with_capacity(g);
            let mut cache = Vec::with_capacity(g);
            for i in 0..g {
                let dy = &yj - &mu[i];
                let dmah = (dy.transpose() * &omega_inv[i] * &dy)[(0, 0)];
                let c = (dstar[i].transpose() * &omega_inv[i] * &dy)[(0, 0)];
                let nui = nu[i];
                let ln_t = ln_gamma(0.5 * (nui + pf)) - ln_gamma(0.5 * nui)
                    - 0.5 * pf * (nui * std::f64::consts::PI).ln()
                    - 0.5 * ln_det_omega[i]
                    - 0.5 * (nui + pf) * (1.0 + dmah / nui).ln();
                let s_den = (lambda[i] * (nui + dmah) / (nui + pf)).sqrt();
                let t_den = t_cdf_scalar(c / s_den, nui + pf);
                terms.push(pi[i].ln() + std::f64::consts::LN_2 + ln_t + t_den.ln());
                cache.push((dy, dmah, c, t_den));
            }
            let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
            ll += lse;
            for i in 0..g {
                z[(i, j)] = (terms[i] - lse).exp();
                let (dy, dmah, c, t_den) = &cache[i];
                let nui = nu[i];
                let df2 = nui + pf + 2.0;
                let s2 = (lambda[i] * (nui + dmah) / df2).sqrt();
                let a0 = -c / s2;
                let alpha = 1.0 - t_cdf_scalar(a0, df2);
                let wij = (nui + pf) / (nui + dmah) * alpha / t_den;
                // truncated moments of a ~ Tt(c, s2^2, df2; (0, inf))
                let m1 = c + s2 * m1_central(a0, df2) / alpha;
                let m2v = {
                    let raw = c * c * alpha
                        + 2.0 * c * s2 * m1_central(a0, df2)
                        + s2 * s2 * m2_central(a0, df2);
                    raw / alpha
                };
                w[(i, j)] = wij;
                e1[(i, j)] = wij * m1;
                e2[(i, j)] = wij * m2v;
                // conditional-normal assembly with explicit inverses
                let d_inv = DMatrix::from_diagonal(&DVector::from_iterator(
                    p,
                    dd[i].iter().map(|&v| 1.0 / v),
                ));
                let c_small = (b[i].transpose() * &d_inv * &b[i] + DMatrix::identity(q, q))
                    .try_inverse()
                    .expect("invertible");
                let gv = &c_small * b[i].transpose() * &d_inv * dy;
                let cd = &c_small * &del[i];
                let e3v = &gv * wij + &cd * e1[(i, j)];
                let e5v = &gv * e1[(i, j)] + &cd * e2[(i, j)];
                let e4v = &e3v * gv.transpose() + &e5v * cd.transpose() + &c_small;
                e3[i].push(e3v);
                e4[i].push(e4v);
                // e5 recomputed in the M-step from e3-related caches; store via e1/e2
            }
        }
        if (ll - last_ll).abs() < tol * ll.abs().max(1.0) {
            return ll;
        }
        last_ll = ll;

        // CM-steps (pi, delta, mu, B, d, nu) mirroring the printed forms.
        for i in 0..g {
            let n_i: f64 = (0..n).map(|j| z[(i, j)]).sum();
            // delta: q-vector = (sum z e5) / (sum z e2); e5 = gv e1 + cd e2
            let d_inv = DMatrix::from_diagonal(&DVector::from_iterator(
                p,
                dd[i].iter().map(|&v| 1.0 / v),
            ));
            let c_small = (b[i].transpose() * &d_inv * &b[i] + DMatrix::identity(q, q))
                .try_inverse()
                .expect("invertible");
            let cd = &c_small * &del[i];
            let mut sum_e5 = DVector::zeros(q);
            let mut sum_e2 = 0.0;
            let mut sum_zw = 0.0;
            let mut sum_zwy = DVector::zeros(p);
            let mut sum_ze3 = DVector::zeros(q);
            for j in 0..n {
                let yj = y.row(j).transpose();
                let dy = &yj - &mu[i];
                let gv = &c_small * b[i].transpose() * &d_inv * &dy;
                sum_e5 += (&gv * e1[(i, j)] + &cd * e2[(i, j)]) * z[(i, j)];
                sum_e2 += z[(i, j)] * e2[(i, j)];
                sum_zw += z[(i, j)] * w[(i, j)];
                sum_zwy += &yj * (z[(i, j)] * w[(i, j)]);
                sum_ze3 += &e3[i][j] * z[(i, j)];
            }
            let del_new = &sum_e5 / sum_e2;
            let mu_new = (&sum_zwy - &b[i] * &sum_ze3) / sum_zw;
            let mut sum_dy_e3 = DMatrix::zeros(p, q);
            let mut sum_e4 = DMatrix::zeros(q, q);
            let mut sum_zw_dy2 = DVector::zeros(p);
            for j in 0..n {
                let dy = y.row(j).transpose() - &mu_new;
                sum_dy_e3 += &dy * e3[i][j].transpose() * z[(i, j)];
                sum_e4 += &e4[i][j] * z[(i, j)];
                sum_zw_dy2 += dy.component_mul(&dy) * (z[(i, j)] * w[(i, j)]);
            }
            let b_new = &sum_dy_e3
                * sum_e4
                    .clone()
                    .try_inverse()
                    .expect("invertible e4 accumulation");
            let be4 = &b_new * &sum_e4 * b_new.transpose();
            let mut d_new = DVector::zeros(p);
            for l in 0..p {
                let cross: f64 = (0..q).map(|k| b_new[(l, k)] * sum_dy_e3[(l, k)]).sum();
                d_new[l] = ((sum_zw_dy2[l] - 2.0 * cross + be4[(l, l)]) / n_i).max(1e-10);
            }
            // nu from the printed score equation, bisection
            let omega_new = &b_new
                * (DMatrix::identity(q, q) + &del_new * del_new.transpose())
                * b_new.transpose()
                + DMatrix::from_diagonal(&d_new);
            let inv = omega_new.try_inverse().expect("invertible");
            let mut s_term = 0.0;
            let dig = digamma(0.5 * (nu[i] + pf));
            for j in 0..n {
                let dy = y.row(j).transpose() - &mu_new;
                let eta = (dy.transpose() * &inv * &dy)[(0, 0)];
                s_term += z[(i, j)]
                    * (dig - (0.5 * (nu[i] + eta)).ln() - (nu[i] + pf) / (nu[i] + eta));
            }
            let score = |v: f64| n_i * ((0.5 * v).ln() - digamma(0.5 * v) + 1.0) + s_term;
            let (mut lo, mut hi) = (2.0001, 200.0);
            let nu_new = if score(lo) <= 0.0 {
                lo
            } else if score(hi) >= 0.0 {
                hi
            } else {
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if score(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            };
            pi[i] = n_i / n as f64;
            del[i] = del_new;
            mu[i] = mu_new;
            b[i] = b_new;
            dd[i] = d_new;
            nu[i] = nu_new;
        }
        let total: f64 = pi.iter().sum();
        for v in &mut pi {
            *v /= total;
        }
    }
    last_ll
}

// ---------------------------------------------------------------------
// misc helpers
// ---------------------------------------------------------------------

/// Halton sequence point in `dim` dimensions (bases 2, 3, 5, ...).
pub fn halton(index: usize, dim: usize) -> Vec<f64> {
    const PRIMES: [usize; 10] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29];
    (0..dim)
        .map(|d| {
            let base = PRIMES[d % PRIMES.len()];
            let mut f = 1.0;
            let mut r = 0.0;
            let mut i = index + 1;
            while i > 0 {
                f /= base as f64;
                r += f * (i % base) as f64;
                i /= base;
            }
            r
        })
        .collect()
}

pub fn sample_mean_cov(rows: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.nrows() as f64;
    let p = rows.ncols();
    let mut mean = DVector::zeros(p);
    for j in 0..rows.nrows() {
        mean += rows.row(j).transpose();
    }
    mean /= n;
    let mut cov = DMatrix::zeros(p, p);
    for j in 0..rows.nrows() {
        let d = rows.row(j).transpose() - &mean;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    (mean, cov)
}
