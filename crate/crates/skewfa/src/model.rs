//! Parameter containers, dimension bookkeeping, nested-model families, and
//! free-parameter counting.

use crate::dist::{
    cfusn_logpdf, cfust_logpdf, logsumexp, mvn_logpdf, mvt_logpdf, CfustParams,
};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Which member of the nested family hierarchy a model belongs to. The tag
/// is explicit rather than inferred from zero patterns so that parameter
/// counting and BIC are unambiguous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Skew-t factors and t errors: the full model.
    Cfustfa,
    /// Skew-normal factors and normal errors (infinite df limit).
    Cfusnfa,
    /// Symmetric t factor analyzers (no skewness).
    Mtfa,
    /// Classical mixture of factor analyzers.
    Mfa,
}

impl Family {
    /// Whether the family carries a skewness matrix.
    pub fn is_skew(self) -> bool {
        matches!(self, Family::Cfustfa | Family::Cfusnfa)
    }

    /// Whether the family estimates degrees of freedom.
    pub fn heavy_tailed(self) -> bool {
        matches!(self, Family::Cfustfa | Family::Mtfa)
    }

    /// Effective number of skewness columns for a configured r.
    pub fn effective_r(self, r: usize) -> usize {
        if self.is_skew() {
            r
        } else {
            0
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::Cfustfa => "cfustfa",
            Family::Cfusnfa => "cfusnfa",
            Family::Mtfa => "mtfa",
            Family::Mfa => "mfa",
        };
        f.write_str(s)
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cfustfa" => Ok(Family::Cfustfa),
            "cfusnfa" => Ok(Family::Cfusnfa),
            "mtfa" => Ok(Family::Mtfa),
            "mfa" => Ok(Family::Mfa),
            other => Err(Error::Config(format!(
                "unknown family {other:?}; expected cfustfa|cfusnfa|mtfa|mfa"
            ))),
        }
    }
}

/// Observed dimension, factor dimension, and skewness-column count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub p: usize,
    pub q: usize,
    pub r: usize,
}

/// One mixture component: mixing proportion, location, loading matrix B
/// (p x q), factor-space skewness Delta (q x r), positive diagonal d of the
/// error scale D, and degrees of freedom (infinite for normal families).
#[derive(Debug, Clone)]
pub struct ComponentParams {
    pub pi: f64,
    pub mu: DVector<f64>,
    pub loadings: DMatrix<f64>,
    pub skew: DMatrix<f64>,
    pub uniquenesses: DVector<f64>,
    pub nu: f64,
}

impl ComponentParams {
    /// Observed-space CFUST scale and skewness:
    /// Sigma* = B B' + D and Delta* = B Delta.
    pub fn observed_scale(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let sigma_star = &self.loadings * self.loadings.transpose()
            + DMatrix::from_diagonal(&self.uniquenesses);
        let delta_star = &self.loadings * &self.skew;
        (sigma_star, delta_star)
    }

    /// The component's marginal observed-space distribution.
    pub fn observed_cfust(&self) -> CfustParams {
        let (sigma_star, delta_star) = self.observed_scale();
        CfustParams {
            mu: self.mu.clone(),
            sigma: sigma_star,
            delta: delta_star,
            nu: self.nu,
        }
    }

    fn validate(&self, dims: Dims, family: Family) -> Result<()> {
        if !(self.pi > 0.0 && self.pi < 1.0 + 1e-12) {
            return Err(Error::Config(format!("pi must lie in (0, 1), got {}", self.pi)));
        }
        if self.mu.len() != dims.p
            || self.loadings.nrows() != dims.p
            || self.loadings.ncols() != dims.q
            || self.skew.nrows() != dims.q
            || self.skew.ncols() != family.effective_r(dims.r)
            || self.uniquenesses.len() != dims.p
        {
            return Err(Error::Dimension("component shapes disagree with dims".into()));
        }
        if self.uniquenesses.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Config("uniquenesses d must be strictly positive".into()));
        }
        if !(self.nu > 0.0) {
            return Err(Error::Config(format!("nu must be positive, got {}", self.nu)));
        }
        if family.heavy_tailed() && self.nu.is_infinite() {
            return Err(Error::Config("finite nu required for t families".into()));
        }
        if !family.heavy_tailed() && self.nu.is_finite() {
            return Err(Error::Config("normal families must carry nu = infinity".into()));
        }
        if self.loadings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("loading matrix contains non-finite entries".into()));
        }
        Ok(())
    }
}

/// A g-component mixture with shared dimensions. Immutable once built.
#[derive(Debug, Clone)]
pub struct MixtureModel {
    pub components: Vec<ComponentParams>,
    pub dims: Dims,
    pub family: Family,
}

impl MixtureModel {
    pub fn new(components: Vec<ComponentParams>, dims: Dims, family: Family) -> Result<Self> {
        let model = Self {
            components,
            dims,
            family,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn g(&self) -> usize {
        self.components.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Config("model must have at least one component".into()));
        }
        if self.dims.q > self.dims.p {
            return Err(Error::Config(format!(
                "q = {} exceeds p = {}",
                self.dims.q, self.dims.p
            )));
        }
        let total: f64 = self.components.iter().map(|c| c.pi).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixing proportions sum to {total}")));
        }
        for c in &self.components {
            c.validate(self.dims, self.family)?;
        }
        Ok(())
    }

    /// Log-density of the mixture at `y`, accumulated by log-sum-exp.
    pub fn logpdf(&self, y: &DVector<f64>) -> Result<f64> {
        let terms = self
            .components
            .iter()
            .map(|c| Ok(c.pi.ln() + component_logpdf(self.family, c, y)?))
            .collect::<Result<Vec<f64>>>()?;
        Ok(logsumexp(&terms))
    }

    /// Observed-data log-likelihood over a dataset.
    pub fn loglik(&self, data: &Dataset) -> Result<f64> {
        let mut total = 0.0;
        for j in 0..data.n() {
            total += self.logpdf(&data.row(j))?;
        }
        Ok(total)
    }
}

/// Component log-density dispatched on the family tag.
pub fn component_logpdf(family: Family, comp: &ComponentParams, y: &DVector<f64>) -> Result<f64> {
    let params = comp.observed_cfust();
    match family {
        Family::Cfustfa => cfust_logpdf(y, &params),
        Family::Cfusnfa => cfusn_logpdf(y, &params),
        Family::Mtfa => mvt_logpdf(y, &params.mu, &params.sigma, params.nu),
        Family::Mfa => mvn_logpdf(y, &params.mu, &params.sigma),
    }
}

/// Free-parameter count m used by BIC/ICL.
///
/// CFUSTFA keeps the full loading matrix (skewness breaks rotational
/// invariance, so no q(q-1)/2 deduction); the symmetric families subtract
/// the rotational constraint and drop the skewness block. Normal families
/// drop the df parameter.
pub fn count_params(dims: Dims, family: Family, g: usize) -> usize {
    let Dims { p, q, r } = dims;
    let per = match family {
        Family::Cfustfa => p + p * q + q * r + p + 1,
        Family::Cfusnfa => p + p * q + q * r + p,
        Family::Mtfa => p + p * q - q * (q - 1) / 2 + p + 1,
        Family::Mfa => p + p * q - q * (q - 1) / 2 + p,
    };
    (g - 1) + g * per
}

/// An n x p observation matrix with optional ground-truth labels (used only
/// by external validation metrics, never by fitting).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub y: DMatrix<f64>,
    pub labels: Option<Vec<i64>>,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>, labels: Option<Vec<i64>>) -> Result<Self> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("dataset contains non-finite values".into()));
        }
        if let Some(l) = &labels {
            if l.len() != y.nrows() {
                return Err(Error::LengthMismatch {
                    left: l.len(),
                    right: y.nrows(),
                });
            }
        }
        if y.nrows() <= y.ncols() {
            log::warn!(
                "dataset has n = {} <= p = {}; estimates may be unstable",
                y.nrows(),
                y.ncols()
            );
        }
        Ok(Self { y, labels })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn row(&self, j: usize) -> DVector<f64> {
        self.y.row(j).transpose()
    }
}

/// Draws `n` observations from the mixture; returns the sample and the
/// generating component labels (1-based).
pub fn sample_mixture(model: &MixtureModel, n: usize, seed: u64) -> Result<(DMatrix<f64>, Vec<u32>)> {
    use crate::dist::sample_cfust_with;
    use rand::Rng;
    use rand::SeedableRng;

    if n == 0 {
        return Err(Error::Domain("sample_mixture requires n >= 1".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cum: Vec<f64> = model
        .components
        .iter()
        .scan(0.0, |acc, c| {
            *acc += c.pi;
            Some(*acc)
        })
        .collect();
    let params: Vec<CfustParams> = model.components.iter().map(|c| c.observed_cfust()).collect();
    let mut out = DMatrix::zeros(n, model.dims.p);
    let mut labels = Vec::with_capacity(n);
    for j in 0..n {
        let u: f64 = rng.random();
        let i = cum.iter().position(|&c| u <= c).unwrap_or(model.g() - 1);
        let row = sample_cfust_with(&params[i], 1, &mut rng)?;
        out.row_mut(j).copy_from(&row.row(0));
        labels.push(i as u32 + 1);
    }
    Ok((out, labels))
}
