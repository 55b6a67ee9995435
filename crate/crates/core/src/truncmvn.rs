//! Multivariate normal truncated from above: normalizing constant, marginal
//! densities and first moments.
//!
//! For `Y ~ N(θ, Ω)` truncated to `Y <= b`, write `W = Y - θ` (truncated at
//! `b - θ`). All marginal densities here take the *centered* argument `w`;
//! the first moments are then
//!
//! ```text
//! E(Y_i | Y <= b) = θ_i - Σ_k ω_ki g_k(b_k - θ_k).
//! ```
//!
//! Each `g_k(w)` is evaluated as the univariate density of `W_k` times the
//! `(n-1)`-dimensional orthant probability of the remaining coordinates
//! conditional on `W_k = w`, divided by `α`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::GaussianSpec;
use crate::mvn::{self, QmcConfig, QuadratureConfig};

/// Largest supported dimension.
pub const MAX_DIM: usize = 25;

/// Smallest acceptable normalizing constant.
pub const MIN_ALPHA: f64 = 1e-300;

/// Numerical settings for both orthant-probability engines.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Numerics {
    pub quadrature: QuadratureConfig,
    pub qmc: QmcConfig,
}

/// A Gaussian truncated from above, with its normalizing constant computed
/// once at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedAboveSpec {
    base: GaussianSpec,
    upper: Vec<f64>,
    numerics: Numerics,
    ln_alpha: f64,
}

impl TruncatedAboveSpec {
    pub fn new(base: GaussianSpec, upper: Vec<f64>) -> Result<Self> {
        Self::with_numerics(base, upper, Numerics::default())
    }

    pub fn with_numerics(base: GaussianSpec, upper: Vec<f64>, numerics: Numerics) -> Result<Self> {
        let n = base.dim();
        if upper.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: upper.len(),
            });
        }
        if n == 0 {
            return Err(Error::InvalidParams("empty truncated spec".into()));
        }
        if n > MAX_DIM {
            return Err(Error::DimensionTooLarge { n, max: MAX_DIM });
        }
        if upper.iter().any(|u| u.is_nan()) {
            return Err(Error::InvalidParams("NaN truncation bound".into()));
        }
        let ln_alpha = match base.equicorrelation() {
            Some(tag) => mvn::ln_mvn_cdf_equicorr(
                base.mean().as_slice(),
                tag.c(),
                tag.d(),
                &upper,
                &numerics.quadrature,
            )?,
            None => mvn::mvn_cdf_general(&base, &upper, &numerics.qmc)?
                .probability
                .ln(),
        };
        let alpha = ln_alpha.exp();
        if alpha.is_nan() || alpha < MIN_ALPHA {
            return Err(Error::DegenerateTruncation { alpha });
        }
        Ok(Self {
            base,
            upper,
            numerics,
            ln_alpha,
        })
    }

    pub fn base(&self) -> &GaussianSpec {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn numerics(&self) -> &Numerics {
        &self.numerics
    }

    /// Truncation points in centered coordinates, `b - θ`.
    pub fn centered_bounds(&self) -> Vec<f64> {
        self.upper
            .iter()
            .zip(self.base.mean().iter())
            .map(|(b, t)| b - t)
            .collect()
    }

    pub fn alpha(&self) -> f64 {
        self.ln_alpha.exp()
    }

    pub fn ln_alpha(&self) -> f64 {
        self.ln_alpha
    }
}

/// `α = Pr(Y <= b)`; cached on the spec.
pub fn normalizing_constant(spec: &TruncatedAboveSpec) -> f64 {
    spec.alpha()
}

/// Marginal density `g_k(w)` of the centered truncated vector.
///
/// Zero for `w` above the centered bound `b_k - θ_k`.
pub fn marginal_density(spec: &TruncatedAboveSpec, k: usize, w: f64) -> Result<f64> {
    let n = spec.dim();
    if k >= n {
        return Err(Error::IndexOutOfRange { index: k, len: n });
    }
    if w.is_nan() {
        return Err(Error::InvalidParams("NaN density argument".into()));
    }
    let bounds = spec.centered_bounds();
    if w > bounds[k] || w.is_infinite() {
        return Ok(0.0);
    }
    let others: Vec<f64> = bounds
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, b)| *b)
        .collect();

    let cov = spec.base().cov();
    let omega = cov[(k, k)];
    let ln_univariate = -0.5 * w * w / omega - 0.5 * omega.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();

    let ln_conditional = match spec.base().equicorrelation() {
        Some(tag) => {
            let (beta, cond) = tag.condition_on_one();
            mvn::ln_mvn_cdf_equicorr(
                &vec![beta * w; n - 1],
                cond.c(),
                cond.d(),
                &others,
                &spec.numerics().quadrature,
            )?
        }
        None => {
            if n == 1 {
                0.0
            } else {
                let idx: Vec<usize> = (0..n).filter(|&j| j != k).collect();
                let mean: Vec<f64> = idx.iter().map(|&j| cov[(j, k)] / omega * w).collect();
                let schur = DMatrix::from_fn(n - 1, n - 1, |r, s| {
                    let (i, j) = (idx[r], idx[s]);
                    let v = cov[(i, j)] - cov[(i, k)] * cov[(k, j)] / omega;
                    let vt = cov[(j, i)] - cov[(j, k)] * cov[(k, i)] / omega;
                    0.5 * (v + vt)
                });
                let cond = GaussianSpec::general(mean, schur)?;
                mvn::mvn_cdf_general(&cond, &others, &spec.numerics().qmc)?
                    .probability
                    .ln()
            }
        }
    };
    Ok((ln_univariate + ln_conditional - spec.ln_alpha()).exp())
}

/// `g_k(b_k - θ_k)` for every coordinate.
pub fn densities_at_bounds(spec: &TruncatedAboveSpec) -> Result<Vec<f64>> {
    spec.centered_bounds()
        .iter()
        .enumerate()
        .map(|(k, &w)| marginal_density(spec, k, w))
        .collect()
}

/// `E(Y | Y <= b)`, componentwise.
pub fn truncated_mean(spec: &TruncatedAboveSpec) -> Result<Vec<f64>> {
    let g = densities_at_bounds(spec)?;
    let cov = spec.base().cov();
    Ok(spec
        .base()
        .mean()
        .iter()
        .enumerate()
        .map(|(i, theta)| theta - (0..spec.dim()).map(|k| cov[(k, i)] * g[k]).sum::<f64>())
        .collect())
}
