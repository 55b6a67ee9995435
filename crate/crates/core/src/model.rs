//! The exchangeable normal-normal model and its un-truncated posterior means.
//!
//! Arm means are `mu ~ N(0, gamma^2 I + (1 - gamma^2) 11')` and observed
//! sample means are `X | mu ~ N(mu, sigma^2 {eta^2 I + (1 - eta^2) 11'})`.
//! Marginally `X ~ N(0, a I + b 11')` with
//! `a = gamma^2 + sigma^2 eta^2` and `b = 1 - gamma^2 + sigma^2 (1 - eta^2)`.
//!
//! Whenever a single arm is singled out it is placed in the last position
//! (index `p - 1` in zero-based terms).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// The four scalars of the hierarchical model.
///
/// The prior mean is 0 and every arm has unit prior variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelParams {
    p: usize,
    gamma: f64,
    eta: f64,
    sigma: f64,
}

impl ModelParams {
    pub fn new(p: usize, gamma: f64, eta: f64, sigma: f64) -> Result<Self> {
        if p < 2 {
            return Err(Error::InvalidParams(format!("p must be at least 2, got {p}")));
        }
        for (name, v) in [("gamma", gamma), ("eta", eta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParams(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "sigma must be positive and finite, got {sigma}"
            )));
        }
        let params = Self {
            p,
            gamma,
            eta,
            sigma,
        };
        if params.a() <= 0.0 {
            // gamma = eta = 0 makes a I + b 11' rank one.
            return Err(Error::InvalidParams(
                "gamma and eta cannot both be zero".into(),
            ));
        }
        Ok(params)
    }

    /// Builds the model from `gamma^2` and `eta^2`, the form the literature
    /// usually quotes.
    pub fn from_squared(p: usize, gamma2: f64, eta2: f64, sigma: f64) -> Result<Self> {
        for (name, v) in [("gamma^2", gamma2), ("eta^2", eta2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParams(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        Self::new(p, gamma2.sqrt(), eta2.sqrt(), sigma)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn gamma2(&self) -> f64 {
        self.gamma * self.gamma
    }

    pub fn eta2(&self) -> f64 {
        self.eta * self.eta
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma * self.sigma
    }

    /// Per-arm (idiosyncratic) marginal variance of `X`.
    pub fn a(&self) -> f64 {
        self.gamma2() + self.sigma2() * self.eta2()
    }

    /// Shared (common-factor) marginal variance of `X`.
    pub fn b(&self) -> f64 {
        1.0 - self.gamma2() + self.sigma2() * (1.0 - self.eta2())
    }

    /// Prior covariance of `mu`.
    pub fn prior_covariance(&self) -> DMatrix<f64> {
        equicorrelated_matrix(self.p, self.gamma2(), 1.0 - self.gamma2())
    }

    /// Sampling covariance of `X` given `mu`.
    pub fn noise_covariance(&self) -> DMatrix<f64> {
        let s2 = self.sigma2();
        equicorrelated_matrix(self.p, s2 * self.eta2(), s2 * (1.0 - self.eta2()))
    }

    /// Marginal distribution of `X`: `N(0, a I + b 11')`.
    pub fn marginal(&self) -> GaussianSpec {
        GaussianSpec::equicorrelated(vec![0.0; self.p], self.a(), self.b())
            .expect("a > 0 and b >= 0 for valid parameters")
    }
}

/// `a`, `b` and the posterior weights `r` with `E(mu_p | X) = r . X`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivedConstants {
    pub a: f64,
    pub b: f64,
    pub r: Vec<f64>,
}

impl DerivedConstants {
    /// Weight shared by every non-selected arm.
    pub fn r_other(&self) -> f64 {
        self.r[0]
    }

    /// Weight of the selected (last) arm.
    pub fn r_selected(&self) -> f64 {
        self.r[self.r.len() - 1]
    }
}

pub fn derive_constants(params: &ModelParams) -> DerivedConstants {
    let (a, b) = (params.a(), params.b());
    let p = params.p() as f64;
    let denom = a * (a + p * b);
    let r_other = params.sigma2() * (params.eta2() - params.gamma2()) / denom;
    let r_selected = (a + (p - 1.0) * b * params.gamma2()) / denom;
    let mut r = vec![r_other; params.p()];
    r[params.p() - 1] = r_selected;
    DerivedConstants { a, b, r }
}

/// `E(mu_p | X_p) = X_p / (1 + sigma^2)`.
pub fn posterior_mean_single(params: &ModelParams, xp: f64) -> f64 {
    xp / (1.0 + params.sigma2())
}

/// `E(mu_p | X_1, ..., X_p)` with the arm of interest in the last position.
pub fn posterior_mean_full(params: &ModelParams, x: &[f64]) -> Result<f64> {
    if x.len() != params.p() {
        return Err(Error::DimensionMismatch {
            expected: params.p(),
            found: x.len(),
        });
    }
    let k = derive_constants(params);
    Ok(k.r.iter().zip(x).map(|(r, x)| r * x).sum())
}

/// Full-data posterior mean of arm `index`, placing that arm last.
pub fn posterior_mean_of_arm(params: &ModelParams, x: &[f64], index: usize) -> Result<f64> {
    if x.len() != params.p() {
        return Err(Error::DimensionMismatch {
            expected: params.p(),
            found: x.len(),
        });
    }
    if index >= x.len() {
        return Err(Error::IndexOutOfRange {
            index,
            len: x.len(),
        });
    }
    let k = derive_constants(params);
    let others: f64 = x
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != index)
        .map(|(_, v)| v)
        .sum();
    Ok(k.r_selected() * x[index] + k.r_other() * others)
}

/// Distribution of the other `p - 1` observations given `X_p = xp`.
///
/// The mean is `b/(a+b) xp` in every coordinate and the covariance is
/// `a I + ab/(a+b) 11'`.
pub fn conditional_distribution(params: &ModelParams, xp: f64) -> GaussianSpec {
    let (a, b) = (params.a(), params.b());
    let n = params.p() - 1;
    GaussianSpec::equicorrelated(vec![b / (a + b) * xp; n], a, a * b / (a + b))
        .expect("a > 0 and ab/(a+b) >= 0 for valid parameters")
}

/// Parameters of an equicorrelated covariance `c I + d 11'`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Equicorrelation {
    c: f64,
    d: f64,
}

impl Equicorrelation {
    pub fn new(c: f64, d: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "diagonal excess variance c must be positive, got {c}"
            )));
        }
        if !(d >= 0.0 && d.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "common covariance d must be non-negative, got {d}"
            )));
        }
        Ok(Self { c, d })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    /// Variance of each coordinate.
    pub fn variance(&self) -> f64 {
        self.c + self.d
    }

    /// Regression coefficient of any other coordinate on one coordinate, and
    /// the covariance of the remaining coordinates given it.
    pub fn condition_on_one(&self) -> (f64, Equicorrelation) {
        let v = self.variance();
        (
            self.d / v,
            Equicorrelation {
                c: self.c,
                d: self.c * self.d / v,
            },
        )
    }

    pub fn matrix(&self, n: usize) -> DMatrix<f64> {
        equicorrelated_matrix(n, self.c, self.d)
    }
}

fn equicorrelated_matrix(n: usize, c: f64, d: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i == j { c + d } else { d })
}

/// A multivariate normal distribution.
///
/// The equicorrelated tag is set by the constructor that knows the structure;
/// general matrices are never scanned for it.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    equicorrelation: Option<Equicorrelation>,
}

impl GaussianSpec {
    pub fn equicorrelated(mean: Vec<f64>, c: f64, d: f64) -> Result<Self> {
        let tag = Equicorrelation::new(c, d)?;
        check_finite(&mean)?;
        let n = mean.len();
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov: tag.matrix(n),
            equicorrelation: Some(tag),
        })
    }

    pub fn general(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_finite(&mean)?;
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: if cov.nrows() != n {
                    cov.nrows()
                } else {
                    cov.ncols()
                },
            });
        }
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("covariance has non-finite entries".into()));
        }
        for i in 0..n {
            for j in 0..i {
                let (x, y) = (cov[(i, j)], cov[(j, i)]);
                if (x - y).abs() > 1e-12 * (1.0 + x.abs().max(y.abs())) {
                    return Err(Error::InvalidParams(format!(
                        "covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
            equicorrelation: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn equicorrelation(&self) -> Option<Equicorrelation> {
        self.equicorrelation
    }

    /// Lower Cholesky factor of the covariance.
    pub fn cholesky_lower(&self) -> Result<DMatrix<f64>> {
        self.cov
            .clone()
            .cholesky()
            .map(|c| c.l())
            .ok_or(Error::NotPositiveDefinite)
    }
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidParams("mean has non-finite entries".into()))
    }
}
