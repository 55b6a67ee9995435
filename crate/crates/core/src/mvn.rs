//! Normal densities and multivariate normal orthant probabilities.
//!
//! Equicorrelated covariances `c I + d 11'` (with `d >= 0`) admit the
//! one-factor representation `Y_i = m_i + sqrt(d) Z + sqrt(c) E_i`, so
//!
//! ```text
//! Pr(Y <= u) = ∫ φ(z) Π_i Φ((u_i - m_i - sqrt(d) z) / sqrt(c)) dz.
//! ```
//!
//! The log of the integrand is strictly concave with curvature at least 1,
//! so the integral is evaluated in log space on a window of
//! `± integration_halfwidth` around its mode. That keeps tiny probabilities
//! accurate in relative terms, which the truncated-normal densities rely on.
//!
//! General covariances go through the separation-of-variables transform
//! integrated with randomly shifted rank-1 lattice rules.

use std::f64::consts::FRAC_1_SQRT_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use libm::erfc;
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};
use crate::model::{Equicorrelation, GaussianSpec};
use crate::quad::{self, Tolerance, Unconverged};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_741_780_329_736_406;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_677_939_946_059_934;

/// Settings for the equicorrelated 1-D quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadratureConfig {
    pub abs_tol: f64,
    pub max_nodes: usize,
    /// Half-width, in standard deviations of the common factor, of the
    /// integration window around the integrand's mode.
    pub integration_halfwidth: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            max_nodes: 4096,
            integration_halfwidth: 8.5,
        }
    }
}

impl QuadratureConfig {
    pub fn with_tolerance(abs_tol: f64) -> Self {
        Self {
            abs_tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0 && self.abs_tol.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "abs_tol must be positive, got {}",
                self.abs_tol
            )));
        }
        if self.max_nodes < 32 {
            return Err(Error::InvalidParams(format!(
                "max_nodes must be at least 32, got {}",
                self.max_nodes
            )));
        }
        if !(self.integration_halfwidth > 0.0 && self.integration_halfwidth.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "integration_halfwidth must be positive, got {}",
                self.integration_halfwidth
            )));
        }
        Ok(())
    }
}

/// Settings for the lattice QMC estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QmcConfig {
    /// Lattice points per replicate.
    pub samples: usize,
    /// Independently shifted replicates, used for the error estimate.
    pub replicates: usize,
    pub seed: u64,
}

impl Default for QmcConfig {
    fn default() -> Self {
        Self {
            samples: 1 << 16,
            replicates: 8,
            seed: 0,
        }
    }
}

impl QmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 1024 {
            return Err(Error::InvalidParams(format!(
                "samples must be at least 1024, got {}",
                self.samples
            )));
        }
        if self.replicates < 2 {
            return Err(Error::InvalidParams(format!(
                "replicates must be at least 2, got {}",
                self.replicates
            )));
        }
        Ok(())
    }
}

/// A Monte Carlo probability estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QmcEstimate {
    pub probability: f64,
    pub std_error: f64,
}

pub fn std_normal_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

pub fn ln_std_normal_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

/// `ln Φ(z)`, accurate far into both tails.
pub fn ln_std_normal_cdf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    if z > 0.0 {
        (-0.5 * erfc(z * FRAC_1_SQRT_2)).ln_1p()
    } else if z > -37.0 {
        (0.5 * erfc(-z * FRAC_1_SQRT_2)).ln()
    } else if z == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        // Asymptotic expansion of the Mills ratio; the first omitted term is
        // below 1e-13 relative at z = -37.
        let t = 1.0 / (z * z);
        let series = 1.0 - t * (1.0 - 3.0 * t * (1.0 - 5.0 * t * (1.0 - 7.0 * t * (1.0 - 9.0 * t))));
        -0.5 * z * z - (-z).ln() - LN_SQRT_2PI + series.ln()
    }
}

/// Inverse Mills ratio `φ(z) / Φ(z)`.
pub fn inverse_mills(z: f64) -> f64 {
    (ln_std_normal_pdf(z) - ln_std_normal_cdf(z)).exp()
}

/// `Φ^{-1}(q)` for `q` in `(0, 1)`.
pub fn std_normal_quantile(q: f64) -> f64 {
    let x = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * q);
    if !x.is_finite() {
        return x;
    }
    // One Halley step against the accurate CDF.
    let u = (std_normal_cdf(x) - q) / std_normal_pdf(x);
    x - u / (1.0 + 0.5 * x * u)
}

#[cfg(test)]
thread_local! {
    static EQUICORR_CALLS: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

/// Number of equicorrelated CDF evaluations on this thread (test builds only).
#[cfg(test)]
pub(crate) fn equicorr_calls() -> usize {
    EQUICORR_CALLS.with(|c| c.get())
}

/// Log-probabilities provably below this are reported as `-inf`.
pub const LN_PROBABILITY_FLOOR: f64 = -1000.0;

/// `ln Pr(Y <= upper)` for `Y ~ N(mean, c I + d 11')`.
///
/// Returns `-inf` when some bound is `-inf` or some marginal probability is
/// below `exp(LN_PROBABILITY_FLOOR)`; `+inf` bounds are dropped.
pub fn ln_mvn_cdf_equicorr(
    mean: &[f64],
    c: f64,
    d: f64,
    upper: &[f64],
    cfg: &QuadratureConfig,
) -> Result<f64> {
    #[cfg(test)]
    EQUICORR_CALLS.with(|calls| calls.set(calls.get() + 1));

    cfg.validate()?;
    let tag = Equicorrelation::new(c, d)?;
    if mean.len() != upper.len() {
        return Err(Error::DimensionMismatch {
            expected: mean.len(),
            found: upper.len(),
        });
    }
    if mean.iter().any(|m| !m.is_finite()) || upper.iter().any(|u| u.is_nan()) {
        return Err(Error::InvalidParams("non-finite mean or NaN bound".into()));
    }
    if upper.contains(&f64::NEG_INFINITY) {
        return Ok(f64::NEG_INFINITY);
    }
    // Each marginal probability bounds the joint one.
    let marginal_sd = tag.variance().sqrt();
    let ceiling = mean
        .iter()
        .zip(upper)
        .map(|(m, u)| ln_std_normal_cdf((u - m) / marginal_sd))
        .fold(0.0, f64::min);
    if ceiling < LN_PROBABILITY_FLOOR {
        return Ok(f64::NEG_INFINITY);
    }
    let sd = tag.c().sqrt();
    let bounds: Vec<f64> = mean
        .iter()
        .zip(upper)
        .filter(|(_, u)| u.is_finite())
        .map(|(m, u)| (u - m) / sd)
        .collect();
    match bounds.len() {
        0 => return Ok(0.0),
        1 => {
            let (m, u) = mean
                .iter()
                .zip(upper)
                .find(|(_, u)| u.is_finite())
                .expect("one finite bound");
            return Ok(ln_std_normal_cdf((u - m) / tag.variance().sqrt()));
        }
        _ => {}
    }
    if tag.d() == 0.0 {
        return Ok(bounds.iter().map(|&t| ln_std_normal_cdf(t)).sum());
    }
    equicorr_factor_integral(&bounds, (tag.d() / tag.c()).sqrt(), cfg)
}

/// `ln ∫ φ(z) Π_i Φ(t_i - k z) dz` for `k > 0`.
fn equicorr_factor_integral(t: &[f64], k: f64, cfg: &QuadratureConfig) -> Result<f64> {
    let log_integrand = |z: f64| -> f64 {
        -0.5 * z * z + t.iter().map(|&ti| ln_std_normal_cdf(ti - k * z)).sum::<f64>()
    };
    let slope = |z: f64| -> f64 { -z - k * t.iter().map(|&ti| inverse_mills(ti - k * z)).sum::<f64>() };

    // The slope is strictly decreasing and non-positive at 0.
    let mut hi = 0.0;
    let mut lo = -1.0;
    while slope(lo) <= 0.0 {
        hi = lo;
        lo *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if slope(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mode = 0.5 * (lo + hi);
    let peak = log_integrand(mode);

    // Curvature of the log integrand: -1 + k^2 Σ λ'(x), λ'(x) = -λ(x)(x + λ(x)).
    let curvature = 1.0
        + k * k
            * t.iter()
                .map(|&ti| {
                    let x = ti - k * mode;
                    let lam = inverse_mills(x);
                    lam * (x + lam)
                })
                .sum::<f64>();
    let width = curvature.max(1.0).sqrt().recip();
    let h = cfg.integration_halfwidth;
    let mut points = vec![mode - h];
    for s in [-4.0, -1.0, 0.0, 1.0, 4.0] {
        let z = mode + s * width;
        if z > mode - h && z < mode + h {
            points.push(z);
        }
    }
    points.push(mode + h);

    let integral = quad::integrate(
        |z| (log_integrand(z) - peak).exp(),
        &points,
        Tolerance::relative(cfg.abs_tol),
        cfg.max_nodes,
    )
    .map_err(|Unconverged(partial)| Error::NonConvergence {
        op: "mvn_cdf_equicorr",
        evals: partial.evals,
        error: partial.error,
    })?;
    Ok(peak - LN_SQRT_2PI + integral.value.ln())
}

/// `Pr(Y <= upper)` for `Y ~ N(mean, c I + d 11')`, `d >= 0`.
pub fn mvn_cdf_equicorr(
    mean: &[f64],
    c: f64,
    d: f64,
    upper: &[f64],
    cfg: &QuadratureConfig,
) -> Result<f64> {
    let p = ln_mvn_cdf_equicorr(mean, c, d, upper, cfg)?.exp();
    check_probability("mvn_cdf_equicorr", p, cfg.abs_tol)
}

pub(crate) fn check_probability(op: &'static str, p: f64, tol: f64) -> Result<f64> {
    if !(p >= -tol && p <= 1.0 + tol) {
        return Err(Error::ProbabilityOutOfRange { op, value: p });
    }
    Ok(p.clamp(0.0, 1.0))
}

const PRIMES: [u32; 32] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    97, 101, 103, 107, 109, 113, 127, 131,
];

/// `Pr(Y <= upper)` for a general positive-definite Gaussian, estimated by
/// randomized lattice QMC over the separation-of-variables integrand.
pub fn mvn_cdf_general(spec: &GaussianSpec, upper: &[f64], cfg: &QmcConfig) -> Result<QmcEstimate> {
    cfg.validate()?;
    let n = spec.dim();
    if upper.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: upper.len(),
        });
    }
    if upper.iter().any(|u| u.is_nan()) {
        return Err(Error::InvalidParams("NaN bound".into()));
    }
    if n > PRIMES.len() + 1 {
        return Err(Error::DimensionTooLarge {
            n,
            max: PRIMES.len() + 1,
        });
    }
    let chol = spec.cholesky_lower()?;
    let exact = |probability| QmcEstimate {
        probability,
        std_error: 0.0,
    };
    if n == 0 {
        return Ok(exact(1.0));
    }
    if upper.contains(&f64::NEG_INFINITY) {
        return Ok(exact(0.0));
    }
    let centered: Vec<f64> = upper.iter().zip(spec.mean().iter()).map(|(u, m)| u - m).collect();
    if n == 1 {
        return Ok(exact(std_normal_cdf(centered[0] / chol[(0, 0)])));
    }

    let generator: Vec<f64> = PRIMES[..n - 1].iter().map(|&q| f64::from(q).sqrt().fract()).collect();
    let replicate_means: Vec<f64> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(r as u64);
            let shift: Vec<f64> = (0..n - 1).map(|_| rng.random::<f64>()).collect();
            let mut y = vec![0.0; n - 1];
            let mut w = vec![0.0; n - 1];
            let mut total = 0.0;
            for s in 1..=cfg.samples {
                for j in 0..n - 1 {
                    let x = (s as f64 * generator[j] + shift[j]).fract();
                    // Baker's (tent) transform.
                    w[j] = 1.0 - (2.0 * x - 1.0).abs();
                }
                total += separation_of_variables(&chol, &centered, &w, &mut y);
            }
            total / cfg.samples as f64
        })
        .collect();

    let r = cfg.replicates as f64;
    let mean = replicate_means.iter().sum::<f64>() / r;
    let var = replicate_means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (r - 1.0);
    Ok(QmcEstimate {
        probability: check_probability("mvn_cdf_general", mean, 1e-12)?,
        std_error: (var / r).sqrt(),
    })
}

fn separation_of_variables(chol: &nalgebra::DMatrix<f64>, upper: &[f64], w: &[f64], y: &mut [f64]) -> f64 {
    let n = upper.len();
    let mut e = std_normal_cdf(upper[0] / chol[(0, 0)]);
    let mut f = e;
    for i in 1..n {
        let q = (w[i - 1] * e).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
        y[i - 1] = std_normal_quantile(q);
        let shift: f64 = (0..i).map(|j| chol[(i, j)] * y[j]).sum();
        e = std_normal_cdf((upper[i] - shift) / chol[(i, i)]);
        f *= e;
        if f == 0.0 {
            break;
        }
    }
    f
}
