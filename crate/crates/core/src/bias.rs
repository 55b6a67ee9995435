//! Selection bias of the winning arm and its exact post-selection posterior
//! mean.
//!
//! With the winner placed last, the other observations given `X_p = xp` are
//! `N(b/(a+b) xp 1, a I + ab/(a+b) 11')`. Conditioning additionally on `xp`
//! being the maximum truncates that vector at `xp`, and the bias collapses to
//!
//! ```text
//! Δ = σ²(η² - γ²)/(1 + σ²) · Σ_i h_i(a/(a+b) xp)
//! ```
//!
//! where `h_i` are the centered marginal densities of the truncated vector.
//! Every `h_i` is the same by exchangeability, so one evaluation suffices.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::mvn::{self, QuadratureConfig};
use crate::truncmvn::{self, Numerics, TruncatedAboveSpec};

/// How the `p - 1` marginal density terms are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum Summation {
    /// `(p - 1) h_1`, valid because the truncated vector is exchangeable.
    #[default]
    Exchangeable,
    /// Evaluates every `h_i` separately.
    PerCoordinate,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BiasOptions {
    pub quadrature: QuadratureConfig,
    pub summation: Summation,
}

/// Intermediate quantities of the derivation, exposed for testing.
///
/// Not part of the stable output format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasDiagnostics {
    /// Centered truncation point `a/(a+b) xp` at which `h` is evaluated.
    pub centered_bound: f64,
    /// `ab/(a+b) Σ_j h_j + a h_i`, the shortfall of each other arm's
    /// conditional mean caused by selection.
    pub delta_i: f64,
    /// `E(X_i | X_p = xp, X_p = max)` for any non-selected arm.
    pub conditional_mean_other: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReport {
    pub params: ModelParams,
    pub xp: f64,
    /// `E(μ_p | X_p)`, ignoring selection.
    pub naive_mean: f64,
    pub delta: f64,
    /// `E(μ_p | X_p, X_p = max X_i)`.
    pub lambda: f64,
    /// `h` at the centered truncation point.
    pub marginal_density_value: f64,
    /// Probability that the other arms all fall below `xp`, given `X_p = xp`.
    pub alpha: f64,
    pub diagnostics: BiasDiagnostics,
}

pub fn selection_bias(params: &ModelParams, xp: f64) -> Result<BiasReport> {
    selection_bias_with(params, xp, &BiasOptions::default())
}

pub fn selection_bias_with(params: &ModelParams, xp: f64, opts: &BiasOptions) -> Result<BiasReport> {
    if !xp.is_finite() {
        return Err(Error::InvalidParams(format!("xp must be finite, got {xp}")));
    }
    let (a, b) = (params.a(), params.b());
    let n = params.p() - 1;
    let spec = TruncatedAboveSpec::with_numerics(
        model::conditional_distribution(params, xp),
        vec![xp; n],
        Numerics {
            quadrature: opts.quadrature,
            ..Numerics::default()
        },
    )?;
    let bounds = spec.centered_bounds();
    let h = truncmvn::marginal_density(&spec, 0, bounds[0])?;
    let h_sum = match opts.summation {
        Summation::Exchangeable => n as f64 * h,
        Summation::PerCoordinate => truncmvn::densities_at_bounds(&spec)?.iter().sum(),
    };

    let s2 = params.sigma2();
    let delta = s2 * (params.eta2() - params.gamma2()) / (1.0 + s2) * h_sum;
    let naive_mean = model::posterior_mean_single(params, xp);
    let delta_i = a * b / (a + b) * h_sum + a * h;
    Ok(BiasReport {
        params: *params,
        xp,
        naive_mean,
        delta,
        lambda: naive_mean - delta,
        marginal_density_value: h,
        alpha: spec.alpha(),
        diagnostics: BiasDiagnostics {
            centered_bound: bounds[0],
            delta_i,
            conditional_mean_other: b / (a + b) * xp - delta_i,
        },
    })
}

/// The exact post-selection posterior mean `λ = E(μ_p | X_p) - Δ`.
pub fn post_selection_mean(params: &ModelParams, xp: f64) -> Result<f64> {
    Ok(selection_bias(params, xp)?.lambda)
}

/// Index of the largest observation, lowest index on ties.
pub fn winner_index(x: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in x.iter().enumerate() {
        match best {
            Some(j) if x[j] >= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Picks the winner from raw observations and reports its selection bias.
pub fn selection_bias_from_observations(params: &ModelParams, x: &[f64]) -> Result<(usize, BiasReport)> {
    if x.len() != params.p() {
        return Err(Error::DimensionMismatch {
            expected: params.p(),
            found: x.len(),
        });
    }
    let i = winner_index(x).expect("p >= 2");
    Ok((i, selection_bias(params, x[i])?))
}

/// `Pr(max_i X_i <= x)` under the marginal `N(0, a I + b 11')`.
pub fn max_cdf(params: &ModelParams, x: f64) -> Result<f64> {
    let p = params.p();
    mvn::mvn_cdf_equicorr(
        &vec![0.0; p],
        params.a(),
        params.b(),
        &vec![x; p],
        &QuadratureConfig::default(),
    )
}

/// `Pr(max_i X_i > x)`.
pub fn max_exceedance_probability(params: &ModelParams, x: f64) -> Result<f64> {
    Ok(1.0 - max_cdf(params, x)?)
}

/// A correlation scenario `(γ, η)` for tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Case {
    pub gamma: f64,
    pub eta: f64,
}

impl Case {
    pub fn from_squared(gamma2: f64, eta2: f64) -> Self {
        Self {
            gamma: gamma2.sqrt(),
            eta: eta2.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasTableRow {
    /// 1-based position of the case in the input list.
    pub case: usize,
    pub report: BiasReport,
}

/// Cartesian product of cases, arm counts and maxima, ordered by case (input
/// order), then `p` and `xp` ascending.
pub fn bias_table(sigma: f64, p_list: &[usize], xp_list: &[f64], cases: &[Case]) -> Result<Vec<BiasTableRow>> {
    let mut ps = p_list.to_vec();
    ps.sort_unstable();
    let mut xs = xp_list.to_vec();
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParams("xp values must be finite".into()));
    }
    xs.sort_by(f64::total_cmp);

    let mut jobs = Vec::with_capacity(cases.len() * ps.len() * xs.len());
    for (ci, case) in cases.iter().enumerate() {
        for &p in &ps {
            let params = ModelParams::new(p, case.gamma, case.eta, sigma)?;
            for &xp in &xs {
                jobs.push((ci + 1, params, xp));
            }
        }
    }
    jobs.into_par_iter()
        .map(|(case, params, xp)| {
            Ok(BiasTableRow {
                case,
                report: selection_bias(&params, xp)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ten_arm() -> ModelParams {
        ModelParams::from_squared(10, 0.5, 1.0, 2.0).unwrap()
    }

    #[test]
    fn ten_arm_post_selection_mean() {
        let r = selection_bias(&ten_arm(), 3.25).unwrap();
        assert_abs_diff_eq!(r.naive_mean, 0.65, epsilon = 1e-15);
        assert!((r.lambda - 0.400).abs() < 5e-3, "{}", r.lambda);
        assert!((r.delta - 0.25).abs() < 5e-3);
        assert_eq!(r.lambda, r.naive_mean - r.delta);
        assert_abs_diff_eq!(r.diagnostics.centered_bound, 0.9 * 3.25, epsilon = 1e-12);
    }

    #[test]
    fn derivation_is_consistent() {
        // λ = r_p xp + r_other (p-1) E(X_i | selection).
        let params = ModelParams::from_squared(6, 0.3, 0.8, 1.5).unwrap();
        let r = selection_bias(&params, 1.2).unwrap();
        let k = model::derive_constants(&params);
        let via_proof = k.r_selected() * 1.2 + k.r_other() * 5.0 * r.diagnostics.conditional_mean_other;
        assert_abs_diff_eq!(via_proof, r.lambda, epsilon = 1e-12);
    }

    #[test]
    fn no_bias_when_correlations_match() {
        let r = selection_bias(&ModelParams::new(5, 0.7, 0.7, 1.0).unwrap(), 2.0).unwrap();
        assert_eq!(r.delta, 0.0);
        assert_eq!(r.lambda, 2.0 / 2.0);
    }

    #[test]
    fn sign_follows_correlation_gap() {
        let pos = selection_bias(&ModelParams::from_squared(3, 0.5, 1.0, 1.0).unwrap(), 2.0).unwrap();
        let neg = selection_bias(&ModelParams::from_squared(3, 1.0, 0.5, 1.0).unwrap(), 2.0).unwrap();
        assert!(pos.delta > 0.0);
        assert!(neg.delta < 0.0);
    }

    #[test]
    fn exchangeable_fast_path_matches_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let slow = BiasOptions {
            summation: Summation::PerCoordinate,
            ..BiasOptions::default()
        };
        for _ in 0..20 {
            let params = ModelParams::new(
                rng.random_range(2..=8),
                rng.random_range(0.0..1.0),
                rng.random_range(0.1..1.0),
                rng.random_range(0.2..3.0),
            )
            .unwrap();
            let xp = rng.random_range(-1.0..5.0);
            let a = selection_bias(&params, xp).unwrap();
            let b = selection_bias_with(&params, xp, &slow).unwrap();
            assert!((a.delta - b.delta).abs() < 1e-10);
        }
    }

    #[test]
    fn bias_vanishes_in_limits() {
        for (g2, e2) in [(0.5, 1.0), (1.0, 0.5)] {
            let params = ModelParams::from_squared(5, g2, e2, 1.0).unwrap();
            assert!(selection_bias(&params, 50.0).unwrap().delta.abs() < 1e-8);
            let mags: Vec<f64> = [1.0, 0.1, 0.01]
                .iter()
                .map(|&s| {
                    let p = ModelParams::from_squared(5, g2, e2, s).unwrap();
                    selection_bias(&p, 1.0).unwrap().delta.abs()
                })
                .collect();
            assert!(mags[0] > mags[1] && mags[1] > mags[2] && mags[2] > 0.0, "{mags:?}");
        }
    }

    #[test]
    fn winner_selection() {
        assert_eq!(winner_index(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(winner_index(&[]), None);
        let params = ModelParams::from_squared(4, 0.5, 1.0, 1.0).unwrap();
        let (i, r) = selection_bias_from_observations(&params, &[0.1, 2.5, -1.0, 2.0]).unwrap();
        assert_eq!(i, 1);
        assert_eq!(r, selection_bias(&params, 2.5).unwrap());
        assert!(selection_bias_from_observations(&params, &[1.0]).is_err());
    }

    #[test]
    fn rejects_non_finite_xp() {
        assert!(selection_bias(&ten_arm(), f64::NAN).is_err());
        assert!(selection_bias(&ten_arm(), f64::INFINITY).is_err());
    }

    #[test]
    fn exceedance_probabilities() {
        let p = max_exceedance_probability(&ten_arm(), 3.25).unwrap();
        assert!((p - 0.486).abs() < 2e-3, "{p}");
        let q = max_cdf(&ten_arm(), 1.5).unwrap();
        assert!((q - 0.102).abs() < 2e-3, "{q}");
        assert_eq!(max_exceedance_probability(&ten_arm(), f64::NEG_INFINITY).unwrap(), 1.0);
        assert_eq!(max_exceedance_probability(&ten_arm(), f64::INFINITY).unwrap(), 0.0);
    }

    #[test]
    fn table_order_and_shape() {
        let cases = [Case::from_squared(0.5, 1.0), Case::from_squared(1.0, 0.5)];
        let rows = bias_table(1.0, &[10, 3, 5], &[2.0, 0.0, 1.0], &cases).unwrap();
        assert_eq!(rows.len(), 18);
        let keys: Vec<(usize, usize, f64)> = rows.iter().map(|r| (r.case, r.report.params.p(), r.report.xp)).collect();
        assert_eq!(keys[0], (1, 3, 0.0));
        assert_eq!(keys[1], (1, 3, 1.0));
        assert_eq!(keys[3], (1, 5, 0.0));
        assert_eq!(keys[17], (2, 10, 2.0));
        assert!(rows.iter().filter(|r| r.case == 1).all(|r| r.report.delta > 0.0));
        assert!(rows.iter().filter(|r| r.case == 2).all(|r| r.report.delta < 0.0));
    }
}
