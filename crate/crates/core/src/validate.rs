//! Oracle suite: every closed form checked against an independent route.
//!
//! Each check reports the worst case as a ratio `|discrepancy| / allowance`,
//! so a check passes when `worst_ratio <= 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bias;
use crate::error::Result;
use crate::model::{GaussianSpec, ModelParams};
use crate::mvn::{self, QmcConfig, QuadratureConfig};
use crate::quad::{self, Tolerance};
use crate::simulate::{self, SimConfig};
use crate::truncmvn::{self, TruncatedAboveSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Quick,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub worst_ratio: f64,
    pub detail: String,
}

impl CheckOutcome {
    fn from_ratios(name: &'static str, ratios: &[f64], detail: String) -> Self {
        let worst = ratios.iter().copied().fold(0.0, f64::max);
        Self {
            name,
            passed: ratios.iter().all(|r| *r <= 1.0),
            cases: ratios.len(),
            worst_ratio: worst,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub level: Level,
    pub seed: u64,
    pub checks: Vec<CheckOutcome>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// A random equicorrelated truncated spec whose normalizing constant stays
/// comfortably above zero.
pub fn random_truncated_spec(rng: &mut ChaCha8Rng, n: usize) -> TruncatedAboveSpec {
    let c = rng.random_range(0.3..2.0);
    let d = rng.random_range(0.0..1.5);
    let sd = f64::sqrt(c + d);
    let theta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let upper: Vec<f64> = theta.iter().map(|t| t + rng.random_range(0.0..1.5) * sd).collect();
    TruncatedAboveSpec::new(
        GaussianSpec::equicorrelated(theta, c, d).expect("valid random spec"),
        upper,
    )
    .expect("alpha well above 1e-300")
}

/// Random model parameters with `2 <= p <= max_p`.
pub fn random_params(rng: &mut ChaCha8Rng, max_p: usize) -> ModelParams {
    ModelParams::new(
        rng.random_range(2..=max_p),
        rng.random_range(0.0..1.0),
        rng.random_range(0.1..1.0),
        rng.random_range(0.3..2.5),
    )
    .expect("valid random params")
}

/// Golden values of the ten-arm example.
pub fn check_golden_values() -> Result<CheckOutcome> {
    let params = ModelParams::from_squared(10, 0.5, 1.0, 2.0)?;
    let lambda = bias::post_selection_mean(&params, 3.25)?;
    let exceed = bias::max_exceedance_probability(&params, 3.25)?;
    let below = bias::max_cdf(&params, 1.5)?;
    let ratios = [
        (lambda - 0.400).abs() / 0.005,
        (exceed - 0.486).abs() / 0.002,
        (below - 0.102).abs() / 0.002,
    ];
    Ok(CheckOutcome::from_ratios(
        "golden_values",
        &ratios,
        format!("lambda(3.25)={lambda:.6} Pr(max>3.25)={exceed:.6} Pr(max<=1.5)={below:.6}"),
    ))
}

/// Equicorrelated quadrature against lattice QMC on random instances.
pub fn check_cross_engine(instances: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios = Vec::with_capacity(instances);
    for i in 0..instances {
        let n = rng.random_range(2..=10);
        let c = rng.random_range(0.2..3.0);
        let d = rng.random_range(0.0..3.0);
        let sd = f64::sqrt(c + d);
        let mean: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let upper: Vec<f64> = mean.iter().map(|m| m + rng.random_range(-1.0..2.5) * sd).collect();
        let quad = mvn::mvn_cdf_equicorr(&mean, c, d, &upper, &QuadratureConfig::default())?;
        let spec = GaussianSpec::equicorrelated(mean, c, d)?;
        let qmc = mvn::mvn_cdf_general(
            &spec,
            &upper,
            &QmcConfig {
                seed: seed.wrapping_add(i as u64),
                ..QmcConfig::default()
            },
        )?;
        let allowed = (3.0 * qmc.std_error).max(1e-4);
        ratios.push((quad - qmc.probability).abs() / allowed);
    }
    Ok(CheckOutcome::from_ratios(
        "cdf_cross_engine",
        &ratios,
        format!("{instances} instances, allowance max(3 SE, 1e-4)"),
    ))
}

/// Truncated first moments (and `α`) against rejection sampling.
pub fn check_truncated_means(specs: usize, accepted: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [2, 3, 5];
    let mut ratios = Vec::new();
    for s in 0..specs {
        let spec = random_truncated_spec(&mut rng, dims[s % dims.len()]);
        let exact = truncmvn::truncated_mean(&spec)?;
        let mc = simulate::rejection_sample_truncated(&spec, accepted, seed.wrapping_add(1000 + s as u64))?;
        for ((e, m), se) in exact.iter().zip(&mc.mean).zip(&mc.std_error) {
            ratios.push((e - m).abs() / (3.0 * se));
        }
    }
    Ok(CheckOutcome::from_ratios(
        "truncated_mean_vs_rejection",
        &ratios,
        format!("{specs} specs, {accepted} accepted draws each, allowance 3 SE per coordinate"),
    ))
}

/// `α` against the rejection sampler's acceptance rate.
pub fn check_normalizing_constant(specs: usize, accepted: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios = Vec::new();
    for s in 0..specs {
        let spec = random_truncated_spec(&mut rng, 2 + s % 4);
        let mc = simulate::rejection_sample_truncated(&spec, accepted, seed.wrapping_add(2000 + s as u64))?;
        ratios.push((spec.alpha() - mc.acceptance_rate).abs() / (3.0 * mc.acceptance_std_error));
    }
    Ok(CheckOutcome::from_ratios(
        "alpha_vs_acceptance_rate",
        &ratios,
        format!("{specs} specs, allowance 3 SE"),
    ))
}

/// Every marginal density integrates to one.
pub fn check_density_normalization(specs: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios = Vec::new();
    for _ in 0..specs {
        let n = rng.random_range(1..=6);
        let spec = random_truncated_spec(&mut rng, n);
        let bounds = spec.centered_bounds();
        for (k, &top) in bounds.iter().enumerate() {
            let s = spec.base().cov()[(k, k)].sqrt();
            let mut points = vec![-40.0 * s, -6.0 * s, -2.0 * s];
            points.retain(|p| *p < top);
            points.push(top);
            let mut failure = None;
            let total = quad::integrate(
                |w| match truncmvn::marginal_density(&spec, k, w) {
                    Ok(g) => g,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                },
                &points,
                Tolerance::absolute(1e-9),
                100_000,
            );
            if let Some(e) = failure {
                return Err(e);
            }
            let value = match total {
                Ok(v) => v.value,
                Err(quad::Unconverged(v)) => v.value,
            };
            ratios.push((value - 1.0).abs() / 1e-6);
        }
    }
    Ok(CheckOutcome::from_ratios(
        "density_normalization",
        &ratios,
        format!("{specs} specs, allowance 1e-6"),
    ))
}

/// Closed-form `Δ` against the binned Monte Carlo estimate.
///
/// `configs` pairs parameters with a bin centre; `None` uses the bin of the
/// median winner.
pub fn check_selection_bias(configs: &[(ModelParams, Option<f64>)], reps: usize, seed: u64) -> Result<CheckOutcome> {
    let mut ratios = Vec::new();
    let mut detail = Vec::new();
    for (j, (params, center)) in configs.iter().enumerate() {
        let cfg = SimConfig::new(*params, reps, seed.wrapping_add(j as u64));
        let pairs = simulate::winner_pairs(&cfg)?;
        let center = match center {
            Some(c) => *c,
            None => {
                let mut xs: Vec<f64> = pairs.iter().map(|p| p.x_star).collect();
                xs.sort_by(f64::total_cmp);
                xs[xs.len() / 2]
            }
        };
        let check = simulate::bias_check_on(params, &pairs, center, cfg.bin_width)?;
        ratios.push(check.discrepancy.mean.abs() / (3.0 * check.discrepancy.std_error));
        detail.push(format!(
            "p={} x={:.2}: MC {:.4}±{:.4} vs Δ {:.4}",
            params.p(),
            check.center,
            check.monte_carlo.mean,
            check.monte_carlo.std_error,
            check.analytic_at_center
        ));
    }
    Ok(CheckOutcome::from_ratios(
        "selection_bias_vs_monte_carlo",
        &ratios,
        format!("{reps} replications each, allowance 3 SE; {}", detail.join("; ")),
    ))
}

/// Full-data posterior residual of the winner averages to zero.
pub fn check_paradox(params: &ModelParams, reps: usize, seed: u64) -> Result<CheckOutcome> {
    let est = simulate::paradox_residuals(&SimConfig::new(*params, reps, seed))?;
    Ok(CheckOutcome::from_ratios(
        "selection_paradox",
        &[est.mean.abs() / (3.0 * est.std_error)],
        format!("mean residual {:.3e} ± {:.3e} over {reps} replications", est.mean, est.std_error),
    ))
}

pub fn run(level: Level, seed: u64) -> Result<ValidationReport> {
    let full = level == Level::Full;
    let ten_arm = ModelParams::from_squared(10, 0.5, 1.0, 2.0)?;
    let bias_configs = [
        (ModelParams::from_squared(3, 0.5, 1.0, 1.0)?, Some(2.0)),
        (ModelParams::from_squared(3, 1.0, 0.5, 1.0)?, Some(2.0)),
        (ModelParams::from_squared(5, 0.5, 1.0, 2.0)?, Some(2.5)),
        (ModelParams::from_squared(6, 0.2, 0.8, 1.5)?, Some(1.5)),
        (ModelParams::from_squared(4, 0.9, 0.3, 0.8)?, Some(1.0)),
    ];
    let (bias_configs, bias_reps) = if full {
        (&bias_configs[..], 1_000_000)
    } else {
        (&bias_configs[..2], 200_000)
    };
    let checks = vec![
        check_golden_values()?,
        check_cross_engine(if full { 50 } else { 10 }, seed)?,
        check_density_normalization(if full { 10 } else { 3 }, seed)?,
        check_truncated_means(if full { 10 } else { 3 }, if full { 1_000_000 } else { 100_000 }, seed)?,
        check_normalizing_constant(if full { 10 } else { 3 }, if full { 1_000_000 } else { 100_000 }, seed)?,
        check_selection_bias(bias_configs, bias_reps, seed)?,
        check_paradox(&ten_arm, if full { 1_000_000 } else { 200_000 }, seed)?,
    ];
    Ok(ValidationReport { level, seed, checks })
}
