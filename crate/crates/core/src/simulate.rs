//! Seeded Monte Carlo harness for the normal-normal model.
//!
//! Replication `r` draws from its own ChaCha8 stream `(seed, r)`, so results
//! do not depend on thread count or scheduling, and raising `n_reps` only
//! appends replications.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::bias::{self, winner_index};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::stats::{CompensatedSum, MeanEstimate};
use crate::truncmvn::TruncatedAboveSpec;

/// Number of proposals after which rejection sampling gives up.
pub const REJECTION_BUDGET: u64 = 1_000_000_000;

const CHUNK: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimConfig {
    pub params: ModelParams,
    pub n_reps: usize,
    pub seed: u64,
    pub bin_width: f64,
}

impl SimConfig {
    pub fn new(params: ModelParams, n_reps: usize, seed: u64) -> Self {
        Self {
            params,
            n_reps,
            seed,
            bin_width: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_reps == 0 {
            return Err(Error::InvalidParams("n_reps must be at least 1".into()));
        }
        if !(self.bin_width > 0.0 && self.bin_width.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "bin_width must be positive, got {}",
                self.bin_width
            )));
        }
        Ok(())
    }
}

/// One draw of the latent arm means and their observed sample means.
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub mu: Vec<f64>,
    pub x: Vec<f64>,
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws replication `index` through the shared-factor representation:
/// `μ_i = φ + μ'_i` and `X_i = μ_i + ξ + ε'_i`.
pub fn sample_replication(params: &ModelParams, seed: u64, index: u64) -> Replication {
    let mut rng = stream(seed, index);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let (g2, e2, s) = (params.gamma2(), params.eta2(), params.sigma());
    let phi = (1.0 - g2).sqrt() * normal();
    let xi = s * (1.0 - e2).sqrt() * normal();
    let mut mu = Vec::with_capacity(params.p());
    let mut x = Vec::with_capacity(params.p());
    for _ in 0..params.p() {
        let m = phi + params.gamma() * normal();
        let e = xi + params.eta() * s * normal();
        mu.push(m);
        x.push(m + e);
    }
    Replication { mu, x }
}

/// The replication stream of `cfg`, in order.
pub fn sample_model(cfg: &SimConfig) -> impl Iterator<Item = Replication> + '_ {
    (0..cfg.n_reps as u64).map(move |r| sample_replication(&cfg.params, cfg.seed, r))
}

/// The selected arm of one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WinnerPair {
    pub mu_star: f64,
    pub x_star: f64,
    pub winner_index: usize,
}

fn winner_of(rep: &Replication) -> WinnerPair {
    let i = winner_index(&rep.x).expect("p >= 2");
    WinnerPair {
        mu_star: rep.mu[i],
        x_star: rep.x[i],
        winner_index: i,
    }
}

pub fn winner_pairs(cfg: &SimConfig) -> Result<Vec<WinnerPair>> {
    cfg.validate()?;
    Ok((0..cfg.n_reps as u64)
        .into_par_iter()
        .map(|r| winner_of(&sample_replication(&cfg.params, cfg.seed, r)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinSummary {
    pub center: f64,
    pub mean_mu: f64,
    pub count: usize,
    pub std_error: f64,
}

fn bin_key(x: f64, width: f64) -> i64 {
    (x / width + 0.5).floor() as i64
}

/// Mean of `μ*` within bins of `x*` centred on multiples of `bin_width`.
/// Empty bins are omitted.
pub fn binned_conditional_mean(pairs: &[WinnerPair], bin_width: f64) -> Vec<BinSummary> {
    let mut bins: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for pair in pairs {
        bins.entry(bin_key(pair.x_star, bin_width)).or_default().push(pair.mu_star);
    }
    bins.into_iter()
        .map(|(k, mus)| {
            let est = MeanEstimate::from_slice(&mus).expect("non-empty bin");
            BinSummary {
                center: k as f64 * bin_width,
                mean_mu: est.mean,
                count: est.count,
                std_error: est.std_error,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
}

impl LinearFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

/// Ordinary least squares of `μ*` on `x*`.
pub fn regression_fit(pairs: &[WinnerPair]) -> Result<LinearFit> {
    if pairs.is_empty() {
        return Err(Error::DegenerateDesign);
    }
    let n = pairs.len() as f64;
    let x_bar = pairs.iter().map(|p| p.x_star).collect::<CompensatedSum>().value() / n;
    let y_bar = pairs.iter().map(|p| p.mu_star).collect::<CompensatedSum>().value() / n;
    let sxx = pairs
        .iter()
        .map(|p| (p.x_star - x_bar).powi(2))
        .collect::<CompensatedSum>()
        .value();
    let sxy = pairs
        .iter()
        .map(|p| (p.x_star - x_bar) * (p.mu_star - y_bar))
        .collect::<CompensatedSum>()
        .value();
    if sxx == 0.0 {
        return Err(Error::DegenerateDesign);
    }
    let slope = sxy / sxx;
    Ok(LinearFit {
        intercept: y_bar - slope * x_bar,
        slope,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionSummary {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub acceptance_rate: f64,
    pub acceptance_std_error: f64,
    pub proposals: u64,
    pub accepted: usize,
}

/// Draws from the untruncated base Gaussian until `n_accepted` draws fall
/// inside the truncation region.
pub fn rejection_sample_truncated(spec: &TruncatedAboveSpec, n_accepted: usize, seed: u64) -> Result<RejectionSummary> {
    rejection_sample_with_budget(spec, n_accepted, seed, REJECTION_BUDGET)
}

pub fn rejection_sample_with_budget(
    spec: &TruncatedAboveSpec,
    n_accepted: usize,
    seed: u64,
    max_proposals: u64,
) -> Result<RejectionSummary> {
    if n_accepted == 0 {
        return Err(Error::InvalidParams("n_accepted must be at least 1".into()));
    }
    let n = spec.dim();
    let chol = spec.base().cholesky_lower()?;
    let theta = spec.base().mean().as_slice().to_vec();
    let upper = spec.upper();

    // Chunk j uses stream j; each returns its accepted draws (flattened) and
    // the within-chunk position of every acceptance.
    let run_chunk = |j: u64| -> (Vec<f64>, Vec<usize>) {
        let mut rng = stream(seed, j);
        let mut z = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut kept = Vec::new();
        let mut at = Vec::new();
        for t in 0..CHUNK {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            let mut inside = true;
            for i in 0..n {
                let v = theta[i] + (0..=i).map(|k| chol[(i, k)] * z[k]).sum::<f64>();
                y[i] = v;
                inside &= v <= upper[i];
            }
            if inside {
                kept.extend_from_slice(&y);
                at.push(t);
            }
        }
        (kept, at)
    };

    let batch = 2 * rayon::current_num_threads().max(1) as u64;
    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(n_accepted); n];
    let mut accepted = 0usize;
    let mut proposals = 0u64;
    let mut next_chunk = 0u64;
    'outer: loop {
        if next_chunk * CHUNK as u64 >= max_proposals {
            return Err(Error::BudgetExhausted { proposals, accepted });
        }
        let results: Vec<_> = (next_chunk..next_chunk + batch).into_par_iter().map(run_chunk).collect();
        for (kept, at) in results {
            if next_chunk * CHUNK as u64 >= max_proposals {
                return Err(Error::BudgetExhausted { proposals, accepted });
            }
            next_chunk += 1;
            for (draw, t) in kept.chunks_exact(n).zip(&at) {
                for (col, v) in columns.iter_mut().zip(draw) {
                    col.push(*v);
                }
                accepted += 1;
                if accepted == n_accepted {
                    proposals += *t as u64 + 1;
                    break 'outer;
                }
            }
            proposals += CHUNK as u64;
        }
    }

    let estimates: Vec<MeanEstimate> = columns
        .iter()
        .map(|c| MeanEstimate::from_slice(c).expect("accepted draws"))
        .collect();
    let rate = accepted as f64 / proposals as f64;
    Ok(RejectionSummary {
        mean: estimates.iter().map(|e| e.mean).collect(),
        std_error: estimates.iter().map(|e| e.std_error).collect(),
        acceptance_rate: rate,
        acceptance_std_error: (rate * (1.0 - rate) / proposals as f64).sqrt(),
        proposals,
        accepted,
    })
}

fn per_replication<F>(cfg: &SimConfig, f: F) -> Result<MeanEstimate>
where
    F: Fn(&Replication) -> f64 + Sync,
{
    cfg.validate()?;
    let values: Vec<f64> = (0..cfg.n_reps as u64)
        .into_par_iter()
        .map(|r| f(&sample_replication(&cfg.params, cfg.seed, r)))
        .collect();
    Ok(MeanEstimate::from_slice(&values).expect("n_reps >= 1"))
}

/// Mean of `μ_{i*} - E(μ_{i*} | X_1, ..., X_p)` over replications.
///
/// The full-data posterior mean already conditions on everything that
/// determines the selection, so this should be zero.
pub fn paradox_residuals(cfg: &SimConfig) -> Result<MeanEstimate> {
    let k = model::derive_constants(&cfg.params);
    per_replication(cfg, |rep| {
        let w = winner_of(rep);
        let total: f64 = rep.x.iter().sum();
        let fitted = k.r_selected() * w.x_star + k.r_other() * (total - w.x_star);
        w.mu_star - fitted
    })
}

/// Mean of `μ_{i*} - X_{i*}/(1 + σ²)`, the error of the selection-blind
/// posterior mean.
pub fn naive_residuals(cfg: &SimConfig) -> Result<MeanEstimate> {
    let params = cfg.params;
    per_replication(cfg, |rep| {
        let w = winner_of(rep);
        w.mu_star - model::posterior_mean_single(&params, w.x_star)
    })
}

/// Piecewise-linear interpolant of `Δ(x)` on a uniform grid.
#[derive(Debug, Clone)]
pub struct BiasInterpolant {
    lo: f64,
    step: f64,
    values: Vec<f64>,
}

impl BiasInterpolant {
    pub fn new(params: &ModelParams, lo: f64, hi: f64, points: usize) -> Result<Self> {
        let points = points.max(2);
        let step = if hi > lo { (hi - lo) / (points - 1) as f64 } else { 1.0 };
        let values = (0..points)
            .into_par_iter()
            .map(|i| Ok(bias::selection_bias(params, lo + step * i as f64)?.delta))
            .collect::<Result<Vec<f64>>>()?;
        Ok(Self { lo, step, values })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let last = self.values.len() - 1;
        let t = ((x - self.lo) / self.step).clamp(0.0, last as f64);
        let i = (t.floor() as usize).min(last - 1);
        let f = t - i as f64;
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }
}

/// Monte Carlo check of the closed-form bias on one bin of `x*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasCheck {
    pub center: f64,
    pub bin_width: f64,
    /// Binned estimate of `E(X*/(1+σ²) - μ* | X* in bin)`.
    pub monte_carlo: MeanEstimate,
    /// Closed-form `Δ` at the bin centre.
    pub analytic_at_center: f64,
    /// Per-pair `X*/(1+σ²) - μ* - Δ(X*)`; zero in expectation when the
    /// closed form is right, so it carries no binning bias.
    pub discrepancy: MeanEstimate,
}

impl BiasCheck {
    pub fn passes(&self, k: f64) -> bool {
        self.discrepancy.within(0.0, k)
    }
}

pub fn bias_check(cfg: &SimConfig, center: f64) -> Result<BiasCheck> {
    let pairs = winner_pairs(cfg)?;
    bias_check_on(&cfg.params, &pairs, center, cfg.bin_width)
}

pub fn bias_check_on(params: &ModelParams, pairs: &[WinnerPair], center: f64, bin_width: f64) -> Result<BiasCheck> {
    let key = bin_key(center, bin_width);
    let in_bin: Vec<&WinnerPair> = pairs.iter().filter(|p| bin_key(p.x_star, bin_width) == key).collect();
    if in_bin.len() < 2 {
        return Err(Error::InvalidParams(format!(
            "fewer than two winners fall in the bin around {center}"
        )));
    }
    let lo = (key as f64 - 0.5) * bin_width;
    let table = BiasInterpolant::new(params, lo, lo + bin_width, 65)?;
    let naive: Vec<f64> = in_bin
        .iter()
        .map(|p| model::posterior_mean_single(params, p.x_star) - p.mu_star)
        .collect();
    let discrepancy: Vec<f64> = in_bin
        .iter()
        .zip(&naive)
        .map(|(p, d)| d - table.eval(p.x_star))
        .collect();
    Ok(BiasCheck {
        center: key as f64 * bin_width,
        bin_width,
        monte_carlo: MeanEstimate::from_slice(&naive).expect("non-empty"),
        analytic_at_center: bias::selection_bias(params, key as f64 * bin_width)?.delta,
        discrepancy: MeanEstimate::from_slice(&discrepancy).expect("non-empty"),
    })
}

/// Compares the average naive residual over all winners with `-E[Δ(X*)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NaiveContrast {
    /// Mean of `μ* - X*/(1+σ²)`.
    pub naive: MeanEstimate,
    /// Sample average of `-Δ(X*)` over the same winners.
    pub expected: f64,
    /// Per-replication `μ* - X*/(1+σ²) + Δ(X*)`.
    pub discrepancy: MeanEstimate,
}

pub fn naive_contrast(cfg: &SimConfig) -> Result<NaiveContrast> {
    let pairs = winner_pairs(cfg)?;
    let (lo, hi) = pairs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.x_star), hi.max(p.x_star)));
    let points = (((hi - lo) / 0.005).ceil() as usize + 1).max(2);
    let table = BiasInterpolant::new(&cfg.params, lo, hi, points)?;
    let naive: Vec<f64> = pairs
        .iter()
        .map(|p| p.mu_star - model::posterior_mean_single(&cfg.params, p.x_star))
        .collect();
    let deltas: Vec<f64> = pairs.iter().map(|p| table.eval(p.x_star)).collect();
    let discrepancy: Vec<f64> = naive.iter().zip(&deltas).map(|(n, d)| n + d).collect();
    Ok(NaiveContrast {
        naive: MeanEstimate::from_slice(&naive).expect("n_reps >= 1"),
        expected: -deltas.iter().copied().collect::<CompensatedSum>().value() / deltas.len() as f64,
        discrepancy: MeanEstimate::from_slice(&discrepancy).expect("n_reps >= 1"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GaussianSpec;
    use crate::truncmvn;
    use approx::assert_abs_diff_eq;

    fn cfg(params: ModelParams, n: usize, seed: u64) -> SimConfig {
        SimConfig::new(params, n, seed)
    }

    #[test]
    fn replications_are_deterministic_and_extendable() {
        let params = ModelParams::from_squared(4, 0.5, 0.8, 1.5).unwrap();
        let short: Vec<_> = sample_model(&cfg(params, 50, 9)).collect();
        let long: Vec<_> = sample_model(&cfg(params, 80, 9)).collect();
        assert_eq!(short[..], long[..50]);
        let again: Vec<_> = sample_model(&cfg(params, 50, 9)).collect();
        assert_eq!(short, again);
        let other: Vec<_> = sample_model(&cfg(params, 50, 10)).collect();
        assert_ne!(short, other);
    }

    #[test]
    fn winner_pairs_respect_maximum() {
        let c = cfg(ModelParams::from_squared(5, 0.5, 1.0, 1.0).unwrap(), 2000, 1);
        let pairs = winner_pairs(&c).unwrap();
        for (pair, rep) in pairs.iter().zip(sample_model(&c)) {
            assert!(rep.x.iter().all(|x| *x <= pair.x_star));
            assert_eq!(rep.x[pair.winner_index], pair.x_star);
            assert_eq!(rep.mu[pair.winner_index], pair.mu_star);
        }
    }

    #[test]
    fn symmetric_two_arm_winner_frequency() {
        let c = cfg(ModelParams::new(2, 0.6, 0.9, 1.0).unwrap(), 40_000, 3);
        let ones: Vec<f64> = winner_pairs(&c)
            .unwrap()
            .iter()
            .map(|p| (p.winner_index == 1) as u8 as f64)
            .collect();
        let est = MeanEstimate::from_slice(&ones).unwrap();
        assert!(est.within(0.5, 3.0), "{est:?}");
    }

    #[test]
    fn binning() {
        let same = vec![
            WinnerPair {
                mu_star: 0.3,
                x_star: 1.0,
                winner_index: 0
            };
            5
        ];
        let bins = binned_conditional_mean(&same, 0.25);
        assert_eq!(bins.len(), 1);
        assert_eq!(bins[0].count, 5);
        assert_eq!(bins[0].std_error, 0.0);
        assert_eq!(bins[0].center, 1.0);

        let spread: Vec<WinnerPair> = [0.1, 0.12, 0.9, 3.2, 3.3]
            .iter()
            .map(|&x| WinnerPair {
                mu_star: x,
                x_star: x,
                winner_index: 0,
            })
            .collect();
        let centers: Vec<f64> = binned_conditional_mean(&spread, 0.25).iter().map(|b| b.center).collect();
        assert_eq!(centers, vec![0.0, 1.0, 3.25]);
    }

    #[test]
    fn regression_recovers_exact_line() {
        let pairs: Vec<WinnerPair> = (0..20)
            .map(|i| {
                let x = i as f64 * 0.37 - 2.0;
                WinnerPair {
                    mu_star: 0.25 - 1.5 * x,
                    x_star: x,
                    winner_index: 0,
                }
            })
            .collect();
        let fit = regression_fit(&pairs).unwrap();
        assert_abs_diff_eq!(fit.intercept, 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.slope, -1.5, epsilon = 1e-12);
        let flat = vec![
            WinnerPair {
                mu_star: 1.0,
                x_star: 2.0,
                winner_index: 0
            };
            3
        ];
        assert_eq!(regression_fit(&flat), Err(Error::DegenerateDesign));
        assert_eq!(regression_fit(&[]), Err(Error::DegenerateDesign));
    }

    #[test]
    fn rejection_sampler_basics() {
        let loose = TruncatedAboveSpec::new(
            GaussianSpec::equicorrelated(vec![0.5, -0.5], 1.0, 0.5).unwrap(),
            vec![1e6, 1e6],
        )
        .unwrap();
        let s = rejection_sample_truncated(&loose, 50_000, 2).unwrap();
        assert_eq!(s.acceptance_rate, 1.0);
        assert!((s.mean[0] - 0.5).abs() < 3.0 * s.std_error[0]);
        assert!((s.mean[1] + 0.5).abs() < 3.0 * s.std_error[1]);

        let half = TruncatedAboveSpec::new(GaussianSpec::equicorrelated(vec![0.0], 1.0, 0.0).unwrap(), vec![0.0]).unwrap();
        let s = rejection_sample_truncated(&half, 200_000, 4).unwrap();
        assert!((s.mean[0] + 0.797_884_560_802_865_4).abs() < 3.0 * s.std_error[0]);
        assert!((s.acceptance_rate - 0.5).abs() < 3.0 * s.acceptance_std_error);
    }

    #[test]
    fn rejection_sampler_budget() {
        let rare = TruncatedAboveSpec::new(GaussianSpec::equicorrelated(vec![0.0], 1.0, 0.0).unwrap(), vec![-6.0]).unwrap();
        let err = rejection_sample_with_budget(&rare, 10, 1, 1 << 16).unwrap_err();
        assert!(matches!(err, Error::BudgetExhausted { .. }), "{err}");
    }

    #[test]
    fn rejection_agrees_with_truncated_mean_on_small_spec() {
        let spec = TruncatedAboveSpec::new(
            GaussianSpec::equicorrelated(vec![0.2, -0.3, 0.1], 0.8, 0.6).unwrap(),
            vec![0.9, 0.4, 1.5],
        )
        .unwrap();
        let exact = truncmvn::truncated_mean(&spec).unwrap();
        let s = rejection_sample_truncated(&spec, 200_000, 8).unwrap();
        for ((m, e), se) in s.mean.iter().zip(&exact).zip(&s.std_error) {
            assert!((m - e).abs() < 3.0 * se, "{m} vs {e}");
        }
        assert!((s.acceptance_rate - spec.alpha()).abs() < 3.0 * s.acceptance_std_error);
    }

    #[test]
    fn equal_correlation_residuals_match() {
        let params = ModelParams::new(4, 0.8, 0.8, 1.2).unwrap();
        let c = cfg(params, 5000, 5);
        assert_abs_diff_eq!(
            paradox_residuals(&c).unwrap().mean,
            naive_residuals(&c).unwrap().mean,
            epsilon = 1e-14
        );
    }

    #[test]
    fn config_validation() {
        let params = ModelParams::new(3, 0.5, 0.5, 1.0).unwrap();
        assert!(winner_pairs(&cfg(params, 0, 1)).is_err());
        let mut bad = cfg(params, 10, 1);
        bad.bin_width = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn interpolant_hits_nodes() {
        let params = ModelParams::from_squared(3, 0.5, 1.0, 1.0).unwrap();
        let table = BiasInterpolant::new(&params, 0.0, 2.0, 5).unwrap();
        assert_eq!(table.eval(1.0), bias::selection_bias(&params, 1.0).unwrap().delta);
        assert_eq!(table.eval(-3.0), table.eval(0.0));
    }
}
