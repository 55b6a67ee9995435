//! Small numerically careful summaries shared by the Monte Carlo code.

use serde::Serialize;

/// Kahan–Babuška–Neumaier compensated sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// Sample mean with its standard error `sd / sqrt(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
}

impl MeanEstimate {
    /// Two-pass mean and standard error; `None` for an empty sample.
    ///
    /// A single observation has standard error 0.
    pub fn from_slice(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len();
        let mean = xs.iter().copied().collect::<CompensatedSum>().value() / n as f64;
        let std_error = if n > 1 {
            let ss = xs
                .iter()
                .map(|x| (x - mean) * (x - mean))
                .collect::<CompensatedSum>()
                .value();
            (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std_error,
            count: n,
        })
    }

    /// Whether `target` lies within `k` standard errors of the mean.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let s: CompensatedSum = [1.0, 1e100, 1.0, -1e100].into_iter().collect();
        assert_eq!(s.value(), 2.0);
    }

    #[test]
    fn mean_estimate_basics() {
        assert!(MeanEstimate::from_slice(&[]).is_none());
        let one = MeanEstimate::from_slice(&[3.0]).unwrap();
        assert_eq!((one.mean, one.std_error), (3.0, 0.0));
        let m = MeanEstimate::from_slice(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.mean, 2.5);
        assert!((m.std_error - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
    }
}
