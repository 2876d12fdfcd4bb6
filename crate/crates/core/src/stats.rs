//! Monte Carlo estimate containers and deterministic reductions.
//!
//! Per-trial statistics are collected in trial order and reduced with a fixed
//! pairwise tree, so a run partitioned over any number of workers produces
//! bitwise-identical summaries.

use serde::Serialize;

/// Sum `values` with a pairwise (cascade) tree. Deterministic and accurate
/// for long sums.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Sample mean and (n-1)-normalized variance via pairwise reduction.
pub fn mean_and_var(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, var)
}

/// A Monte Carlo estimate with explicit truncation-bias accounting.
#[derive(Clone, Debug, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    /// Sample standard deviation / sqrt(samples).
    pub stderr: f64,
    pub samples: u64,
    /// Bound on systematic (truncation) error, relative order.
    pub bias_bound: f64,
    /// Parameter echo for the record that produced this estimate.
    pub meta: String,
}

impl McEstimate {
    pub fn exact(value: f64, meta: impl Into<String>) -> Self {
        McEstimate {
            mean: value,
            stderr: 0.0,
            samples: 0,
            bias_bound: 0.0,
            meta: meta.into(),
        }
    }

    pub fn from_samples(values: &[f64], bias_bound: f64, meta: impl Into<String>) -> Self {
        let (mean, var) = mean_and_var(values);
        let n = values.len() as u64;
        let stderr = if n > 1 {
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        McEstimate {
            mean,
            stderr,
            samples: n,
            bias_bound,
            meta: meta.into(),
        }
    }

    /// Combined standard error of the difference of two independent estimates.
    pub fn combined_stderr(&self, other: &McEstimate) -> f64 {
        (self.stderr * self.stderr + other.stderr * other.stderr).sqrt()
    }
}

/// Ordinary least squares fit `y = intercept + slope * x`.
pub fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = pairwise_sum(x) / n;
    let my = pairwise_sum(y) / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
    }
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}
