//! Critical offspring laws, size-biasing, and the child-split law of special
//! (spine) vertices.
//!
//! All laws have finite support and exact cached moments. Criticality
//! (mean 1) is enforced to 1e-12: a drift in the mean biases every
//! downstream estimator linearly in tree depth.

use crate::error::Error;
use crate::Result;
use rand::Rng;
use std::path::Path;

const CRITICAL_TOL: f64 = 1e-12;

/// A critical offspring pmf `p_0..p_K` with cached moments.
#[derive(Clone, Debug)]
pub struct OffspringLaw {
    pmf: Vec<f64>,
    cdf: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub third_moment: f64,
}

/// The size-biased law `q_i = i * p_i` on `{1..K}` (index 0 carries no mass).
#[derive(Clone, Debug)]
pub struct SizeBiasedLaw {
    pmf: Vec<f64>,
    cdf: Vec<f64>,
}

/// Children of a special vertex, split around the chosen spine successor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpineSplit {
    pub past_count: usize,
    pub future_count: usize,
}

fn build_cdf(pmf: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf = Vec::with_capacity(pmf.len());
    for &p in pmf {
        acc += p;
        cdf.push(acc);
    }
    if let Some(last) = cdf.last_mut() {
        *last = 1.0;
    }
    cdf
}

#[inline]
fn sample_cdf<R: Rng + ?Sized>(cdf: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    cdf.partition_point(|&c| c < u).min(cdf.len() - 1)
}

impl OffspringLaw {
    /// Validate a raw pmf: normalize, cache moments, reject non-critical or
    /// degenerate input.
    pub fn validate(raw: &[f64]) -> Result<OffspringLaw> {
        if raw.is_empty() {
            return Err(Error::Law("empty pmf".into()));
        }
        if let Some(&bad) = raw.iter().find(|&&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Law(format!("negative or non-finite mass {bad}")));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::Law("zero total mass".into()));
        }
        let pmf: Vec<f64> = raw.iter().map(|&p| p / total).collect();
        let mut mean = 0.0;
        let mut m2 = 0.0;
        let mut m3 = 0.0;
        for (k, &p) in pmf.iter().enumerate() {
            let k = k as f64;
            mean += k * p;
            m2 += k * k * p;
            m3 += k * k * k * p;
        }
        if (mean - 1.0).abs() > CRITICAL_TOL {
            return Err(Error::Law(format!(
                "law is not critical: mean = {mean} (tolerance {CRITICAL_TOL:e})"
            )));
        }
        let variance = m2 - mean * mean;
        if variance <= 0.0 {
            return Err(Error::Law(format!(
                "degenerate law: variance = {variance}, must be positive"
            )));
        }
        let cdf = build_cdf(&pmf);
        Ok(OffspringLaw {
            pmf,
            cdf,
            mean,
            variance,
            third_moment: m3,
        })
    }

    /// `p_0 = p_2 = 1/2`: the minimal critical law, variance 1.
    pub fn binary() -> OffspringLaw {
        OffspringLaw::validate(&[0.5, 0.0, 0.5]).expect("binary law is critical")
    }

    /// `Geometric(1/2)` (`p_k = 2^{-(k+1)}`) truncated at `K = 40`,
    /// renormalized, with criticality restored by an affine correction on
    /// `p_0` and `p_1`. Variance 2 up to the (sub-1e-10) truncation error.
    pub fn geometric_half() -> OffspringLaw {
        let k_max = 40usize;
        let mut pmf: Vec<f64> = (0..=k_max).map(|k| 0.5f64.powi(k as i32 + 1)).collect();
        let total: f64 = pmf.iter().sum();
        for p in &mut pmf {
            *p /= total;
        }
        let mean: f64 = pmf.iter().enumerate().map(|(k, &p)| k as f64 * p).sum();
        // Mass-preserving mean shift: move (1 - mean) from p_0 to p_1.
        let delta = 1.0 - mean;
        pmf[0] -= delta;
        pmf[1] += delta;
        OffspringLaw::validate(&pmf).expect("corrected geometric law is critical")
    }

    /// Load a law from plain text: one probability per line, index = line - 1.
    pub fn from_file(path: &Path) -> Result<OffspringLaw> {
        let text = std::fs::read_to_string(path)?;
        let mut pmf = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let p: f64 = line.parse().map_err(|_| {
                Error::Parse(format!("line {}: expected a probability, got {line:?}", i + 1))
            })?;
            pmf.push(p);
        }
        OffspringLaw::validate(&pmf)
    }

    #[inline]
    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    #[inline]
    pub fn prob(&self, k: usize) -> f64 {
        self.pmf.get(k).copied().unwrap_or(0.0)
    }

    pub fn max_children(&self) -> usize {
        self.pmf.len() - 1
    }

    /// Draw an offspring count.
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_cdf(&self.cdf, rng)
    }

    /// `P(d_i = k) = sum_{j >= k+1} p_j`: the marginal law of the future
    /// (equivalently past) child count of a special vertex.
    pub fn spine_child_marginal(&self, k: usize) -> f64 {
        self.pmf.iter().skip(k + 1).sum()
    }
}

pub fn size_biased(law: &OffspringLaw) -> SizeBiasedLaw {
    let pmf: Vec<f64> = law
        .pmf
        .iter()
        .enumerate()
        .map(|(i, &p)| i as f64 * p)
        .collect();
    debug_assert!((pmf.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    let cdf = build_cdf(&pmf);
    SizeBiasedLaw { pmf, cdf }
}

impl SizeBiasedLaw {
    #[inline]
    pub fn prob(&self, k: usize) -> f64 {
        self.pmf.get(k).copied().unwrap_or(0.0)
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_cdf(&self.cdf, rng)
    }

    pub fn mean(&self) -> f64 {
        self.pmf.iter().enumerate().map(|(i, &q)| i as f64 * q).sum()
    }
}

/// Children of a spine vertex at index `>= 1`: draw `K` size-biased, pick the
/// spine successor `J` uniform in `{1..K}`; siblings before `J` hang in the
/// past, siblings after in the future.
pub fn spine_split<R: Rng + ?Sized>(sb: &SizeBiasedLaw, rng: &mut R) -> SpineSplit {
    let k = sb.sample(rng);
    debug_assert!(k >= 1);
    let j = rng.random_range(1..=k as u64) as usize;
    SpineSplit {
        past_count: j - 1,
        future_count: k - j,
    }
}

/// Children of the root: total count `K` with `P(K = i) = p_{i-1}`; the
/// first child continues the spine, the remaining `K - 1` all hang in the
/// future. Returns that future count.
pub fn root_offspring<R: Rng + ?Sized>(law: &OffspringLaw, rng: &mut R) -> usize {
    law.sample(rng)
}
