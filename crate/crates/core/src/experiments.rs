//! Scaling studies of `E[BCap(R_n)]`, the branching capacity of a simple
//! random walk range.
//!
//! The workhorse estimator rewrites the mean as a single probability:
//! `E[BCap(R_n)] = (n+1) P(past avoids R[-K, n-K], 0 not in R[1, n-K])`
//! with `K` uniform on `{0..n}`, so one trial costs one walk and one
//! (early-exiting) past sample regardless of `n`. The direct estimator
//! sums per-point equilibrium values over a sampled range and serves as
//! its cross-check at small `n`.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::capacity::{estimate_bcap, EquilibriumProfile};
use crate::error::Error;
use crate::gwtree::{TreeSampler, TruncationPolicy};
use crate::lattice::{sample_walk, LatticePoint, SiteSet};
use crate::rng::stream;
use crate::stats::{least_squares, mean_and_var, McEstimate};
use crate::Result;

const TAG_RANGE: u64 = 0x21;
const TAG_DIRECT: u64 = 0x22;
const TAG_BOOT: u64 = 0x23;

#[derive(Clone, Debug, Serialize)]
pub struct ScalingRow {
    pub d: usize,
    pub n: u64,
    pub estimator: String,
    pub value: f64,
    pub stderr: f64,
    pub bias: f64,
    pub samples: u64,
    pub seed: u64,
}

fn range_trial<R: Rng + ?Sized>(
    sampler: &TreeSampler,
    n: u64,
    caps: &TruncationPolicy,
    radius_factor: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let d = sampler.d;
    let k = rng.random_range(0..=n);
    let left = sample_walk(d, k as usize, rng)?;
    let right = sample_walk(d, (n - k) as usize, rng)?;
    let mut range = SiteSet::new(d);
    for p in left.positions() {
        range.insert(p);
    }
    for p in right.positions() {
        range.insert(p);
    }
    let e_ok = right.positions()[1..].iter().all(|p| !p.is_origin());
    let max_disp = left.positions().iter().chain(right.positions()).map(|p| p.norm()).fold(0.0, f64::max);
    let policy = TruncationPolicy::new(
        (radius_factor * max_disp).max(caps.spine_exit_radius).max(8.0),
        caps.subtree_node_cap,
        caps.spine_step_cap,
    )?;
    let statistic = if e_ok {
        let (hit, _) = sampler.past_hits(LatticePoint::origin(), &range, &policy, rng);
        if hit {
            0.0
        } else {
            (n + 1) as f64
        }
    } else {
        // The walk returned to the origin: the indicator is already 0 and
        // the past sample is not needed.
        0.0
    };
    Ok((statistic, policy.bias_note(d)))
}

fn range_values(
    sampler: &TreeSampler,
    n: u64,
    caps: &TruncationPolicy,
    radius_factor: f64,
    trials: std::ops::Range<u64>,
    seed: u64,
) -> Vec<(f64, f64)> {
    trials
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(seed, &[TAG_RANGE, n, t]);
            range_trial(sampler, n, caps, radius_factor, &mut rng)
                .expect("trial parameters were validated")
        })
        .collect()
}

/// Unbiased estimator of `E[BCap(R_n)]` via the translation identity; one
/// trial per sample regardless of `n`.
pub fn estimate_mean_bcap_range(
    sampler: &TreeSampler,
    n: u64,
    caps: &TruncationPolicy,
    radius_factor: f64,
    samples: u64,
    seed: u64,
) -> Result<McEstimate> {
    if samples == 0 {
        return Err(Error::Config("samples must be >= 1".into()));
    }
    if !(radius_factor > 0.0) {
        return Err(Error::Config(format!(
            "radius factor {radius_factor} must be positive"
        )));
    }
    let pairs = range_values(sampler, n, caps, radius_factor, 0..samples, seed);
    let values: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let bias = pairs.iter().map(|p| p.1).sum::<f64>() / samples as f64;
    Ok(McEstimate::from_samples(
        &values,
        bias,
        format!(
            "estimator=mean_bcap_range d={} n={n} samples={samples} seed={seed} radius_factor={radius_factor}",
            sampler.d
        ),
    ))
}

/// Direct estimator: sample one range `R_n`, then estimate `BCap` of that
/// set point by point. Conditional on the sampled range.
pub fn direct_bcap_range(
    sampler: &TreeSampler,
    n: u64,
    caps: &TruncationPolicy,
    per_point_samples: u64,
    seed: u64,
) -> Result<EquilibriumProfile> {
    if n > 1 << 12 {
        return Err(Error::Config(format!(
            "direct range estimator is O(n * samples); n = {n} exceeds 4096"
        )));
    }
    let mut rng = stream(seed, &[TAG_DIRECT]);
    let walk = sample_walk(sampler.d, n as usize, &mut rng)?;
    let range = SiteSet::from_points(sampler.d, walk.positions());
    estimate_bcap(sampler, &range, caps, per_point_samples, seed)
}

#[derive(Clone, Copy, Debug)]
pub enum SweepBudget {
    Fixed(u64),
    /// Pilot run of 10^3 trials, then enough samples that the row's
    /// stderr is below `rel_stderr` of its value (capped).
    Auto { rel_stderr: f64, max_samples: u64 },
}

/// Rows of `estimate_mean_bcap_range` over a list of `n`.
pub fn scaling_sweep(
    sampler: &TreeSampler,
    n_list: &[u64],
    caps: &TruncationPolicy,
    radius_factor: f64,
    budget: SweepBudget,
    seed: u64,
) -> Result<Vec<ScalingRow>> {
    if n_list.is_empty() {
        return Err(Error::Config("empty n list".into()));
    }
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let mut pairs;
        match budget {
            SweepBudget::Fixed(samples) => {
                if samples == 0 {
                    return Err(Error::Config("samples must be >= 1".into()));
                }
                pairs = range_values(sampler, n, caps, radius_factor, 0..samples, seed);
            }
            SweepBudget::Auto {
                rel_stderr,
                max_samples,
            } => {
                if !(rel_stderr > 0.0) || max_samples < 1000 {
                    return Err(Error::Config(
                        "auto budget needs rel_stderr > 0 and max_samples >= 1000".into(),
                    ));
                }
                let pilot = 1000.min(max_samples);
                pairs = range_values(sampler, n, caps, radius_factor, 0..pilot, seed);
                let values: Vec<f64> = pairs.iter().map(|p| p.0).collect();
                let (mean, var) = mean_and_var(&values);
                if mean > 0.0 {
                    let needed = (var / (rel_stderr * mean).powi(2)).ceil() as u64;
                    let total = needed.clamp(pilot, max_samples);
                    if total > pilot {
                        pairs.extend(range_values(
                            sampler,
                            n,
                            caps,
                            radius_factor,
                            pilot..total,
                            seed,
                        ));
                    }
                }
            }
        }
        let values: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let bias = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
        let est = McEstimate::from_samples(&values, bias, "");
        rows.push(ScalingRow {
            d: sampler.d,
            n,
            estimator: "mean_bcap_range".into(),
            value: est.mean,
            stderr: est.stderr,
            bias: est.bias_bound,
            samples: est.samples,
            seed,
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalingModel {
    /// value = c * n
    Linear,
    /// value = c * n / log n
    NOverLogN,
    /// value = c * sqrt(n)
    Sqrt,
}

impl ScalingModel {
    pub fn shape(&self, n: f64) -> f64 {
        match self {
            ScalingModel::Linear => n,
            ScalingModel::NOverLogN => n / n.ln(),
            ScalingModel::Sqrt => n.sqrt(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScalingFit {
    pub model: ScalingModel,
    /// Least-squares constant in the model's coordinates.
    pub constant: f64,
    /// Log-log slope of value against n (model-free exponent estimate).
    pub exponent: f64,
    /// RMS residual of `value - constant * shape(n)`.
    pub residual: f64,
}

/// Fit `value ~ c * shape(n)` through the origin, plus a model-free
/// log-log exponent.
pub fn fit_scaling(rows: &[ScalingRow], model: ScalingModel) -> Result<ScalingFit> {
    if rows.len() < 3 {
        return Err(Error::Config(format!(
            "scaling fit needs at least 3 rows, got {}",
            rows.len()
        )));
    }
    let shapes: Vec<f64> = rows.iter().map(|r| model.shape(r.n as f64)).collect();
    let denom: f64 = shapes.iter().map(|f| f * f).sum();
    if !(denom > 0.0) || rows.iter().any(|r| r.n < 2) {
        return Err(Error::Config(
            "degenerate design: need n >= 2 with nonzero shape values".into(),
        ));
    }
    let first_n = rows[0].n;
    if rows.iter().all(|r| r.n == first_n) {
        return Err(Error::Config("degenerate design: all n equal".into()));
    }
    let num: f64 = rows.iter().zip(&shapes).map(|(r, f)| r.value * f).sum();
    let constant = num / denom;
    let residual = (rows
        .iter()
        .zip(&shapes)
        .map(|(r, f)| (r.value - constant * f).powi(2))
        .sum::<f64>()
        / rows.len() as f64)
        .sqrt();
    let log_n: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let log_v: Vec<f64> = rows.iter().map(|r| r.value.max(1e-300).ln()).collect();
    let (_, exponent) = least_squares(&log_n, &log_v);
    Ok(ScalingFit {
        model,
        constant,
        exponent,
        residual,
    })
}

/// Bootstrap stderr of the fitted constant: resample rows with
/// replacement.
pub fn bootstrap_constant_stderr(
    rows: &[ScalingRow],
    model: ScalingModel,
    reps: u64,
    seed: u64,
) -> Result<f64> {
    if reps < 2 {
        return Err(Error::Config("need at least 2 bootstrap reps".into()));
    }
    let constants: Vec<f64> = (0..reps)
        .map(|r| {
            let mut rng = stream(seed, &[TAG_BOOT, r]);
            // Resampling may repeat a single n; fall back to the full-fit
            // constant formula directly (no degeneracy guards needed).
            let sample: Vec<&ScalingRow> = (0..rows.len())
                .map(|_| &rows[rng.random_range(0..rows.len())])
                .collect();
            let denom: f64 = sample
                .iter()
                .map(|row| model.shape(row.n as f64).powi(2))
                .sum();
            let num: f64 = sample
                .iter()
                .map(|row| row.value * model.shape(row.n as f64))
                .sum();
            num / denom
        })
        .collect();
    let (_, var) = mean_and_var(&constants);
    Ok(var.sqrt())
}

/// CSV schema `d,n,estimator,value,stderr,bias,samples,seed`.
pub fn write_scaling_csv<W: Write>(out: &mut W, rows: &[ScalingRow]) -> Result<()> {
    writeln!(out, "d,n,estimator,value,stderr,bias,samples,seed")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.d, r.n, r.estimator, r.value, r.stderr, r.bias, r.samples, r.seed
        )?;
    }
    Ok(())
}

/// Companion metadata for a sweep CSV.
#[derive(Clone, Debug, Serialize)]
pub struct SweepMetadata {
    pub law: String,
    pub node_cap: u64,
    pub spine_step_cap: usize,
    pub radius_factor: f64,
    pub n_list: Vec<u64>,
    pub seed: u64,
    pub build: String,
    pub wall_secs: f64,
}

impl SweepMetadata {
    pub fn collect(
        law: &str,
        caps: &TruncationPolicy,
        radius_factor: f64,
        n_list: &[u64],
        seed: u64,
        started: Instant,
    ) -> Self {
        SweepMetadata {
            law: law.to_string(),
            node_cap: caps.subtree_node_cap,
            spine_step_cap: caps.spine_step_cap,
            radius_factor,
            n_list: n_list.to_vec(),
            seed,
            build: env!("CARGO_PKG_VERSION").to_string(),
            wall_secs: started.elapsed().as_secs_f64(),
        }
    }

    pub fn write_json<W: Write>(&self, out: &mut W) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Parse(format!("metadata serialization: {e}")))?;
        writeln!(out, "{text}")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offspring::OffspringLaw;

    fn sampler(d: usize) -> TreeSampler {
        TreeSampler::new(d, OffspringLaw::binary()).unwrap()
    }

    fn caps() -> TruncationPolicy {
        TruncationPolicy::new(8.0, 10_000, 1_000_000).unwrap()
    }

    #[test]
    fn n_zero_matches_single_point_capacity() {
        let s = sampler(6);
        let mean_est = estimate_mean_bcap_range(&s, 0, &caps(), 4.0, 4000, 501).unwrap();
        let direct = estimate_bcap(
            &s,
            &SiteSet::from_points(6, &[LatticePoint::origin()]),
            &TruncationPolicy::new(16.0, 10_000, 1_000_000).unwrap(),
            4000,
            502,
        )
        .unwrap()
        .bcap;
        assert!(
            (mean_est.mean - direct.mean).abs() <= 3.0 * mean_est.combined_stderr(&direct),
            "{} vs {}",
            mean_est.mean,
            direct.mean
        );
    }

    #[test]
    fn estimators_agree_at_n64() {
        let s = sampler(6);
        let mean_est = estimate_mean_bcap_range(&s, 64, &caps(), 3.0, 20_000, 511).unwrap();
        let p = TruncationPolicy::new(48.0, 10_000, 1_000_000).unwrap();
        let mut cond_means = Vec::new();
        let mut cond_vars = Vec::new();
        for r in 0..16u64 {
            let prof = direct_bcap_range(&s, 64, &p, 48, 520 + r).unwrap();
            assert!(prof.bcap.mean <= 65.0, "BCap(R_64) <= n+1");
            cond_means.push(prof.bcap.mean);
            cond_vars.push(prof.bcap.stderr.powi(2));
        }
        let (direct_mean, between_var) = mean_and_var(&cond_means);
        let m = cond_means.len() as f64;
        // Average of conditional estimates: between-range variance plus the
        // mean within-range variance, both divided by the number of ranges.
        let direct_stderr =
            ((between_var + cond_vars.iter().sum::<f64>() / m) / m).sqrt();
        let combined = (mean_est.stderr.powi(2) + direct_stderr.powi(2)).sqrt();
        assert!(
            (mean_est.mean - direct_mean).abs() <= 4.0 * combined,
            "identity {} vs direct {} (combined {combined})",
            mean_est.mean,
            direct_mean
        );
    }

    #[test]
    fn direct_rejects_large_n() {
        let s = sampler(6);
        assert!(direct_bcap_range(&s, 1 << 13, &caps(), 8, 1).is_err());
    }

    #[test]
    fn monotone_in_n() {
        let s = sampler(6);
        let lo = estimate_mean_bcap_range(&s, 16, &caps(), 3.0, 12_000, 531).unwrap();
        let hi = estimate_mean_bcap_range(&s, 64, &caps(), 3.0, 12_000, 532).unwrap();
        assert!(
            lo.mean <= hi.mean + 4.0 * lo.combined_stderr(&hi),
            "{} vs {}",
            lo.mean,
            hi.mean
        );
    }

    #[test]
    fn d7_value_doubles_with_n() {
        let s = sampler(7);
        let caps7 = TruncationPolicy::new(8.0, 3000, 1_000_000).unwrap();
        let lo = estimate_mean_bcap_range(&s, 128, &caps7, 2.0, 40_000, 541).unwrap();
        let hi = estimate_mean_bcap_range(&s, 256, &caps7, 2.0, 40_000, 542).unwrap();
        let ratio = hi.mean / lo.mean;
        assert!((1.8..=2.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn sweep_and_fit_synthetic() {
        let mk = |n: u64, value: f64| ScalingRow {
            d: 6,
            n,
            estimator: "synthetic".into(),
            value,
            stderr: 0.0,
            bias: 0.0,
            samples: 1,
            seed: 0,
        };
        let linear: Vec<ScalingRow> = [16u64, 64, 256, 1024]
            .iter()
            .map(|&n| mk(n, 3.0 * n as f64))
            .collect();
        let fit = fit_scaling(&linear, ScalingModel::Linear).unwrap();
        assert!((fit.constant - 3.0).abs() < 1e-12);
        assert!(fit.residual < 1e-9);
        assert!((fit.exponent - 1.0).abs() < 1e-9);

        let nlog: Vec<ScalingRow> = [16u64, 64, 256, 1024]
            .iter()
            .map(|&n| mk(n, 2.0 * n as f64 / (n as f64).ln()))
            .collect();
        let fit = fit_scaling(&nlog, ScalingModel::NOverLogN).unwrap();
        assert!((fit.constant - 2.0).abs() < 1e-9);

        let boot = bootstrap_constant_stderr(&linear, ScalingModel::Linear, 100, 3).unwrap();
        assert!(boot < 1e-9, "noise-free rows bootstrap to zero spread");

        assert!(fit_scaling(&linear[..2], ScalingModel::Linear).is_err());
        let flat: Vec<ScalingRow> = (0..4).map(|_| mk(64, 1.0)).collect();
        assert!(fit_scaling(&flat, ScalingModel::Linear).is_err());
    }

    #[test]
    fn sweep_rows_and_output_format() {
        let s = sampler(6);
        let rows = scaling_sweep(
            &s,
            &[8, 16, 32],
            &caps(),
            3.0,
            SweepBudget::Fixed(2000),
            551,
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert!(r.value >= 0.0 && r.value <= r.n as f64 + 1.0);
        }
        let mut buf = Vec::new();
        write_scaling_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("d,n,estimator,value,stderr,bias,samples,seed\n"));
        assert_eq!(text.lines().count(), 4);

        let meta = SweepMetadata::collect("builtin:binary", &caps(), 3.0, &[8, 16, 32], 551, Instant::now());
        let mut jbuf = Vec::new();
        meta.write_json(&mut jbuf).unwrap();
        assert!(String::from_utf8(jbuf).unwrap().contains("\"law\": \"builtin:binary\""));
    }

    #[test]
    fn auto_budget_hits_target() {
        let s = sampler(6);
        let rows = scaling_sweep(
            &s,
            &[32],
            &caps(),
            3.0,
            SweepBudget::Auto {
                rel_stderr: 0.05,
                max_samples: 50_000,
            },
            561,
        )
        .unwrap();
        let r = &rows[0];
        assert!(r.samples >= 1000);
        assert!(
            r.stderr <= 0.055 * r.value || r.samples == 50_000,
            "stderr {} value {} samples {}",
            r.stderr,
            r.value,
            r.samples
        );
    }
}
