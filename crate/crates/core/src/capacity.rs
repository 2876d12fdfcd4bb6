//! Branching capacity of finite sets.
//!
//! Three estimators with different trade-offs:
//! - `estimate_equilibrium` / `estimate_bcap`: direct Monte Carlo over past
//!   samples of the invariant tree (definition of `e_A` and its sum).
//! - `estimate_bcap_via_hitting`: normalized far-point hitting probability
//!   (d = 6 only, where `P(hit from x) ~ (sigma^2/2) * BCap(A) * G(x)`).
//! - `energy_minimize` + `capacity_proxy`: reciprocal of the minimal
//!   G-energy over probability measures on the set, which brackets the
//!   capacity up to absolute constants.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Error;
use crate::green::GreenEval;
use crate::gwtree::{TreeSampler, TruncationPolicy};
use crate::lattice::{LatticePoint, SiteSet};
use crate::rng::stream;
use crate::stats::{pairwise_sum, McEstimate};
use crate::Result;

// Stream tags keep per-estimator RNG families disjoint for a shared seed.
const TAG_EQ: u64 = 0x01;
const TAG_BCAP: u64 = 0x02;
const TAG_HIT: u64 = 0x03;

#[derive(Clone, Debug)]
pub struct EquilibriumProfile {
    pub set: SiteSet,
    pub e_values: Vec<(LatticePoint, McEstimate)>,
    pub bcap: McEstimate,
}

#[derive(Clone, Debug)]
pub struct EnergyResult {
    /// Support of the optimal measure, with weights (zeros dropped).
    pub measure: Vec<(LatticePoint, f64)>,
    pub energy: f64,
    pub fw_gap: f64,
    pub iterations: usize,
}

/// Deterministic point order for a site set (hash iteration order is not).
pub fn sorted_sites(a: &SiteSet) -> Vec<LatticePoint> {
    let d = a.d();
    let mut pts: Vec<LatticePoint> = a.iter().collect();
    pts.sort_by(|p, q| p.coords(d).cmp(q.coords(d)));
    pts
}

/// Relative truncation bias of a past sample confined to the policy radius.
fn truncation_bias(a: &SiteSet, policy: &TruncationPolicy, d: usize) -> f64 {
    (a.diameter().max(1.0) / policy.spine_exit_radius).powi(d as i32 - 4)
}

fn eq_indicator_samples(
    sampler: &TreeSampler,
    a: &SiteSet,
    x: &LatticePoint,
    policy: &TruncationPolicy,
    samples: u64,
    seed: u64,
    path_prefix: &[u64],
) -> Vec<f64> {
    let run = |t: u64| -> f64 {
        let mut path = path_prefix.to_vec();
        path.push(t);
        let mut rng = stream(seed, &path);
        let (hit, _) = sampler.past_hits(*x, a, policy, &mut rng);
        if hit {
            0.0
        } else {
            1.0
        }
    };
    if path_prefix.len() > 1 {
        // Called per point from estimate_bcap, which parallelizes outside.
        (0..samples).map(run).collect()
    } else {
        (0..samples).into_par_iter().map(run).collect()
    }
}

/// Estimate `e_A(x)`: the probability that a past sample rooted at `x`
/// avoids `A`, times the indicator `x in A`.
pub fn estimate_equilibrium(
    sampler: &TreeSampler,
    a: &SiteSet,
    x: &LatticePoint,
    policy: &TruncationPolicy,
    samples: u64,
    seed: u64,
) -> Result<McEstimate> {
    if samples == 0 {
        return Err(Error::Config("samples must be >= 1".into()));
    }
    let d = sampler.d;
    let meta = format!(
        "estimator=equilibrium d={d} samples={samples} seed={seed} radius={} node_cap={}",
        policy.spine_exit_radius, policy.subtree_node_cap
    );
    if !a.contains(x) {
        return Ok(McEstimate::exact(0.0, meta));
    }
    let values = eq_indicator_samples(sampler, a, x, policy, samples, seed, &[TAG_EQ]);
    Ok(McEstimate::from_samples(
        &values,
        truncation_bias(a, policy, d),
        meta,
    ))
}

/// Per-point equilibrium estimates and their sum `BCap(A)`.
pub fn estimate_bcap(
    sampler: &TreeSampler,
    a: &SiteSet,
    policy: &TruncationPolicy,
    per_point_samples: u64,
    seed: u64,
) -> Result<EquilibriumProfile> {
    let d = sampler.d;
    let meta = format!(
        "estimator=bcap d={d} per_point_samples={per_point_samples} seed={seed} radius={} node_cap={}",
        policy.spine_exit_radius, policy.subtree_node_cap
    );
    if a.is_empty() {
        return Ok(EquilibriumProfile {
            set: a.clone(),
            e_values: Vec::new(),
            bcap: McEstimate::exact(0.0, meta),
        });
    }
    if per_point_samples == 0 {
        return Err(Error::Config("per_point_samples must be >= 1".into()));
    }
    let bias = truncation_bias(a, policy, d);
    let pts = sorted_sites(a);
    let e_values: Vec<(LatticePoint, McEstimate)> = pts
        .par_iter()
        .enumerate()
        .map(|(idx, x)| {
            let values = eq_indicator_samples(
                sampler,
                a,
                x,
                policy,
                per_point_samples,
                seed,
                &[TAG_BCAP, idx as u64],
            );
            let est = McEstimate::from_samples(&values, bias, format!("point_index={idx}"));
            (*x, est)
        })
        .collect();
    let means: Vec<f64> = e_values.iter().map(|(_, e)| e.mean).collect();
    let var_sum: f64 = pairwise_sum(
        &e_values
            .iter()
            .map(|(_, e)| e.stderr * e.stderr)
            .collect::<Vec<_>>(),
    );
    let bcap = McEstimate {
        mean: pairwise_sum(&means),
        stderr: var_sum.sqrt(),
        samples: per_point_samples,
        bias_bound: bias,
        meta,
    };
    Ok(EquilibriumProfile {
        set: a.clone(),
        e_values,
        bcap,
    })
}

/// Estimate `BCap(A)` from the hitting probability of `A` by the past of a
/// tree rooted far away: `P(hit) / ((sigma^2/2) * G(x_far))`. Valid in
/// d = 6; the normalization error is of order `diam(A)^3 / |x|^{2/3}` and
/// is surfaced in `bias_bound`.
///
/// The policy must be generous: hits arrive through past subtrees hanging
/// off spine vertices up to several `|x_far|` away, and a subtree's
/// spatial reach is ~`subtree_node_cap^(1/4)`. A cap much below
/// `(2 |x_far|)^4` loses a material share of the hitting mass.
pub fn estimate_bcap_via_hitting(
    sampler: &TreeSampler,
    a: &SiteSet,
    x_far: &LatticePoint,
    policy: &TruncationPolicy,
    samples: u64,
    green: &GreenEval,
    seed: u64,
) -> Result<McEstimate> {
    let d = sampler.d;
    if d != 6 || green.d != 6 {
        return Err(Error::Config(format!(
            "hitting-probability estimator requires d = 6, got {d}"
        )));
    }
    let meta_base = format!(
        "estimator=bcap_hit d=6 samples={samples} seed={seed} x_far={:?} radius={}",
        x_far.coords(6),
        policy.spine_exit_radius
    );
    if a.is_empty() {
        return Ok(McEstimate::exact(0.0, meta_base));
    }
    if samples == 0 {
        return Err(Error::Config("samples must be >= 1".into()));
    }
    let norm = x_far.norm();
    let diam = a.diameter();
    if norm < diam.powf(1.5) || a.contains(x_far) {
        return Err(Error::Domain(format!(
            "x_far norm {norm:.2} below diam^(3/2) = {:.2}",
            diam.powf(1.5)
        )));
    }
    let denom = 0.5 * sampler.law().variance * green.big_g(x_far);
    let values: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(seed, &[TAG_HIT, t]);
            let (hit, _) = sampler.past_hits(*x_far, a, policy, &mut rng);
            if hit {
                1.0 / denom
            } else {
                0.0
            }
        })
        .collect();
    let hits = values.iter().filter(|v| **v > 0.0).count();
    let bias = truncation_bias(a, policy, d) + diam.max(1.0).powi(3) / norm.powf(2.0 / 3.0);
    let meta = format!("{meta_base} hits={hits} non_informative={}", hits == 0);
    Ok(McEstimate::from_samples(&values, bias, meta))
}

/// Minimize the quadratic G-energy `nu^T G nu` over probability measures on
/// `A` with Frank-Wolfe (exact line search; the duality gap certifies the
/// stopping point). Returns the best iterate if `max_iters` runs out.
pub fn energy_minimize(
    a: &SiteSet,
    green: &GreenEval,
    tol: f64,
    max_iters: usize,
) -> Result<EnergyResult> {
    if a.is_empty() {
        return Err(Error::Config("energy minimization needs a nonempty set".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance {tol} must be positive")));
    }
    let pts = sorted_sites(a);
    let n = pts.len();
    let g00 = green.big_g(&LatticePoint::origin());
    // Start at a vertex of the simplex so the initial gradient is a single
    // kernel column, not an O(n^2) sum.
    let mut nu = vec![0.0f64; n];
    nu[0] = 1.0;
    let mut grad: Vec<f64> = pts.iter().map(|p| 2.0 * green.big_g(&p.sub(&pts[0]))).collect();
    let mut iterations = 0usize;
    let mut energy;
    let mut gap;
    loop {
        let products: Vec<f64> = nu.iter().zip(&grad).map(|(v, g)| v * g).collect();
        energy = 0.5 * pairwise_sum(&products);
        let mut j = 0usize;
        for (i, g) in grad.iter().enumerate() {
            if *g < grad[j] {
                j = i;
            }
        }
        gap = 2.0 * energy - grad[j];
        if gap <= tol * energy || iterations >= max_iters {
            break;
        }
        let s_j = 0.5 * grad[j];
        let denom = energy - 2.0 * s_j + g00;
        let gamma = if denom > 0.0 {
            ((energy - s_j) / denom).clamp(0.0, 1.0)
        } else {
            1.0
        };
        if gamma == 0.0 {
            break;
        }
        for v in nu.iter_mut() {
            *v *= 1.0 - gamma;
        }
        nu[j] += gamma;
        let pj = pts[j];
        for (i, g) in grad.iter_mut().enumerate() {
            *g = (1.0 - gamma) * *g + 2.0 * gamma * green.big_g(&pts[i].sub(&pj));
        }
        iterations += 1;
    }
    let total = pairwise_sum(&nu);
    if (total - 1.0).abs() > 1e-12 {
        for v in nu.iter_mut() {
            *v /= total;
        }
    }
    let measure: Vec<(LatticePoint, f64)> = pts
        .iter()
        .zip(&nu)
        .filter(|(_, w)| **w > 0.0)
        .map(|(p, w)| (*p, *w))
        .collect();
    Ok(EnergyResult {
        measure,
        energy,
        fw_gap: gap.max(0.0),
        iterations,
    })
}

/// `1 / energy`: comparable to `BCap` up to absolute two-sided constants.
pub fn capacity_proxy(result: &EnergyResult) -> f64 {
    1.0 / result.energy
}

/// One JSON-lines record per (set, estimator) pair, for file output.
#[derive(Clone, Debug, Serialize)]
pub struct CapacityRecord {
    pub set: String,
    pub estimator: String,
    pub mean: f64,
    pub stderr: f64,
    pub bias_bound: f64,
    pub samples: u64,
    pub seed: u64,
}

impl CapacityRecord {
    pub fn new(set: impl Into<String>, estimator: impl Into<String>, est: &McEstimate, seed: u64) -> Self {
        CapacityRecord {
            set: set.into(),
            estimator: estimator.into(),
            mean: est.mean,
            stderr: est.stderr,
            bias_bound: est.bias_bound,
            samples: est.samples,
            seed,
        }
    }

    pub fn to_jsonl(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}
