//! Exact-identity verification harness.
//!
//! The two identities `E[1_A e_n (L_n + o_n)] = 1` and
//! `E[1_A e_n (U_n - Z_n + o_n)] = 1`, with `o_n` the number of walk
//! indices sitting at the origin (where the tree's root, a future vertex,
//! always contributes one visit),
//! are the only exact, non-asymptotic equalities available, so they serve
//! as the end-to-end correctness oracle for the whole sampler stack: a
//! two-sided geometrically-killed walk, an invariant tree at the origin,
//! and every statistic computed from the one joint realization.

use rayon::prelude::*;

use crate::error::Error;
use crate::green::GreenEval;
use crate::gwtree::{TreeSampler, TruncationPolicy};
use crate::lattice::{sample_two_sided, LatticePoint, SiteCounts, TwoSidedWalk};
use crate::offspring::{size_biased, spine_split};
use crate::pathsum::PathSummer;
use crate::rng::stream;
use crate::stats::{least_squares, McEstimate};
use crate::Result;
use rand::Rng;

const TAG_IDENTITY: u64 = 0x11;
const TAG_STATS: u64 = 0x12;
const TAG_ESCAPE: u64 = 0x13;

/// Switch from the direct double loop to the hierarchical summer above
/// this many (walk site, spine vertex) pairs.
const SUMMER_PAIR_CUTOFF: u64 = 3_000_000;

#[derive(Clone, Debug, Default)]
pub struct TrialFlags {
    /// Compute the avoidance indicator `1_A` (past pass).
    pub indicator: bool,
    /// Compute `L_n` (future pass; skipped when `1_A e_n = 0`).
    pub l_stat: bool,
    /// Compute `U_n` and `Z_n` from the spine skeleton.
    pub u_stat: bool,
    /// Compute `G_n` and `g_n` over the walk.
    pub green_sums: bool,
}

#[derive(Clone, Debug)]
pub struct LawlerTrial {
    pub n: u64,
    /// `1{past of the tree at 0 avoids R[-xi_l, xi_r]}`.
    pub indicator_a: bool,
    /// `1{0 not in R[1, xi_r]}`.
    pub e_n: bool,
    /// Future-forest visits to the walk, counted per time index. Exact up
    /// to the node budget; capped subtrees are completed with the expected
    /// visits from each unexplored branch root (a Green-sum), so the value
    /// is conditionally unbiased for the infinite forest over the sampled
    /// spine.
    pub l_n: f64,
    /// `sum_j sum_i d_i g(X_j - spine_i)`.
    pub u_n: f64,
    /// Coincidence count `sum_j sum_i d_i 1{X_j = spine_i}`.
    pub z_n: u64,
    /// Exact conditional expectation of the contribution of the spine
    /// beyond the sampled exit vertex, identical for `L_n` and
    /// `U_n - Z_n`: `(sigma^2/2) * sum_j (G - 2g + delta)(exit - X_j)`.
    pub tail: f64,
    /// Number of walk indices `j` in `[-xi_l, xi_r]` with `X_j = 0`,
    /// always at least 1 (the index `j = 0`). The tree's root sits at
    /// the origin and belongs to the future, so the last-passage
    /// decomposition behind the identities counts one visit per such
    /// index in addition to the proper future forest; both identity
    /// statistics need this term to have mean exactly 1.
    pub origin_visits: u64,
    /// `sum_j G(X_j)`.
    pub g_n: f64,
    /// `sum_j g(X_j)`.
    pub small_g_n: f64,
    pub truncated: bool,
    /// Relative truncation order `r^{-(d-4)}` for the realized radius.
    pub bias_note: f64,
}

/// Distinct walk sites with multiplicities, plus a far-field summer for
/// long walks.
enum WalkSum<'a> {
    Direct(Vec<(LatticePoint, u64)>),
    Summer(PathSummer<'a>),
}

impl WalkSum<'_> {
    fn g_sum(&self, green: &GreenEval, x: &LatticePoint) -> f64 {
        match self {
            WalkSum::Direct(sites) => sites
                .iter()
                .map(|(p, m)| *m as f64 * green.g(&p.sub(x)))
                .sum(),
            WalkSum::Summer(s) => s.sum_g(x),
        }
    }
}

fn effective_policy(
    caps: &TruncationPolicy,
    radius_factor: f64,
    walk: &TwoSidedWalk,
) -> Result<TruncationPolicy> {
    let radius = (radius_factor * walk.max_norm()).max(8.0);
    TruncationPolicy::new(radius, caps.subtree_node_cap, caps.spine_step_cap)
}

/// One joint realization and all requested statistics.
pub fn run_trial<R: Rng + ?Sized>(
    sampler: &TreeSampler,
    n: u64,
    caps: &TruncationPolicy,
    radius_factor: f64,
    green: &GreenEval,
    flags: &TrialFlags,
    rng: &mut R,
) -> Result<LawlerTrial> {
    let d = sampler.d;
    if (flags.u_stat || flags.green_sums || flags.l_stat) && green.d != d {
        return Err(Error::Config(format!(
            "green evaluator dimension {} does not match sampler dimension {d}",
            green.d
        )));
    }
    if !(radius_factor > 0.0) {
        return Err(Error::Config(format!(
            "radius factor {radius_factor} must be positive"
        )));
    }
    let walk = sample_two_sided(d, n, rng)?;
    let policy = effective_policy(caps, radius_factor, &walk)?;
    let right = walk.right_len as i64;
    let left = walk.left_len as i64;

    let e_n = (1..=right).all(|j| !walk.position(j).is_origin());
    let origin_visits = (-left..=right)
        .filter(|&j| walk.position(j).is_origin())
        .count() as u64;

    let mut g_n = 0.0;
    let mut small_g_n = 0.0;
    if flags.green_sums {
        for p in walk.positions() {
            g_n += green.big_g(p);
            small_g_n += green.g(p);
        }
    }

    let mut counts = SiteCounts::new(d);
    if flags.u_stat || flags.l_stat {
        for p in walk.positions() {
            counts.add(p, 1);
        }
    }

    let mut truncated = false;
    let mut u_n = 0.0;
    let mut z_n = 0u64;
    let mut indicator_a = true;
    let mut l_n = 0.0;
    let mut tail = 0.0;

    if flags.u_stat || flags.indicator || flags.l_stat {
        let skel = sampler.spine_skeleton(LatticePoint::origin(), &policy, rng);
        truncated |= skel.truncated;

        if flags.u_stat || flags.l_stat {
            // Spine vertices beyond the sampled exit are an independent
            // walk with i.i.d. offspring of mean sigma^2/2, so their
            // expected contribution is available in closed form.
            let half_var = 0.5 * sampler.law().variance;
            let exit = *skel.positions.last().expect("skeleton is nonempty");
            for (p, m) in counts.iter() {
                let z = p.sub(&exit);
                let mut term = green.big_g(&z) - 2.0 * green.g(&z);
                if p == exit {
                    term += 1.0;
                }
                tail += m as f64 * term;
            }
            tail *= half_var;
        }

        if flags.u_stat {
            let spine_terms = skel.d_counts.iter().filter(|c| **c > 0).count() as u64;
            let walk_sum = if counts.len() as u64 * spine_terms > SUMMER_PAIR_CUTOFF {
                WalkSum::Summer(PathSummer::new(green, walk.positions(), 0.2)?)
            } else {
                WalkSum::Direct(counts.iter().collect())
            };
            for (i, &di) in skel.d_counts.iter().enumerate() {
                if di == 0 {
                    continue;
                }
                let x = &skel.positions[i];
                u_n += di as f64 * walk_sum.g_sum(green, x);
                z_n += di as u64 * counts.get(x);
            }
        }

        if flags.indicator || flags.l_stat {
            let window = walk.range_window(-left, right)?;
            let run = sampler.past_from_skeleton(&skel, policy.subtree_node_cap, rng, &mut |p| {
                !window.contains(p)
            });
            truncated |= run.truncated;
            indicator_a = !run.aborted;

            if flags.l_stat && indicator_a && e_n {
                let mut visits = 0u64;
                let mut completion = 0.0f64;
                let run = sampler.future_from_skeleton_completed(
                    &skel,
                    policy.subtree_node_cap,
                    rng,
                    &mut |p| {
                        visits += counts.get(p);
                        true
                    },
                    // A frontier position heads an untouched critical
                    // tree, whose expected visits to y are exactly g(.-y).
                    &mut |p| {
                        for (site, m) in counts.iter() {
                            completion += m as f64 * green.g(&site.sub(p));
                        }
                    },
                );
                l_n = visits as f64 + completion;
                truncated |= run.truncated;
            }
        }
    }

    Ok(LawlerTrial {
        n,
        indicator_a,
        e_n,
        l_n,
        u_n,
        z_n,
        tail,
        origin_visits,
        g_n,
        small_g_n,
        truncated,
        bias_note: policy.bias_note(d),
    })
}

#[derive(Clone, Debug)]
pub struct IdentityPair {
    pub l_form: McEstimate,
    pub u_form: McEstimate,
}

/// Spine-radius fractions of the truncation ladder. The avoidance
/// indicator is evaluated at each fraction of the full exit radius from
/// one sampled realization; the residual beyond-exit bias decays like
/// `r^{4-d}`, which the ladder fit extrapolates away.
const RADIUS_LADDER: [f64; 5] = [0.375, 0.5, 0.625, 0.75, 1.0];
/// Node-cap divisors of the truncation ladder. The node-cap bias has no
/// single clean power law at realistic cap sizes: the tail-mass argument
/// gives `cap^{-1/2}`, the spatial reach of a capped subtree gives
/// `cap^{-1/4}`, and measurements sit between the two. The estimator fits
/// both models and averages them, with the spread entering the bias
/// bound.
const CAP_LADDER_DIV: [u64; 3] = [64, 16, 4];
/// Cell count of the L-shaped ladder design: the radius levels at full
/// cap, plus the reduced caps at full radius. The full policy is the
/// corner cell.
const LADDER_CELLS: usize = RADIUS_LADDER.len() + CAP_LADDER_DIV.len();
const LADDER_CORNER: usize = RADIUS_LADDER.len() - 1;
const LADDER_PARAMS: usize = 3;

/// Regression matrix of one ladder model: statistic mean per cell is
/// modeled as `m_inf + b (r/r_full)^{4-d} + a (cap_full/cap)^alpha`, all
/// regressors normalized to 1 at the corner cell.
fn ladder_design(d: usize, alpha: f64) -> [[f64; LADDER_PARAMS]; LADDER_CELLS] {
    let mut x = [[0.0; LADDER_PARAMS]; LADDER_CELLS];
    for (i, f) in RADIUS_LADDER.iter().enumerate() {
        x[i] = [1.0, f.powi(-(d as i32 - 4)), 1.0];
    }
    for (j, div) in CAP_LADDER_DIV.iter().enumerate() {
        x[RADIUS_LADDER.len() + j] = [1.0, 1.0, (*div as f64).powf(alpha)];
    }
    x
}

fn gauss_solve<const P: usize>(m: &mut [[f64; P]; P], b: &mut [f64; P]) {
    for col in 0..P {
        let piv = (col..P)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        b.swap(col, piv);
        let p = m[col][col];
        assert!(p.abs() > 1e-12, "singular ladder design");
        for k in col..P {
            m[col][k] /= p;
        }
        b[col] /= p;
        for row in 0..P {
            if row != col {
                let f = m[row][col];
                for k in col..P {
                    m[row][k] -= f * m[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
}

/// Least-squares fit of the ladder model over the given cells; returns
/// the coefficient vector (m_inf first).
fn ladder_fit(x: &[[f64; LADDER_PARAMS]], y: &[f64]) -> [f64; LADDER_PARAMS] {
    let mut xtx = [[0.0f64; LADDER_PARAMS]; LADDER_PARAMS];
    let mut xty = [0.0f64; LADDER_PARAMS];
    for (row, &yv) in x.iter().zip(y.iter()) {
        for p in 0..LADDER_PARAMS {
            for q in 0..LADDER_PARAMS {
                xtx[p][q] += row[p] * row[q];
            }
            xty[p] += row[p] * yv;
        }
    }
    gauss_solve(&mut xtx, &mut xty);
    xty
}

/// Per-cell weights such that `m_inf_hat = sum_cell w_cell * mean_cell`;
/// the truncation-extrapolated statistic is then the same weighted
/// combination applied per trial, so its stderr includes the fit noise.
fn ladder_weights(x: &[[f64; LADDER_PARAMS]; LADDER_CELLS]) -> [f64; LADDER_CELLS] {
    let mut xtx = [[0.0f64; LADDER_PARAMS]; LADDER_PARAMS];
    for row in x.iter() {
        for p in 0..LADDER_PARAMS {
            for q in 0..LADDER_PARAMS {
                xtx[p][q] += row[p] * row[q];
            }
        }
    }
    let mut e1 = [0.0f64; LADDER_PARAMS];
    e1[0] = 1.0;
    gauss_solve(&mut xtx, &mut e1);
    let mut w = [0.0; LADDER_CELLS];
    for (wi, row) in w.iter_mut().zip(x.iter()) {
        *wi = row.iter().zip(e1.iter()).map(|(a, b)| a * b).sum();
    }
    w
}

/// One ladder trial: the U-form identity statistic at every ladder cell,
/// plus the sampled L-form statistic at the corner cell.
struct LadderTrial {
    u_cells: [f64; LADDER_CELLS],
    l_corner: f64,
}

fn identity_trial<R: Rng + ?Sized>(
    sampler: &TreeSampler,
    n: u64,
    caps: &TruncationPolicy,
    radius_factor: f64,
    green: &GreenEval,
    rng: &mut R,
) -> Result<LadderTrial> {
    let d = sampler.d;
    let walk = sample_two_sided(d, n, rng)?;
    let policy = effective_policy(caps, radius_factor, &walk)?;
    let cap = policy.subtree_node_cap;
    let right = walk.right_len as i64;
    let left = walk.left_len as i64;

    let e_n = (1..=right).all(|j| !walk.position(j).is_origin());
    let o_n = (-left..=right)
        .filter(|&j| walk.position(j).is_origin())
        .count() as f64;

    let mut counts = SiteCounts::new(d);
    for p in walk.positions() {
        counts.add(p, 1);
    }
    let window = walk.range_window(-left, right)?;

    let origin = LatticePoint::origin();
    let skel = sampler.spine_skeleton(origin, &policy, rng);

    // Exit index of each radius level: the first spine vertex at distance
    // >= that level's radius (the level's own exit vertex). A step-capped
    // spine falls back to its last vertex.
    let last = skel.positions.len() - 1;
    let mut k = [last; RADIUS_LADDER.len()];
    let mut level = 0usize;
    for (idx, p) in skel.positions.iter().enumerate() {
        while level < RADIUS_LADDER.len()
            && p.dist(&origin) >= RADIUS_LADDER[level] * policy.spine_exit_radius
        {
            k[level] = idx;
            level += 1;
        }
        if level == RADIUS_LADDER.len() {
            break;
        }
    }

    // Prefix pair sums: the level statistic uses offspring draws of the
    // vertices strictly before that level's exit.
    let walk_sum = {
        let spine_terms = skel.d_counts.iter().filter(|c| **c > 0).count() as u64;
        if counts.len() as u64 * spine_terms > SUMMER_PAIR_CUTOFF {
            WalkSum::Summer(PathSummer::new(green, walk.positions(), 0.2)?)
        } else {
            WalkSum::Direct(counts.iter().collect())
        }
    };
    let mut u_pre = [0.0; RADIUS_LADDER.len()];
    let mut z_pre = [0.0; RADIUS_LADDER.len()];
    let mut u_acc = 0.0;
    let mut z_acc = 0u64;
    let mut next = 0usize;
    for (i, &di) in skel.d_counts.iter().enumerate() {
        while next < RADIUS_LADDER.len() && k[next] == i {
            u_pre[next] = u_acc;
            z_pre[next] = z_acc as f64;
            next += 1;
        }
        if di == 0 {
            continue;
        }
        let x = &skel.positions[i];
        u_acc += di as f64 * walk_sum.g_sum(green, x);
        z_acc += di as u64 * counts.get(x);
    }
    while next < RADIUS_LADDER.len() {
        u_pre[next] = u_acc;
        z_pre[next] = z_acc as f64;
        next += 1;
    }

    // Exact closed-form completion of the spine beyond each level's exit,
    // identical for both statistic forms.
    let half_var = 0.5 * sampler.law().variance;
    let mut tail = [0.0; RADIUS_LADDER.len()];
    for (i, t) in tail.iter_mut().enumerate() {
        let exit = skel.positions[k[i]];
        let mut acc = 0.0;
        for (p, m) in counts.iter() {
            let z = p.sub(&exit);
            let mut term = green.big_g(&z) - 2.0 * green.g(&z);
            if p == exit {
                term += 1.0;
            }
            acc += m as f64 * term;
        }
        *t = half_var * acc;
    }

    let (events, _truncated) =
        sampler.past_hit_events(&skel, cap, rng, &mut |p| window.contains(p));
    let avoids = |k_level: usize, cap_level: u64| -> bool {
        !events.iter().any(|ev| {
            if ev.nodes_before_hit == 0 {
                ev.spine_index <= k_level
            } else {
                ev.spine_index < k_level && ev.nodes_before_hit <= cap_level
            }
        })
    };

    let e = if e_n { 1.0 } else { 0.0 };
    let mut u_cells = [0.0; LADDER_CELLS];
    for i in 0..RADIUS_LADDER.len() {
        let act = if avoids(k[i], cap) { 1.0 } else { 0.0 };
        u_cells[i] = act * e * (u_pre[i] - z_pre[i] + o_n + tail[i]);
    }
    let corner_stat = u_pre[LADDER_CORNER] - z_pre[LADDER_CORNER] + o_n + tail[LADDER_CORNER];
    for (j, div) in CAP_LADDER_DIV.iter().enumerate() {
        let act = if avoids(k[LADDER_CORNER], cap / div) {
            1.0
        } else {
            0.0
        };
        u_cells[RADIUS_LADDER.len() + j] = act * e * corner_stat;
    }

    // Sampled L form, needed only at the corner cell; capped future
    // subtrees are completed with the exact expected visits from each
    // unexplored branch root.
    let mut l_corner = 0.0;
    if e_n && avoids(k[LADDER_CORNER], cap) {
        let mut visits = 0u64;
        let mut completion = 0.0f64;
        sampler.future_from_skeleton_completed(
            &skel,
            cap,
            rng,
            &mut |p| {
                visits += counts.get(p);
                true
            },
            &mut |p| {
                for (site, m) in counts.iter() {
                    completion += m as f64 * green.g(&site.sub(p));
                }
            },
        );
        l_corner = visits as f64 + completion + o_n + tail[LADDER_CORNER];
    }
    Ok(LadderTrial { u_cells, l_corner })
}

/// Both identity statistics from one shared pass: each trial realization
/// feeds the L form and the U form, so the variance comparison is on
/// matched streams by construction.
///
/// Truncation is handled by a ladder extrapolation: the avoidance
/// indicator and pair sums are evaluated at nested spine radii and
/// per-subtree node caps from the single sampled realization, the known
/// truncation laws (`r^{4-d}` and `cap^{-1/2}`) are fitted across the
/// cells, and the reported estimate is the extrapolated
/// infinite-truncation value. The bias bound is empirical: twice the
/// worst fit residual plus the shift of the extrapolation when the
/// smallest ladder cells are dropped.
pub fn check_identity_pair(
    sampler: &TreeSampler,
    n: u64,
    caps: &TruncationPolicy,
    radius_factor: f64,
    green: &GreenEval,
    samples: u64,
    seed: u64,
) -> Result<IdentityPair> {
    if samples == 0 {
        return Err(Error::Config("samples must be >= 1".into()));
    }
    let design_a = ladder_design(sampler.d, 0.25);
    let design_b = ladder_design(sampler.d, 0.5);
    let w_a = ladder_weights(&design_a);
    let w_b = ladder_weights(&design_b);
    let mut weights = [0.0; LADDER_CELLS];
    for (w, (a, b)) in weights.iter_mut().zip(w_a.iter().zip(w_b.iter())) {
        *w = 0.5 * (a + b);
    }
    let trials: Vec<LadderTrial> = (0..samples)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(seed, &[TAG_IDENTITY, t]);
            identity_trial(sampler, n, caps, radius_factor, green, &mut rng)
                .expect("trial parameters were validated")
        })
        .collect();

    // The extrapolated statistic is a fixed linear combination of the
    // ladder cells, so applying it per trial makes the reported stderr
    // include the extrapolation noise. The L form shares the U form's
    // correction: conditionally on the skeleton and walk, the sampled
    // future count has the U-form statistic as its exact mean, so the
    // indicator truncation error of both forms is identical.
    let mut u_vals = Vec::with_capacity(trials.len());
    let mut l_vals = Vec::with_capacity(trials.len());
    let mut cell_sums = [0.0f64; LADDER_CELLS];
    for trial in &trials {
        let u_inf: f64 = trial
            .u_cells
            .iter()
            .zip(weights.iter())
            .map(|(s, w)| s * w)
            .sum();
        let gap = trial.u_cells[LADDER_CORNER] - u_inf;
        u_vals.push(u_inf);
        l_vals.push(trial.l_corner - gap);
        for (acc, s) in cell_sums.iter_mut().zip(trial.u_cells.iter()) {
            *acc += s;
        }
    }
    let means: Vec<f64> = cell_sums.iter().map(|s| s / samples as f64).collect();
    if std::env::var_os("BCAP_LADDER_DEBUG").is_some() {
        eprintln!("ladder cell means: {means:?}");
    }
    let predict = |row: &[f64; LADDER_PARAMS], b: &[f64; LADDER_PARAMS]| -> f64 {
        row.iter().zip(b.iter()).map(|(r, c)| r * c).sum()
    };
    let beta_a = ladder_fit(&design_a, &means);
    let beta_b = ladder_fit(&design_b, &means);
    let max_resid = design_a
        .iter()
        .zip(means.iter())
        .map(|(row, y)| (y - predict(row, &beta_a)).abs())
        .chain(
            design_b
                .iter()
                .zip(means.iter())
                .map(|(row, y)| (y - predict(row, &beta_b)).abs()),
        )
        .fold(0.0f64, f64::max);
    // The two cap models bracket the measured decay; half their spread
    // plus the worst in-sample misfit of either is the honest systematic
    // uncertainty of the extrapolation.
    let bias = 0.5 * (beta_a[0] - beta_b[0]).abs() + 2.0 * max_resid;
    if std::env::var_os("BCAP_LADDER_DEBUG").is_some() {
        eprintln!(
            "ladder fits: m_inf_a={:.4} m_inf_b={:.4} max_resid={:.4}",
            beta_a[0], beta_b[0], max_resid
        );
    }

    let meta = |form: &str| {
        format!(
            "statistic=identity_{form} d={} n={n} samples={samples} seed={seed} radius_factor={radius_factor}",
            sampler.d
        )
    };
    Ok(IdentityPair {
        l_form: McEstimate::from_samples(&l_vals, bias, meta("l")),
        u_form: McEstimate::from_samples(&u_vals, bias, meta("u")),
    })
}

pub fn check_identity_l(
    sampler: &TreeSampler,
    n: u64,
    caps: &TruncationPolicy,
    radius_factor: f64,
    green: &GreenEval,
    samples: u64,
    seed: u64,
) -> Result<McEstimate> {
    Ok(check_identity_pair(sampler, n, caps, radius_factor, green, samples, seed)?.l_form)
}

pub fn check_identity_u(
    sampler: &TreeSampler,
    n: u64,
    caps: &TruncationPolicy,
    radius_factor: f64,
    green: &GreenEval,
    samples: u64,
    seed: u64,
) -> Result<McEstimate> {
    Ok(check_identity_pair(sampler, n, caps, radius_factor, green, samples, seed)?.u_form)
}

pub fn identity_gate(est: &McEstimate) -> bool {
    (est.mean - 1.0).abs() <= 3.0 * est.stderr + est.bias_bound
}

#[derive(Clone, Debug)]
pub struct IdentityReport {
    pub pair: IdentityPair,
    pub pass_l: bool,
    pub pass_u: bool,
    /// True when the first run failed a gate and the whole check was redone
    /// once at doubled truncation radius.
    pub retried: bool,
}

/// Gated identity check; a failure is retried once at doubled radius so
/// truncation bias is distinguished from a genuine miss.
pub fn verify_identities(
    sampler: &TreeSampler,
    n: u64,
    caps: &TruncationPolicy,
    radius_factor: f64,
    green: &GreenEval,
    samples: u64,
    seed: u64,
) -> Result<IdentityReport> {
    let pair = check_identity_pair(sampler, n, caps, radius_factor, green, samples, seed)?;
    let report = IdentityReport {
        pass_l: identity_gate(&pair.l_form),
        pass_u: identity_gate(&pair.u_form),
        pair,
        retried: false,
    };
    if report.pass_l && report.pass_u {
        return Ok(report);
    }
    let pair = check_identity_pair(
        sampler,
        n,
        caps,
        2.0 * radius_factor,
        green,
        samples,
        seed,
    )?;
    Ok(IdentityReport {
        pass_l: identity_gate(&pair.l_form),
        pass_u: identity_gate(&pair.u_form),
        pair,
        retried: true,
    })
}

#[derive(Clone, Debug)]
pub struct UnGnRow {
    pub n: u64,
    pub mean_u: f64,
    pub var_u: f64,
    pub stderr_u: f64,
    pub mean_g: f64,
    pub var_g: f64,
    pub stderr_g: f64,
    pub mean_small_g: f64,
    pub samples: u64,
}

#[derive(Clone, Debug)]
pub struct UnGnStats {
    pub rows: Vec<UnGnRow>,
    /// Least-squares slope of mean U_n against log n.
    pub slope_u: f64,
    /// Least-squares slope of mean G_n against log n.
    pub slope_g: f64,
}

/// Per-trial statistic sampler for `stats_un_gn`: streams the spine
/// instead of materializing a skeleton, since only the running sums are
/// needed and the spine at large `n` is millions of vertices.
fn stats_trial<R: Rng + ?Sized>(
    sampler: &TreeSampler,
    n: u64,
    caps: &TruncationPolicy,
    radius_factor: f64,
    green: &GreenEval,
    rng: &mut R,
) -> Result<(f64, f64, f64)> {
    use crate::lattice::draw_step;
    use crate::offspring::root_offspring;

    let d = sampler.d;
    let walk = sample_two_sided(d, n, rng)?;
    let policy = effective_policy(caps, radius_factor, &walk)?;

    let mut g_n = 0.0;
    let mut small_g_n = 0.0;
    for p in walk.positions() {
        g_n += green.big_g(p);
        small_g_n += green.g(p);
    }

    let mut counts = SiteCounts::new(d);
    for p in walk.positions() {
        counts.add(p, 1);
    }
    let spine_estimate = (policy.spine_exit_radius * policy.spine_exit_radius) as u64;
    let walk_sum = if counts.len() as u64 * spine_estimate / 2 > SUMMER_PAIR_CUTOFF {
        WalkSum::Summer(PathSummer::new(green, walk.positions(), 0.2)?)
    } else {
        WalkSum::Direct(counts.iter().collect())
    };

    let sb = size_biased(sampler.law());
    let start = LatticePoint::origin();
    let mut u_n = 0.0;
    let mut pos = start;
    let mut steps = 0usize;
    let d0 = root_offspring(sampler.law(), rng);
    if d0 > 0 {
        u_n += d0 as f64 * walk_sum.g_sum(green, &pos);
    }
    loop {
        let (axis, sign) = draw_step(d, rng);
        pos = pos.stepped(axis, sign);
        steps += 1;
        if pos.dist(&start) >= policy.spine_exit_radius || steps > policy.spine_step_cap {
            break;
        }
        let split = spine_split(&sb, rng);
        if split.future_count > 0 {
            u_n += split.future_count as f64 * walk_sum.g_sum(green, &pos);
        }
    }
    Ok((u_n, g_n, small_g_n))
}

/// Growth statistics of `U_n`, `G_n`, `g_n` over a list of kill parameters
/// (d = 6 only, where both means grow like `const * log n`).
pub fn stats_un_gn(
    sampler: &TreeSampler,
    n_list: &[u64],
    caps: &TruncationPolicy,
    radius_factor: f64,
    green: &GreenEval,
    samples: u64,
    seed: u64,
) -> Result<UnGnStats> {
    if sampler.d != 6 {
        return Err(Error::Config(format!(
            "U_n/G_n growth statistics are defined for d = 6, got {}",
            sampler.d
        )));
    }
    if n_list.is_empty() || samples == 0 {
        return Err(Error::Config("need at least one n and one sample".into()));
    }
    let mut rows = Vec::with_capacity(n_list.len());
    for (ni, &n) in n_list.iter().enumerate() {
        let trials: Vec<(f64, f64, f64)> = (0..samples)
            .into_par_iter()
            .map(|t| {
                let mut rng = stream(seed, &[TAG_STATS, ni as u64, t]);
                stats_trial(sampler, n, caps, radius_factor, green, &mut rng)
                    .expect("trial parameters were validated")
            })
            .collect();
        let u: Vec<f64> = trials.iter().map(|t| t.0).collect();
        let g: Vec<f64> = trials.iter().map(|t| t.1).collect();
        let sg: Vec<f64> = trials.iter().map(|t| t.2).collect();
        let (mean_u, var_u) = crate::stats::mean_and_var(&u);
        let (mean_g, var_g) = crate::stats::mean_and_var(&g);
        let (mean_small_g, _) = crate::stats::mean_and_var(&sg);
        rows.push(UnGnRow {
            n,
            mean_u,
            var_u,
            stderr_u: (var_u / samples as f64).sqrt(),
            mean_g,
            var_g,
            stderr_g: (var_g / samples as f64).sqrt(),
            mean_small_g,
            samples,
        });
    }
    let log_n: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let mean_u: Vec<f64> = rows.iter().map(|r| r.mean_u).collect();
    let mean_g: Vec<f64> = rows.iter().map(|r| r.mean_g).collect();
    let (_, slope_u) = least_squares(&log_n, &mean_u);
    let (_, slope_g) = least_squares(&log_n, &mean_g);
    Ok(UnGnStats {
        rows,
        slope_u,
        slope_g,
    })
}

/// MC estimates of `P(A_n)` (past avoids the whole two-sided range) and
/// `P(B_n)` (past avoids the forward range `R[0, xi_r]`); `A_n` implies
/// `B_n` on every realization.
pub fn estimate_escape(
    sampler: &TreeSampler,
    n: u64,
    caps: &TruncationPolicy,
    radius_factor: f64,
    samples: u64,
    seed: u64,
) -> Result<(McEstimate, McEstimate)> {
    if sampler.d != 6 {
        return Err(Error::Config(format!(
            "escape probabilities are studied in d = 6, got {}",
            sampler.d
        )));
    }
    if samples == 0 {
        return Err(Error::Config("samples must be >= 1".into()));
    }
    let trials: Vec<(f64, f64, f64)> = (0..samples)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(seed, &[TAG_ESCAPE, t]);
            let walk = sample_two_sided(6, n, &mut rng).expect("valid kill parameter");
            let policy = effective_policy(caps, radius_factor, &walk).expect("valid policy");
            let full = walk
                .range_window(-(walk.left_len as i64), walk.right_len as i64)
                .expect("window in domain");
            let fwd = walk.range_window(0, walk.right_len as i64).expect("window in domain");
            let skel = sampler.spine_skeleton(LatticePoint::origin(), &policy, &mut rng);
            let mut hit_full = false;
            let mut hit_fwd = false;
            sampler.past_from_skeleton(&skel, policy.subtree_node_cap, &mut rng, &mut |p| {
                if full.contains(p) {
                    hit_full = true;
                    if fwd.contains(p) {
                        hit_fwd = true;
                        // Both events decided; stop the pass.
                        return false;
                    }
                }
                true
            });
            (
                if hit_full { 0.0 } else { 1.0 },
                if hit_fwd { 0.0 } else { 1.0 },
                policy.bias_note(6),
            )
        })
        .collect();
    let a_vals: Vec<f64> = trials.iter().map(|t| t.0).collect();
    let b_vals: Vec<f64> = trials.iter().map(|t| t.1).collect();
    let bias = trials.iter().map(|t| t.2).sum::<f64>() / samples as f64;
    let meta = |ev: &str| {
        format!("statistic=escape_{ev} d=6 n={n} samples={samples} seed={seed} radius_factor={radius_factor}")
    };
    Ok((
        McEstimate::from_samples(&a_vals, bias, meta("a")),
        McEstimate::from_samples(&b_vals, bias, meta("b")),
    ))
}

/// One CSV row per statistic: `n,statistic,mean,stderr,samples,bias,seed`.
pub fn write_stat_csv<W: std::io::Write>(
    out: &mut W,
    rows: &[(u64, String, McEstimate)],
    seed: u64,
) -> Result<()> {
    writeln!(out, "n,statistic,mean,stderr,samples,bias,seed")?;
    for (n, name, est) in rows {
        writeln!(
            out,
            "{n},{name},{},{},{},{},{seed}",
            est.mean, est.stderr, est.samples, est.bias_bound
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::green::{return_probabilities, GreenEval};
    use crate::offspring::OffspringLaw;

    fn sampler(d: usize) -> TreeSampler {
        TreeSampler::new(d, OffspringLaw::binary()).unwrap()
    }

    fn caps() -> TruncationPolicy {
        TruncationPolicy::new(8.0, 10_000, 1_000_000).unwrap()
    }

    #[test]
    fn degenerate_n_one() {
        let s = sampler(6);
        let green = GreenEval::for_dim(6).unwrap();
        let flags = TrialFlags {
            indicator: true,
            l_stat: true,
            u_stat: true,
            green_sums: true,
        };
        for t in 0..50 {
            let mut rng = stream(900, &[t]);
            let trial = run_trial(&s, 1, &caps(), 4.0, &green, &flags, &mut rng).unwrap();
            assert!(trial.e_n, "xi = 0 makes e_n trivially 1");
            assert_eq!(trial.small_g_n, green.g0());
        }
    }

    #[test]
    fn u_dominates_z_termwise() {
        let s = sampler(6);
        let green = GreenEval::for_dim(6).unwrap();
        let g0 = green.g0();
        let flags = TrialFlags {
            indicator: false,
            l_stat: false,
            u_stat: true,
            green_sums: false,
        };
        for t in 0..200 {
            let mut rng = stream(901, &[t]);
            let trial = run_trial(&s, 30, &caps(), 4.0, &green, &flags, &mut rng).unwrap();
            assert!(
                trial.u_n >= g0 * trial.z_n as f64 - 1e-9,
                "U {} vs g0*Z {}",
                trial.u_n,
                g0 * trial.z_n as f64
            );
        }
    }

    #[test]
    fn ladder_weights_recover_exact_model() {
        for d in [5usize, 6, 7] {
            for alpha in [0.25, 0.5] {
                let x = ladder_design(d, alpha);
                let w = ladder_weights(&x);
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                // On data generated exactly by the cell model, the weighted
                // combination must return the truncation-free intercept.
                let beta = [0.9, 0.3, -0.2];
                let m_inf: f64 = x
                    .iter()
                    .zip(w.iter())
                    .map(|(row, wi)| {
                        wi * (row[0] * beta[0] + row[1] * beta[1] + row[2] * beta[2])
                    })
                    .sum();
                assert!((m_inf - beta[0]).abs() < 1e-9, "d={d} alpha={alpha}");
                let fit = ladder_fit(
                    &x,
                    &x.iter()
                        .map(|row| row[0] * beta[0] + row[1] * beta[1] + row[2] * beta[2])
                        .collect::<Vec<_>>(),
                );
                for (a, b) in fit.iter().zip(beta.iter()) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn identity_l_and_u_d6() {
        let s = sampler(6);
        let green = GreenEval::for_dim(6).unwrap();
        let pair = check_identity_pair(&s, 50, &caps(), 4.0, &green, 12_000, 902).unwrap();
        for est in [&pair.l_form, &pair.u_form] {
            assert!(
                identity_gate(est),
                "mean {} stderr {} bias {}",
                est.mean,
                est.stderr,
                est.bias_bound
            );
        }
        // Rao-Blackwellized U form must not be noisier on matched streams.
        let var_l = pair.l_form.stderr.powi(2);
        let var_u = pair.u_form.stderr.powi(2);
        assert!(var_u <= 1.05 * var_l, "var U {var_u} vs var L {var_l}");
    }

    #[test]
    fn identity_d5_and_d7() {
        for (d, n) in [(5usize, 20u64), (7, 50)] {
            let s = sampler(d);
            let green = GreenEval::for_dim(d).unwrap();
            let rep = verify_identities(&s, n, &caps(), 4.0, &green, 8_000, 903).unwrap();
            assert!(
                rep.pass_l && rep.pass_u,
                "d={d}: L {} U {}",
                rep.pair.l_form.mean,
                rep.pair.u_form.mean
            );
        }
    }

    #[test]
    fn mean_gn_matches_convolution_oracle() {
        // E[G_n] = sum_k p_k(0) [ (k+1) + 2 sum_{j=1..k} q^j (k+1-j) ],
        // q = 1 - 1/n, using sum_z p_j(z) p_m(z) = p_{j+m}(0). Exact
        // return probabilities to k = 400, CLT values beyond.
        let probs = return_probabilities(6, 400).unwrap();
        let oracle = |n: f64| -> f64 {
            let q = 1.0 - 1.0 / n;
            let mut s = 0.0; // sum_{j=1..k} q^j (k+1-j), updated in k
            let mut geom = 0.0; // sum_{j=1..k} q^j
            let mut qk = 1.0;
            let mut total = 0.0;
            for k in 0..=2_000_000usize {
                if k > 0 {
                    qk *= q;
                    geom += qk;
                    s += geom;
                }
                let pk = if k <= 400 {
                    probs[k]
                } else if k % 2 == 0 {
                    2.0 * (3.0 / (std::f64::consts::PI * k as f64)).powi(3)
                } else {
                    0.0
                };
                if pk > 0.0 {
                    total += pk * ((k + 1) as f64 + 2.0 * s);
                }
            }
            total
        };
        let s = sampler(6);
        let green = GreenEval::for_dim(6).unwrap();
        let flags = TrialFlags {
            green_sums: true,
            ..TrialFlags::default()
        };
        for n in [10u64, 100] {
            let vals: Vec<f64> = (0..6000u64)
                .map(|t| {
                    let mut rng = stream(904 + n, &[t]);
                    run_trial(&s, n, &caps(), 4.0, &green, &flags, &mut rng)
                        .unwrap()
                        .g_n
                })
                .collect();
            let est = McEstimate::from_samples(&vals, 0.0, "");
            let target = oracle(n as f64);
            assert!(
                (est.mean - target).abs() <= 3.0 * est.stderr + 0.02,
                "n={n}: mc {} vs oracle {target} (stderr {})",
                est.mean,
                est.stderr
            );
        }
    }

    #[test]
    fn growth_stats_run_and_slope_is_positive() {
        let s = sampler(6);
        let green = GreenEval::for_dim(6).unwrap();
        let stats = stats_un_gn(&s, &[100, 1000], &caps(), 1.5, &green, 400, 905).unwrap();
        assert_eq!(stats.rows.len(), 2);
        assert!(stats.rows[1].mean_g > stats.rows[0].mean_g);
        assert!(stats.slope_g > 0.0 && stats.slope_u > 0.0);
        // E[g_n] <= 2 G(0) uniformly in n.
        let big_g0 = green.big_g(&LatticePoint::origin());
        for row in &stats.rows {
            assert!(row.mean_small_g <= 2.0 * big_g0 + 3.0 * 0.1);
        }
        assert!(stats_un_gn(&sampler(5), &[100], &caps(), 1.5, &GreenEval::for_dim(5).unwrap(), 10, 1).is_err());
    }

    #[test]
    fn escape_probabilities() {
        let s = sampler(6);
        let (pa2, pb2) = estimate_escape(&s, 100, &caps(), 2.0, 4000, 906).unwrap();
        assert!(pa2.mean <= pb2.mean, "A implies B per realization");
        assert!(
            pb2.mean.powi(2) <= pa2.mean + 4.0 * pa2.stderr,
            "pB^2 {} vs pA {}",
            pb2.mean.powi(2),
            pa2.mean
        );
        assert!(pa2.mean > 0.0 && pb2.mean < 1.0);
    }

    #[test]
    fn csv_format() {
        let est = McEstimate::exact(1.0, "m");
        let mut buf = Vec::new();
        write_stat_csv(&mut buf, &[(50, "identity_l".into(), est)], 7).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "n,statistic,mean,stderr,samples,bias,seed");
        assert_eq!(lines.next().unwrap(), "50,identity_l,1,0,0,0,7");
    }
}
