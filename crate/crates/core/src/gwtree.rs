//! Critical Galton-Watson trees, the spine-decomposed invariant tree, and
//! the occupation measures of its past and future forests.
//!
//! The invariant tree is a.s. infinite, so sampling is truncated at the
//! first spine exit from a ball; the ignored tail is of relative order
//! `r^{-(d-4)}` and always reported, never silently dropped. Trees are
//! sampled position-only (no topology is kept): every downstream statistic
//! consumes site sets or visit counts.
//!
//! The sampler is split into a spine skeleton (positions, offspring counts)
//! and separate passes that grow the hanging past/future forests over a
//! skeleton. Estimators combine exactly the passes they need, and passes
//! accept a visitor that can abort the walk early (e.g. on the first hit of
//! a target set).

use crate::lattice::{draw_step, LatticePoint, SiteCounts, SiteSet, MAX_DIM};
use crate::offspring::{root_offspring, size_biased, spine_split, OffspringLaw, SizeBiasedLaw};
use crate::error::Error;
use crate::Result;
use rand::Rng;
use std::io::Write;

/// Controls for approximating the infinite invariant tree.
#[derive(Clone, Copy, Debug)]
pub struct TruncationPolicy {
    /// Spine sampling stops at the first vertex at distance >= this from
    /// the start.
    pub spine_exit_radius: f64,
    /// Node budget per hanging subtree.
    pub subtree_node_cap: u64,
    /// Hard cap on the number of spine vertices.
    pub spine_step_cap: usize,
}

impl TruncationPolicy {
    pub fn new(spine_exit_radius: f64, subtree_node_cap: u64, spine_step_cap: usize) -> Result<Self> {
        if !(spine_exit_radius > 0.0) || subtree_node_cap < 1 || spine_step_cap < 1 {
            return Err(Error::Config(format!(
                "invalid truncation policy: radius {spine_exit_radius}, node cap {subtree_node_cap}, step cap {spine_step_cap}"
            )));
        }
        Ok(TruncationPolicy {
            spine_exit_radius,
            subtree_node_cap,
            spine_step_cap,
        })
    }

    /// Default policy for a target set of bounding radius `r`: spine exit at
    /// `8 r` (at least 64), generous node and step caps.
    pub fn for_set_radius(r: f64) -> Self {
        TruncationPolicy {
            spine_exit_radius: (8.0 * r).max(64.0),
            subtree_node_cap: 1_000_000,
            spine_step_cap: 1_000_000,
        }
    }

    /// Relative order of the ignored tail beyond the spine exit radius.
    pub fn bias_note(&self, d: usize) -> f64 {
        self.spine_exit_radius.powi(-(d as i32 - 4))
    }
}

/// Occupation measure of one tree-indexed walk.
#[derive(Clone, Debug)]
pub struct GwOccupation {
    pub visits: SiteCounts,
    pub node_count: u64,
    pub truncated: bool,
}

/// One first-hit event from a ladder past pass: a hit at a spine vertex
/// (`nodes_before_hit == 0`) or the first target hit of one hanging
/// subtree, with the node count that subtree explored up to the hit.
#[derive(Clone, Copy, Debug)]
pub struct PastHitEvent {
    pub spine_index: usize,
    pub nodes_before_hit: u64,
}

/// Spine positions and per-vertex offspring counts of one truncated
/// invariant-tree realization.
#[derive(Clone, Debug)]
pub struct SpineSkeleton {
    /// Walk indexed by the spine, start first. The last vertex is the exit
    /// vertex (or the step-cap cutoff) and carries no offspring draw.
    pub positions: Vec<LatticePoint>,
    /// Future offspring counts `d_0 .. d_{T-1}`; `d_0` is the root draw.
    pub d_counts: Vec<usize>,
    /// Past offspring counts; index 0 is always 0 (the root has no past).
    pub past_counts: Vec<usize>,
    pub truncated: bool,
    pub bias_note: f64,
}

/// Result of a forest-growing pass.
#[derive(Clone, Copy, Debug)]
pub struct ForestRun {
    pub truncated: bool,
    /// The visitor stopped the pass.
    pub aborted: bool,
    pub nodes: u64,
}

/// Truncated past of an invariant tree.
#[derive(Clone, Debug)]
pub struct PastSample {
    pub spine: Vec<LatticePoint>,
    pub past_sites: SiteSet,
    pub truncated: bool,
    pub bias_note: f64,
}

/// One joint sample of spine, offspring counts, past sites, and the future
/// occupation restricted to a target set.
#[derive(Clone, Debug)]
pub struct InvariantTreeSample {
    pub spine_positions: Vec<LatticePoint>,
    pub d_counts: Vec<usize>,
    pub past_sites: SiteSet,
    pub future_occupation: SiteCounts,
    pub truncated: bool,
    pub bias_note: f64,
}

/// Sampler bundling an offspring law with its size-biased companion.
#[derive(Clone)]
pub struct TreeSampler {
    pub d: usize,
    law: OffspringLaw,
    sb: SizeBiasedLaw,
}

impl TreeSampler {
    pub fn new(d: usize, law: OffspringLaw) -> Result<Self> {
        if d < 5 || d > MAX_DIM {
            return Err(Error::Config(format!(
                "tree-indexed walks need 5 <= d <= {MAX_DIM}, got {d}"
            )));
        }
        let sb = size_biased(&law);
        Ok(TreeSampler { d, law, sb })
    }

    pub fn law(&self) -> &OffspringLaw {
        &self.law
    }

    /// Grow one GW tree rooted at `root`, visiting every vertex (root
    /// included) in depth-first order. The visitor returns false to abort.
    fn subtree<R: Rng + ?Sized, F: FnMut(&LatticePoint) -> bool>(
        &self,
        root: LatticePoint,
        cap: u64,
        rng: &mut R,
        visit: &mut F,
    ) -> ForestRun {
        let mut stack = vec![root];
        let mut nodes = 0u64;
        while let Some(pos) = stack.pop() {
            if nodes == cap {
                return ForestRun {
                    truncated: true,
                    aborted: false,
                    nodes,
                };
            }
            nodes += 1;
            if !visit(&pos) {
                return ForestRun {
                    truncated: false,
                    aborted: true,
                    nodes,
                };
            }
            let k = self.law.sample(rng);
            for _ in 0..k {
                let (axis, sign) = draw_step(self.d, rng);
                stack.push(pos.stepped(axis, sign));
            }
        }
        ForestRun {
            truncated: false,
            aborted: false,
            nodes,
        }
    }

    /// Like `subtree`, but when the node budget runs out the unexplored
    /// branch roots (the DFS frontier) are handed to `frontier` instead of
    /// being silently dropped. Each frontier position is the root of an
    /// untouched critical tree, so a caller can close the truncation gap
    /// with an exact conditional expectation. Consumes exactly the same
    /// random draws as `subtree`.
    fn subtree_with_frontier<
        R: Rng + ?Sized,
        F: FnMut(&LatticePoint) -> bool,
        H: FnMut(&LatticePoint),
    >(
        &self,
        root: LatticePoint,
        cap: u64,
        rng: &mut R,
        visit: &mut F,
        frontier: &mut H,
    ) -> ForestRun {
        let mut stack = vec![root];
        let mut nodes = 0u64;
        let mut truncated = false;
        while let Some(pos) = stack.pop() {
            if nodes == cap {
                truncated = true;
                frontier(&pos);
                for p in stack.drain(..) {
                    frontier(&p);
                }
                break;
            }
            nodes += 1;
            if !visit(&pos) {
                return ForestRun {
                    truncated,
                    aborted: true,
                    nodes,
                };
            }
            let k = self.law.sample(rng);
            for _ in 0..k {
                let (axis, sign) = draw_step(self.d, rng);
                stack.push(pos.stepped(axis, sign));
            }
        }
        ForestRun {
            truncated,
            aborted: false,
            nodes,
        }
    }

    /// `future_from_skeleton` with frontier hand-off on every capped
    /// subtree (see `subtree_with_frontier`).
    pub fn future_from_skeleton_completed<
        R: Rng + ?Sized,
        F: FnMut(&LatticePoint) -> bool,
        H: FnMut(&LatticePoint),
    >(
        &self,
        skel: &SpineSkeleton,
        cap: u64,
        rng: &mut R,
        visit: &mut F,
        frontier: &mut H,
    ) -> ForestRun {
        let mut truncated = false;
        let mut nodes = 0u64;
        for i in 0..skel.d_counts.len() {
            let pos = skel.positions[i];
            for _ in 0..skel.d_counts[i] {
                let (axis, sign) = draw_step(self.d, rng);
                let run =
                    self.subtree_with_frontier(pos.stepped(axis, sign), cap, rng, visit, frontier);
                truncated |= run.truncated;
                nodes += run.nodes;
                if run.aborted {
                    return ForestRun {
                        truncated,
                        aborted: true,
                        nodes,
                    };
                }
            }
        }
        ForestRun {
            truncated,
            aborted: false,
            nodes,
        }
    }

    /// One plain GW tree occupation.
    pub fn sample_gw_occupation<R: Rng + ?Sized>(
        &self,
        start: LatticePoint,
        include_root: bool,
        cap: u64,
        rng: &mut R,
    ) -> GwOccupation {
        let mut visits = SiteCounts::new(self.d);
        let mut first = true;
        let run = self.subtree(start, cap, rng, &mut |p| {
            if first {
                first = false;
                if include_root {
                    visits.add(p, 1);
                }
            } else {
                visits.add(p, 1);
            }
            true
        });
        let node_count = if include_root { run.nodes } else { run.nodes - 1 };
        GwOccupation {
            visits,
            node_count,
            truncated: run.truncated,
        }
    }

    /// Past pass for truncation-ladder analysis: explores *every* hanging
    /// subtree to its first target hit or the node cap instead of aborting
    /// the whole pass at the first hit, and reports each first-hit event
    /// tagged with the spine index it hangs off and the number of nodes
    /// that subtree explored up to and including the hit (0 for a hit at a
    /// spine vertex itself). A consumer can then evaluate the avoidance
    /// indicator under any weaker policy — shorter spine prefix, smaller
    /// per-subtree node cap — from this single pass, because weaker
    /// policies explore prefixes of the same depth-first order.
    pub fn past_hit_events<R: Rng + ?Sized, F: FnMut(&LatticePoint) -> bool>(
        &self,
        skel: &SpineSkeleton,
        cap: u64,
        rng: &mut R,
        in_target: &mut F,
    ) -> (Vec<PastHitEvent>, bool) {
        let mut events = Vec::new();
        let mut truncated = false;
        for i in 1..skel.positions.len() {
            let pos = skel.positions[i];
            if in_target(&pos) {
                events.push(PastHitEvent {
                    spine_index: i,
                    nodes_before_hit: 0,
                });
            }
            if i >= skel.past_counts.len() {
                continue;
            }
            for _ in 0..skel.past_counts[i] {
                let (axis, sign) = draw_step(self.d, rng);
                let mut seen = 0u64;
                let mut hit_at = None;
                let run = self.subtree(pos.stepped(axis, sign), cap, rng, &mut |p| {
                    seen += 1;
                    if in_target(p) {
                        hit_at = Some(seen);
                        false
                    } else {
                        true
                    }
                });
                truncated |= run.truncated;
                if let Some(nodes_before_hit) = hit_at {
                    events.push(PastHitEvent {
                        spine_index: i,
                        nodes_before_hit,
                    });
                }
            }
        }
        (events, truncated)
    }

    /// Spine walk with all offspring draws, no hanging forests.
    pub fn spine_skeleton<R: Rng + ?Sized>(
        &self,
        start: LatticePoint,
        policy: &TruncationPolicy,
        rng: &mut R,
    ) -> SpineSkeleton {
        let mut positions = vec![start];
        let mut d_counts = vec![root_offspring(&self.law, rng)];
        let mut past_counts = vec![0usize];
        let mut truncated = false;
        let mut pos = start;
        loop {
            let (axis, sign) = draw_step(self.d, rng);
            pos = pos.stepped(axis, sign);
            positions.push(pos);
            if pos.dist(&start) >= policy.spine_exit_radius {
                break;
            }
            if positions.len() > policy.spine_step_cap {
                truncated = true;
                break;
            }
            let split = spine_split(&self.sb, rng);
            past_counts.push(split.past_count);
            d_counts.push(split.future_count);
        }
        SpineSkeleton {
            positions,
            d_counts,
            past_counts,
            truncated,
            bias_note: policy.bias_note(self.d),
        }
    }

    /// Visit the past of a skeleton: spine vertices at index >= 1 and every
    /// vertex of the past forests hanging off them.
    pub fn past_from_skeleton<R: Rng + ?Sized, F: FnMut(&LatticePoint) -> bool>(
        &self,
        skel: &SpineSkeleton,
        cap: u64,
        rng: &mut R,
        visit: &mut F,
    ) -> ForestRun {
        let mut truncated = false;
        let mut nodes = 0u64;
        for i in 1..skel.positions.len() {
            let pos = skel.positions[i];
            nodes += 1;
            if !visit(&pos) {
                return ForestRun {
                    truncated,
                    aborted: true,
                    nodes,
                };
            }
            if i >= skel.past_counts.len() {
                continue;
            }
            for _ in 0..skel.past_counts[i] {
                let (axis, sign) = draw_step(self.d, rng);
                let run = self.subtree(pos.stepped(axis, sign), cap, rng, visit);
                truncated |= run.truncated;
                nodes += run.nodes;
                if run.aborted {
                    return ForestRun {
                        truncated,
                        aborted: true,
                        nodes,
                    };
                }
            }
        }
        ForestRun {
            truncated,
            aborted: false,
            nodes,
        }
    }

    /// Visit the future forests of a skeleton (subtree roots included, the
    /// root vertex itself excluded).
    pub fn future_from_skeleton<R: Rng + ?Sized, F: FnMut(&LatticePoint) -> bool>(
        &self,
        skel: &SpineSkeleton,
        cap: u64,
        rng: &mut R,
        visit: &mut F,
    ) -> ForestRun {
        let mut truncated = false;
        let mut nodes = 0u64;
        for i in 0..skel.d_counts.len() {
            let pos = skel.positions[i];
            for _ in 0..skel.d_counts[i] {
                let (axis, sign) = draw_step(self.d, rng);
                let run = self.subtree(pos.stepped(axis, sign), cap, rng, visit);
                truncated |= run.truncated;
                nodes += run.nodes;
                if run.aborted {
                    return ForestRun {
                        truncated,
                        aborted: true,
                        nodes,
                    };
                }
            }
        }
        ForestRun {
            truncated,
            aborted: false,
            nodes,
        }
    }

    /// Truncated past of the invariant tree started at `start`.
    pub fn sample_past<R: Rng + ?Sized>(
        &self,
        start: LatticePoint,
        policy: &TruncationPolicy,
        rng: &mut R,
    ) -> PastSample {
        let skel = self.spine_skeleton(start, policy, rng);
        let mut past_sites = SiteSet::new(self.d);
        let run = self.past_from_skeleton(&skel, policy.subtree_node_cap, rng, &mut |p| {
            past_sites.insert(p);
            true
        });
        PastSample {
            past_sites,
            truncated: skel.truncated || run.truncated,
            bias_note: skel.bias_note,
            spine: skel.positions,
        }
    }

    /// Does the past of an invariant tree at `start` hit `a`? Fused fast
    /// path: the spine is grown lazily and the whole sample aborts on the
    /// first hit, so dense target sets terminate in a few steps.
    pub fn past_hits<R: Rng + ?Sized>(
        &self,
        start: LatticePoint,
        a: &SiteSet,
        policy: &TruncationPolicy,
        rng: &mut R,
    ) -> (bool, bool) {
        // Root draw comes first so the stream layout matches spine_skeleton.
        let _ = root_offspring(&self.law, rng);
        let mut truncated = false;
        let mut pos = start;
        let mut spine_len = 1usize;
        loop {
            let (axis, sign) = draw_step(self.d, rng);
            pos = pos.stepped(axis, sign);
            spine_len += 1;
            if a.contains(&pos) {
                return (true, truncated);
            }
            if pos.dist(&start) >= policy.spine_exit_radius {
                return (false, truncated);
            }
            if spine_len > policy.spine_step_cap {
                return (false, true);
            }
            let split = spine_split(&self.sb, rng);
            for _ in 0..split.past_count {
                let (axis, sign) = draw_step(self.d, rng);
                let run = self.subtree(
                    pos.stepped(axis, sign),
                    policy.subtree_node_cap,
                    rng,
                    &mut |p| !a.contains(p),
                );
                truncated |= run.truncated;
                if run.aborted {
                    return (true, truncated);
                }
            }
        }
    }

    /// One joint invariant-tree sample with future occupation restricted to
    /// `targets`.
    pub fn sample_invariant_tree<R: Rng + ?Sized>(
        &self,
        start: LatticePoint,
        targets: &SiteSet,
        policy: &TruncationPolicy,
        rng: &mut R,
    ) -> InvariantTreeSample {
        let skel = self.spine_skeleton(start, policy, rng);
        let mut past_sites = SiteSet::new(self.d);
        let past_run = self.past_from_skeleton(&skel, policy.subtree_node_cap, rng, &mut |p| {
            past_sites.insert(p);
            true
        });
        let mut future_occupation = SiteCounts::new(self.d);
        let mut truncated = skel.truncated || past_run.truncated;
        if !targets.is_empty() {
            let run = self.future_from_skeleton(&skel, policy.subtree_node_cap, rng, &mut |p| {
                if targets.contains(p) {
                    future_occupation.add(p, 1);
                }
                true
            });
            truncated |= run.truncated;
        }
        InvariantTreeSample {
            spine_positions: skel.positions,
            d_counts: skel.d_counts,
            past_sites,
            future_occupation,
            truncated,
            bias_note: skel.bias_note,
        }
    }

    /// Debug dump: one line per vertex, `side index x1 ... xd`, where
    /// `index` is the spine index the vertex belongs to or hangs off.
    pub fn dump_invariant_tree<R: Rng + ?Sized, W: Write>(
        &self,
        start: LatticePoint,
        policy: &TruncationPolicy,
        rng: &mut R,
        out: &mut W,
    ) -> Result<()> {
        let skel = self.spine_skeleton(start, policy, rng);
        let write_vertex = |out: &mut W, side: &str, idx: usize, p: &LatticePoint| -> std::io::Result<()> {
            write!(out, "{side} {idx}")?;
            for c in p.coords(self.d) {
                write!(out, " {c}")?;
            }
            writeln!(out)
        };
        write_vertex(out, "root", 0, &skel.positions[0])?;
        for (i, pos) in skel.positions.iter().enumerate().skip(1) {
            write_vertex(out, "spine", i, pos)?;
        }
        let mut io_err: Option<std::io::Error> = None;
        for i in 1..skel.positions.len().min(skel.past_counts.len()) {
            let pos = skel.positions[i];
            for _ in 0..skel.past_counts[i] {
                let (axis, sign) = draw_step(self.d, rng);
                self.subtree(pos.stepped(axis, sign), policy.subtree_node_cap, rng, &mut |p| {
                    match write_vertex(out, "past", i, p) {
                        Ok(()) => true,
                        Err(e) => {
                            io_err = Some(e);
                            false
                        }
                    }
                });
            }
        }
        for i in 0..skel.d_counts.len() {
            let pos = skel.positions[i];
            for _ in 0..skel.d_counts[i] {
                let (axis, sign) = draw_step(self.d, rng);
                self.subtree(pos.stepped(axis, sign), policy.subtree_node_cap, rng, &mut |p| {
                    match write_vertex(out, "future", i, p) {
                        Ok(()) => true,
                        Err(e) => {
                            io_err = Some(e);
                            false
                        }
                    }
                });
            }
        }
        match io_err {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::green::default_table;
    use crate::rng::stream;

    fn p6(coords: &[i64]) -> LatticePoint {
        LatticePoint::from_coords(coords).unwrap()
    }

    fn sampler6() -> TreeSampler {
        TreeSampler::new(6, OffspringLaw::binary()).unwrap()
    }

    #[test]
    fn single_node_tree_occupation() {
        let s = sampler6();
        let mut rng = stream(30, &[0]);
        // Find a realization where the root has no children.
        loop {
            let occ = s.sample_gw_occupation(LatticePoint::origin(), true, 1000, &mut rng);
            if occ.node_count == 1 {
                assert_eq!(occ.visits.get(&LatticePoint::origin()), 1);
                assert_eq!(occ.visits.total(), 1);
                break;
            }
        }
    }

    #[test]
    fn occupation_counts_sum_to_node_count() {
        let s = sampler6();
        for t in 0..200 {
            let mut rng = stream(31, &[t]);
            let occ = s.sample_gw_occupation(LatticePoint::origin(), true, 10_000, &mut rng);
            assert_eq!(occ.visits.total(), occ.node_count);
        }
    }

    #[test]
    fn progeny_pmf_matches_ballot_formula() {
        // Total progeny S of a binary-law GW tree: the cycle-lemma formula
        // P(S = k) = (1/k) P(xi_1 + .. + xi_k = k - 1) gives, for odd k,
        // P(S = k) = C(k, (k-1)/2) / (k 2^k).
        let s = sampler6();
        let draws = 100_000u64;
        let mut rng = stream(32, &[0]);
        let mut counts = vec![0u64; 70];
        for _ in 0..draws {
            let occ = s.sample_gw_occupation(LatticePoint::origin(), true, 70, &mut rng);
            if !occ.truncated && (occ.node_count as usize) < counts.len() {
                counts[occ.node_count as usize] += 1;
            }
        }
        let binom = |n: u64, k: u64| -> f64 {
            let mut v = 1.0f64;
            for i in 0..k {
                v = v * (n - i) as f64 / (i + 1) as f64;
            }
            v
        };
        for k in [1u64, 3, 5, 7, 9] {
            let target = binom(k, (k - 1) / 2) / (k as f64 * 2f64.powi(k as i32));
            let freq = counts[k as usize] as f64 / draws as f64;
            let stderr = (target * (1.0 - target) / draws as f64).sqrt();
            assert!(
                (freq - target).abs() <= 4.0 * stderr,
                "k={k} freq={freq} target={target}"
            );
            // Even sizes are impossible under the binary law.
            assert_eq!(counts[(k + 1) as usize], 0);
        }
    }

    #[test]
    fn progeny_survival_tail() {
        // P(S > m) ~ sqrt(2 / (pi sigma^2 m)); factor-2 gate at m = 10^4.
        let s = sampler6();
        let m = 10_000u64;
        let draws = 100_000u64;
        let mut rng = stream(33, &[0]);
        let mut over = 0u64;
        for _ in 0..draws {
            let occ = s.sample_gw_occupation(LatticePoint::origin(), true, m, &mut rng);
            if occ.truncated {
                over += 1;
            }
        }
        let freq = over as f64 / draws as f64;
        let target = (2.0 / (std::f64::consts::PI * m as f64)).sqrt();
        assert!(
            freq >= target / 2.0 && freq <= target * 2.0,
            "freq={freq} target={target}"
        );
    }

    #[test]
    fn mean_visits_match_green_function() {
        // Root-excluded mean visits to y equal g(x,y) - 1{x=y}.
        let table = default_table(6).unwrap();
        let s = sampler6();
        let draws = 200_000u64;
        let origin = LatticePoint::origin();
        let e1 = p6(&[1, 0, 0, 0, 0, 0]);
        let mut v0 = Vec::with_capacity(draws as usize);
        let mut v1 = Vec::with_capacity(draws as usize);
        for t in 0..draws {
            let mut rng = stream(34, &[t]);
            let occ = s.sample_gw_occupation(origin, false, 30_000, &mut rng);
            v0.push(occ.visits.get(&origin) as f64);
            v1.push(occ.visits.get(&e1) as f64);
        }
        let est0 = crate::stats::McEstimate::from_samples(&v0, 0.0, "");
        let est1 = crate::stats::McEstimate::from_samples(&v1, 0.0, "");
        let t0 = table.g0() - 1.0;
        let t1 = table.g(&e1).unwrap();
        assert!(
            (est0.mean - t0).abs() <= 5.0 * est0.stderr + 1e-3,
            "visits(0): {} vs {}",
            est0.mean,
            t0
        );
        assert!(
            (est1.mean - t1).abs() <= 5.0 * est1.stderr + 1e-3,
            "visits(e1): {} vs {}",
            est1.mean,
            t1
        );
    }

    #[test]
    fn immediate_exit_policy() {
        let s = sampler6();
        let policy = TruncationPolicy::new(0.5, 100, 100).unwrap();
        let mut rng = stream(35, &[0]);
        let past = s.sample_past(LatticePoint::origin(), &policy, &mut rng);
        assert_eq!(past.spine.len(), 2);
        assert_eq!(past.past_sites.len(), 1);
        assert!(!past.truncated);
    }

    #[test]
    fn invalid_policy_rejected() {
        assert!(TruncationPolicy::new(0.0, 10, 10).is_err());
        assert!(TruncationPolicy::new(1.0, 0, 10).is_err());
    }

    #[test]
    fn past_origin_membership_nondegenerate() {
        let s = sampler6();
        let policy = TruncationPolicy::new(16.0, 10_000, 100_000).unwrap();
        let mut with = 0u64;
        let mut without = 0u64;
        for t in 0..2000 {
            let mut rng = stream(36, &[t]);
            let past = s.sample_past(LatticePoint::origin(), &policy, &mut rng);
            if past.past_sites.contains(&LatticePoint::origin()) {
                with += 1;
            } else {
                without += 1;
            }
        }
        assert!(with > 0 && without > 0, "with={with} without={without}");
    }

    #[test]
    fn past_hit_probability_bounded_by_big_g() {
        // P(z in past) <= C G(z), checked at |z| in {4, 8, 16}.
        let green = crate::green::GreenEval::new(default_table(6).unwrap()).unwrap();
        let s = sampler6();
        let policy = TruncationPolicy::new(32.0, 10_000, 1_000_000).unwrap();
        let zs = [
            p6(&[4, 0, 0, 0, 0, 0]),
            p6(&[8, 0, 0, 0, 0, 0]),
            p6(&[16, 0, 0, 0, 0, 0]),
        ];
        let draws = 10_000u64;
        let mut hits = [0u64; 3];
        for t in 0..draws {
            let mut rng = stream(37, &[t]);
            let past = s.sample_past(LatticePoint::origin(), &policy, &mut rng);
            for (k, z) in zs.iter().enumerate() {
                if past.past_sites.contains(z) {
                    hits[k] += 1;
                }
            }
        }
        for (k, z) in zs.iter().enumerate() {
            let p_hat = hits[k] as f64 / draws as f64;
            let ratio = p_hat / green.big_g(z);
            assert!(ratio <= 3.0, "|z|={}: ratio {ratio}", z.norm());
            assert!(hits[k] > 0, "no hits at |z|={}", z.norm());
        }
    }

    #[test]
    fn last_passage_identity_two_point_set() {
        // P(past of x hits A) = sum_{y in A} E[ 1{past of y avoids A} *
        // future-visits of the y-tree to x ], A = {0, e1}, |x| = 4.
        let s = sampler6();
        let origin = LatticePoint::origin();
        let e1 = p6(&[1, 0, 0, 0, 0, 0]);
        let x = p6(&[4, 0, 0, 0, 0, 0]);
        let a = SiteSet::from_points(6, &[origin, e1]);
        let policy = TruncationPolicy::new(32.0, 20_000, 1_000_000).unwrap();
        let trials = 20_000u64;

        let mut lhs_vals = Vec::with_capacity(trials as usize);
        for t in 0..trials {
            let mut rng = stream(38, &[0, t]);
            let (hit, _) = s.past_hits(x, &a, &policy, &mut rng);
            lhs_vals.push(if hit { 1.0 } else { 0.0 });
        }
        let lhs = crate::stats::McEstimate::from_samples(&lhs_vals, 0.0, "");

        let mut targets = SiteSet::new(6);
        targets.insert(&x);
        let mut rhs_vals = Vec::with_capacity(trials as usize);
        for t in 0..trials {
            let mut total = 0.0;
            for (yi, y) in [origin, e1].into_iter().enumerate() {
                let mut rng = stream(38, &[1 + yi as u64, t]);
                let sample = s.sample_invariant_tree(y, &targets, &policy, &mut rng);
                if !sample.past_sites.contains(&origin) && !sample.past_sites.contains(&e1) {
                    total += sample.future_occupation.get(&x) as f64;
                }
            }
            rhs_vals.push(total);
        }
        let rhs = crate::stats::McEstimate::from_samples(&rhs_vals, 0.0, "");

        let combined = lhs.combined_stderr(&rhs);
        let bias = policy.bias_note(6) * (lhs.mean + rhs.mean);
        assert!(
            (lhs.mean - rhs.mean).abs() <= 5.0 * combined + bias,
            "lhs {} +- {}, rhs {} +- {}",
            lhs.mean,
            lhs.stderr,
            rhs.mean,
            rhs.stderr
        );
        assert!(lhs.mean > 0.0 && rhs.mean > 0.0);
    }

    #[test]
    fn conditional_independence_given_skeleton() {
        // With the skeleton frozen, past-hit indicators and future visit
        // counts are independent: their sample correlation vanishes.
        let s = sampler6();
        let policy = TruncationPolicy::new(16.0, 10_000, 100_000).unwrap();
        let mut rng = stream(39, &[0]);
        let skel = s.spine_skeleton(LatticePoint::origin(), &policy, &mut rng);
        let a = SiteSet::from_points(
            6,
            &crate::lattice::ball(6, &LatticePoint::origin(), 1.0),
        );
        let y = p6(&[2, 0, 0, 0, 0, 0]);
        let m = 4000u64;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for t in 0..m {
            let mut rng = stream(39, &[1, t]);
            let mut hit = false;
            self::TreeSampler::past_from_skeleton(
                &s,
                &skel,
                policy.subtree_node_cap,
                &mut rng,
                &mut |p| {
                    if a.contains(p) {
                        hit = true;
                    }
                    true
                },
            );
            let mut visits = 0u64;
            s.future_from_skeleton(&skel, policy.subtree_node_cap, &mut rng, &mut |p| {
                if *p == y {
                    visits += 1;
                }
                true
            });
            xs.push(if hit { 1.0 } else { 0.0 });
            ys.push(visits as f64);
        }
        let (mx, vx) = crate::stats::mean_and_var(&xs);
        let (my, vy) = crate::stats::mean_and_var(&ys);
        if vx == 0.0 || vy == 0.0 {
            return; // degenerate skeleton; nothing to test
        }
        let mut cov = 0.0;
        for i in 0..xs.len() {
            cov += (xs[i] - mx) * (ys[i] - my);
        }
        cov /= (xs.len() - 1) as f64;
        let corr = cov / (vx * vy).sqrt();
        assert!(corr.abs() <= 5.0 / (m as f64).sqrt(), "corr={corr}");
    }

    #[test]
    fn skeleton_offspring_statistics() {
        // d_1 marginal matches sum_{j >= k+1} mu(j) and its mean sigma^2/2;
        // d_0 has mean 1.
        let s = sampler6();
        let policy = TruncationPolicy::new(8.0, 1000, 100_000).unwrap();
        let draws = 100_000u64;
        let mut d0_sum = 0.0;
        let mut d1_counts = [0u64; 3];
        let mut d1_n = 0u64;
        for t in 0..draws {
            let mut rng = stream(40, &[t]);
            let skel = s.spine_skeleton(LatticePoint::origin(), &policy, &mut rng);
            d0_sum += skel.d_counts[0] as f64;
            if skel.d_counts.len() > 1 {
                let d1 = skel.d_counts[1];
                if d1 < 3 {
                    d1_counts[d1] += 1;
                }
                d1_n += 1;
            }
        }
        let d0_mean = d0_sum / draws as f64;
        assert!((d0_mean - 1.0).abs() <= 3.0 * (1.0f64 / draws as f64).sqrt());
        let law = OffspringLaw::binary();
        for k in 0..2usize {
            let target = law.spine_child_marginal(k);
            let freq = d1_counts[k] as f64 / d1_n as f64;
            let stderr = (target * (1.0 - target) / d1_n as f64).sqrt();
            assert!((freq - target).abs() <= 4.0 * stderr, "k={k} freq={freq}");
        }
        let d1_mean = (d1_counts[1] as f64 + 2.0 * d1_counts[2] as f64) / d1_n as f64;
        let stderr = (0.25f64 / d1_n as f64).sqrt();
        assert!((d1_mean - 0.5).abs() <= 4.0 * stderr, "d1 mean {d1_mean}");
    }

    #[test]
    fn future_mean_visits_scale_with_big_g() {
        // E[future visits to y] = sigma^2/2 G(y) + O(g(y)), |y| in {2, 4}.
        let table = default_table(6).unwrap();
        let s = sampler6();
        for (i, (r, samples)) in [(2i64, 30_000u64), (4, 15_000)].into_iter().enumerate() {
            let y = p6(&[r, 0, 0, 0, 0, 0]);
            let policy = TruncationPolicy::new(8.0 * r as f64, 10_000, 1_000_000).unwrap();
            let mut vals = Vec::with_capacity(samples as usize);
            for t in 0..samples {
                let mut rng = stream(41, &[i as u64, t]);
                let skel = s.spine_skeleton(LatticePoint::origin(), &policy, &mut rng);
                let mut visits = 0u64;
                s.future_from_skeleton(&skel, policy.subtree_node_cap, &mut rng, &mut |p| {
                    if *p == y {
                        visits += 1;
                    }
                    true
                });
                vals.push(visits as f64);
            }
            let est = crate::stats::McEstimate::from_samples(&vals, 0.0, "");
            let target = 0.5 * table.big_g(&y).unwrap();
            let slack = 3.0 * table.g(&y).unwrap() + 0.3 / policy.spine_exit_radius.powi(2);
            assert!(
                (est.mean - target).abs() <= 4.0 * est.stderr + slack,
                "|y|={r}: mean {} target {target} stderr {}",
                est.mean,
                est.stderr
            );
        }
    }

    #[test]
    fn empty_targets_skip_future() {
        let s = sampler6();
        let policy = TruncationPolicy::new(8.0, 1000, 100_000).unwrap();
        let mut rng = stream(42, &[0]);
        let sample = s.sample_invariant_tree(
            LatticePoint::origin(),
            &SiteSet::new(6),
            &policy,
            &mut rng,
        );
        assert!(sample.future_occupation.is_empty());
        assert!(!sample.past_sites.is_empty() || sample.spine_positions.len() <= 2);
        // Spine positions form a nearest-neighbor path.
        for w in sample.spine_positions.windows(2) {
            assert_eq!(w[0].dist(&w[1]), 1.0);
        }
        assert_eq!(sample.d_counts.len(), sample.spine_positions.len() - 1);
    }

    #[test]
    fn past_hits_agrees_with_full_sample() {
        // The fused early-exit path and the full past sample see the same
        // event frequency (they are distributionally identical).
        let s = sampler6();
        let policy = TruncationPolicy::new(16.0, 10_000, 100_000).unwrap();
        let a = SiteSet::from_points(6, &[p6(&[1, 1, 0, 0, 0, 0]), p6(&[0, 2, 0, 0, 0, 0])]);
        let trials = 4000u64;
        let mut fused = 0u64;
        let mut full = 0u64;
        for t in 0..trials {
            let mut rng = stream(43, &[0, t]);
            if s.past_hits(LatticePoint::origin(), &a, &policy, &mut rng).0 {
                fused += 1;
            }
            let mut rng = stream(43, &[1, t]);
            let past = s.sample_past(LatticePoint::origin(), &policy, &mut rng);
            if past.past_sites.iter().any(|p| a.contains(&p)) {
                full += 1;
            }
        }
        let pf = fused as f64 / trials as f64;
        let pg = full as f64 / trials as f64;
        let stderr = ((pf * (1.0 - pf) + pg * (1.0 - pg)) / trials as f64).sqrt();
        assert!((pf - pg).abs() <= 4.0 * stderr, "fused {pf} vs full {pg}");
    }

    #[test]
    fn dump_format() {
        let s = sampler6();
        let policy = TruncationPolicy::new(4.0, 100, 1000).unwrap();
        let mut rng = stream(44, &[0]);
        let mut buf = Vec::new();
        s.dump_invariant_tree(LatticePoint::origin(), &policy, &mut rng, &mut buf)
            .unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let first = lines.next().unwrap();
        assert!(first.starts_with("root 0 "));
        assert_eq!(first.split_whitespace().count(), 8);
        for line in lines {
            let side = line.split_whitespace().next().unwrap();
            assert!(["spine", "past", "future"].contains(&side), "{line}");
            assert_eq!(line.split_whitespace().count(), 8);
        }
    }
}
