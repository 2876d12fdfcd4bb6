//! `Z^d` geometry, simple random walks, two-sided walks with geometric kill
//! times, and exact range windows.
//!
//! Coordinates are 64-bit signed integers and all walk arithmetic is exact.
//! Site sets pack points into 128-bit keys (each coordinate gets `128/d`
//! bits), which keeps membership queries exact while making the hash path
//! cheap; desk-scale simulations stay far inside the packed range.

use crate::error::Error;
use crate::Result;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustc_hash::{FxHashMap, FxHashSet};

/// Hard cap on the ambient dimension.
pub const MAX_DIM: usize = 16;

/// A point of `Z^d`. Lanes at index `>= d` are always zero.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct LatticePoint {
    c: [i64; MAX_DIM],
}

impl LatticePoint {
    pub fn origin() -> Self {
        LatticePoint { c: [0; MAX_DIM] }
    }

    pub fn from_coords(coords: &[i64]) -> Result<Self> {
        if coords.len() > MAX_DIM {
            return Err(Error::Config(format!(
                "dimension {} above cap {}",
                coords.len(),
                MAX_DIM
            )));
        }
        let mut c = [0i64; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Ok(LatticePoint { c })
    }

    /// Axis-aligned unit vector `e_axis` (or `-e_axis`).
    pub fn unit(axis: usize, sign: i64) -> Self {
        let mut c = [0i64; MAX_DIM];
        c[axis] = sign;
        LatticePoint { c }
    }

    #[inline]
    pub fn coords(&self, d: usize) -> &[i64] {
        &self.c[..d]
    }

    #[inline]
    pub fn coord(&self, axis: usize) -> i64 {
        self.c[axis]
    }

    #[inline]
    pub fn stepped(&self, axis: usize, sign: i64) -> Self {
        let mut p = *self;
        p.c[axis] += sign;
        p
    }

    #[inline]
    pub fn add(&self, other: &LatticePoint) -> Self {
        let mut p = *self;
        for i in 0..MAX_DIM {
            p.c[i] += other.c[i];
        }
        p
    }

    #[inline]
    pub fn sub(&self, other: &LatticePoint) -> Self {
        let mut p = *self;
        for i in 0..MAX_DIM {
            p.c[i] -= other.c[i];
        }
        p
    }

    /// Squared Euclidean norm as f64 (exact for desk-scale coordinates).
    #[inline]
    pub fn norm_sq(&self) -> f64 {
        let mut s = 0.0;
        for &v in &self.c {
            s += (v as f64) * (v as f64);
        }
        s
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    #[inline]
    pub fn dist(&self, other: &LatticePoint) -> f64 {
        let mut s = 0.0;
        for i in 0..MAX_DIM {
            let v = (self.c[i] - other.c[i]) as f64;
            s += v * v;
        }
        s.sqrt()
    }

    pub fn is_origin(&self) -> bool {
        self.c.iter().all(|&v| v == 0)
    }
}

/// Bits per coordinate in the packed key for dimension `d`.
#[inline]
pub(crate) fn pack_bits(d: usize) -> u32 {
    (128 / d as u32).min(32)
}

#[inline]
pub(crate) fn pack_key(p: &LatticePoint, d: usize, bits: u32) -> u128 {
    let offset = 1i64 << (bits - 1);
    let mut key: u128 = 0;
    for &v in &p.c[..d] {
        let shifted = v + offset;
        debug_assert!(
            (0..(1i64 << bits)).contains(&shifted),
            "coordinate {v} out of packed range for d={d}"
        );
        key = (key << bits) | (shifted as u64 as u128);
    }
    key
}

#[inline]
pub(crate) fn unpack_key(mut key: u128, d: usize, bits: u32) -> LatticePoint {
    let offset = 1i64 << (bits - 1);
    let mask: u128 = (1u128 << bits) - 1;
    let mut c = [0i64; MAX_DIM];
    for i in (0..d).rev() {
        c[i] = (key & mask) as i64 - offset;
        key >>= bits;
    }
    LatticePoint { c }
}

/// Exact set of lattice sites.
#[derive(Clone, Debug)]
pub struct SiteSet {
    d: usize,
    bits: u32,
    set: FxHashSet<u128>,
    max_norm: f64,
}

impl SiteSet {
    pub fn new(d: usize) -> Self {
        SiteSet {
            d,
            bits: pack_bits(d),
            set: FxHashSet::default(),
            max_norm: 0.0,
        }
    }

    pub fn from_points(d: usize, pts: &[LatticePoint]) -> Self {
        let mut s = SiteSet::new(d);
        for p in pts {
            s.insert(p);
        }
        s
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn insert(&mut self, p: &LatticePoint) -> bool {
        let norm = p.norm();
        if norm > self.max_norm {
            self.max_norm = norm;
        }
        self.set.insert(pack_key(p, self.d, self.bits))
    }

    #[inline]
    pub fn contains(&self, p: &LatticePoint) -> bool {
        self.set.contains(&pack_key(p, self.d, self.bits))
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    /// Radius of the smallest origin-centered ball containing the set.
    pub fn bounding_radius(&self) -> f64 {
        self.max_norm
    }

    pub fn iter(&self) -> impl Iterator<Item = LatticePoint> + '_ {
        self.set.iter().map(|&k| unpack_key(k, self.d, self.bits))
    }

    /// Max pairwise Euclidean distance. O(|A|^2); meant for small sets.
    pub fn diameter(&self) -> f64 {
        let pts: Vec<_> = self.iter().collect();
        let mut best = 0.0f64;
        for i in 0..pts.len() {
            for j in (i + 1)..pts.len() {
                best = best.max(pts[i].dist(&pts[j]));
            }
        }
        best
    }
}

/// Exact visit-count map over lattice sites.
#[derive(Clone, Debug)]
pub struct SiteCounts {
    d: usize,
    bits: u32,
    map: FxHashMap<u128, u64>,
}

impl SiteCounts {
    pub fn new(d: usize) -> Self {
        SiteCounts {
            d,
            bits: pack_bits(d),
            map: FxHashMap::default(),
        }
    }

    #[inline]
    pub fn add(&mut self, p: &LatticePoint, k: u64) {
        *self.map.entry(pack_key(p, self.d, self.bits)).or_insert(0) += k;
    }

    #[inline]
    pub fn get(&self, p: &LatticePoint) -> u64 {
        self.map
            .get(&pack_key(p, self.d, self.bits))
            .copied()
            .unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.map.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (LatticePoint, u64)> + '_ {
        self.map
            .iter()
            .map(|(&k, &v)| (unpack_key(k, self.d, self.bits), v))
    }
}

/// A nearest-neighbor path `X_0..X_m` with its generating steps.
#[derive(Clone, Debug)]
pub struct WalkPath {
    pub d: usize,
    pub start: LatticePoint,
    /// Encoded steps: axis in the low bits, sign in bit 7.
    steps: Vec<u8>,
    positions: Vec<LatticePoint>,
}

impl WalkPath {
    #[inline]
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    #[inline]
    pub fn positions(&self) -> &[LatticePoint] {
        &self.positions
    }

    pub fn step(&self, k: usize) -> (usize, i64) {
        decode_step(self.steps[k])
    }

    /// Exact distinct-site set of positions `a..=b`.
    pub fn range_window(&self, a: usize, b: usize) -> Result<SiteSet> {
        if a > b || b >= self.positions.len() {
            return Err(Error::Domain(format!(
                "window [{a},{b}] outside path domain [0,{}]",
                self.positions.len() - 1
            )));
        }
        let mut s = SiteSet::new(self.d);
        for p in &self.positions[a..=b] {
            s.insert(p);
        }
        Ok(s)
    }
}

#[inline]
fn encode_step(axis: usize, sign: i64) -> u8 {
    axis as u8 | if sign > 0 { 0x80 } else { 0 }
}

#[inline]
fn decode_step(e: u8) -> (usize, i64) {
    ((e & 0x7f) as usize, if e & 0x80 != 0 { 1 } else { -1 })
}

/// Draw one step uniform over the `2d` unit vectors.
#[inline]
pub fn draw_step<R: Rng + ?Sized>(d: usize, rng: &mut R) -> (usize, i64) {
    let r = rng.random_range(0..2 * d as u32);
    ((r >> 1) as usize, if r & 1 == 1 { 1 } else { -1 })
}

fn check_dim(d: usize) -> Result<()> {
    if d < 1 || d > MAX_DIM {
        return Err(Error::Config(format!("dimension {d} outside [1,{MAX_DIM}]")));
    }
    Ok(())
}

/// Simple random walk of `n` i.i.d. uniform unit steps started at the origin.
pub fn sample_walk<R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> Result<WalkPath> {
    sample_walk_from(d, LatticePoint::origin(), n, rng)
}

pub fn sample_walk_from<R: Rng + ?Sized>(
    d: usize,
    start: LatticePoint,
    n: usize,
    rng: &mut R,
) -> Result<WalkPath> {
    check_dim(d)?;
    let mut steps = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n + 1);
    let mut pos = start;
    positions.push(pos);
    for _ in 0..n {
        let (axis, sign) = draw_step(d, rng);
        steps.push(encode_step(axis, sign));
        pos = pos.stepped(axis, sign);
        positions.push(pos);
    }
    Ok(WalkPath {
        d,
        start,
        steps,
        positions,
    })
}

/// Geometric on `{0,1,2,...}` with `P(X=k) = p(1-p)^k`, `p = 1/n`, by
/// inversion: `floor(log U / log(1-1/n))`, guarding `U = 0`.
pub fn sample_geometric<R: Rng + ?Sized>(n: u64, rng: &mut R) -> u64 {
    debug_assert!(n >= 1);
    if n == 1 {
        return 0;
    }
    let q = 1.0 - 1.0 / n as f64;
    let lq = q.ln();
    loop {
        let u: f64 = rng.random::<f64>();
        if u > 0.0 {
            return (u.ln() / lq) as u64;
        }
    }
}

/// Two-sided simple random walk from the origin, both branch lengths
/// independent `Geometric(1/n)`.
#[derive(Clone, Debug)]
pub struct TwoSidedWalk {
    pub d: usize,
    pub left_len: usize,
    pub right_len: usize,
    /// Position at time `j - left_len` is `positions[j]`.
    positions: Vec<LatticePoint>,
}

impl TwoSidedWalk {
    #[inline]
    pub fn position(&self, j: i64) -> LatticePoint {
        self.positions[(j + self.left_len as i64) as usize]
    }

    /// All positions, time-ordered from `-left_len` to `right_len`.
    #[inline]
    pub fn positions(&self) -> &[LatticePoint] {
        &self.positions
    }

    pub fn total_len(&self) -> usize {
        self.left_len + self.right_len
    }

    /// Exact distinct-site set of positions with times in `a..=b`.
    pub fn range_window(&self, a: i64, b: i64) -> Result<SiteSet> {
        if a > b || a < -(self.left_len as i64) || b > self.right_len as i64 {
            return Err(Error::Domain(format!(
                "window [{a},{b}] outside walk domain [{},{}]",
                -(self.left_len as i64),
                self.right_len
            )));
        }
        let mut s = SiteSet::new(self.d);
        for j in a..=b {
            s.insert(&self.position(j));
        }
        Ok(s)
    }

    pub fn max_norm(&self) -> f64 {
        self.positions
            .iter()
            .map(|p| p.norm())
            .fold(0.0, f64::max)
    }
}

/// Sample a two-sided walk, branches driven by two explicit streams.
pub fn sample_two_sided_split<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    d: usize,
    n: u64,
    left_rng: &mut R1,
    right_rng: &mut R2,
) -> Result<TwoSidedWalk> {
    check_dim(d)?;
    if n == 0 {
        return Err(Error::Config("kill parameter n must be >= 1".into()));
    }
    let left_len = sample_geometric(n, left_rng) as usize;
    let right_len = sample_geometric(n, right_rng) as usize;
    let mut positions = Vec::with_capacity(left_len + right_len + 1);
    // Left branch, built backwards from the origin.
    let mut pos = LatticePoint::origin();
    let mut left = Vec::with_capacity(left_len);
    for _ in 0..left_len {
        let (axis, sign) = draw_step(d, left_rng);
        pos = pos.stepped(axis, sign);
        left.push(pos);
    }
    positions.extend(left.iter().rev());
    positions.push(LatticePoint::origin());
    let mut pos = LatticePoint::origin();
    for _ in 0..right_len {
        let (axis, sign) = draw_step(d, right_rng);
        pos = pos.stepped(axis, sign);
        positions.push(pos);
    }
    Ok(TwoSidedWalk {
        d,
        left_len,
        right_len,
        positions,
    })
}

/// Sample a two-sided walk; the two branches get independent sub-streams
/// derived from `rng`.
pub fn sample_two_sided<R: Rng + ?Sized>(d: usize, n: u64, rng: &mut R) -> Result<TwoSidedWalk> {
    let mut left = ChaCha8Rng::seed_from_u64(rng.random());
    let mut right = ChaCha8Rng::seed_from_u64(rng.random());
    sample_two_sided_split(d, n, &mut left, &mut right)
}

/// All sites of the closed Euclidean ball `B(center, radius)` in `Z^d`.
pub fn ball(d: usize, center: &LatticePoint, radius: f64) -> Vec<LatticePoint> {
    let r = radius.floor() as i64;
    let r2 = radius * radius;
    let mut out = Vec::new();
    let mut cur = [0i64; MAX_DIM];
    fn rec(
        d: usize,
        axis: usize,
        r: i64,
        r2: f64,
        cur: &mut [i64; MAX_DIM],
        acc: f64,
        out: &mut Vec<LatticePoint>,
        center: &LatticePoint,
    ) {
        if axis == d {
            let mut c = [0i64; MAX_DIM];
            c[..d].copy_from_slice(&cur[..d]);
            let mut p = LatticePoint { c };
            p = p.add(center);
            out.push(p);
            return;
        }
        for v in -r..=r {
            let a = acc + (v * v) as f64;
            if a <= r2 {
                cur[axis] = v;
                rec(d, axis + 1, r, r2, cur, a, out, center);
            }
        }
        cur[axis] = 0;
    }
    rec(d, 0, r, r2, &mut cur, 0.0, &mut out, center);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    #[test]
    fn zero_step_walk_is_origin() {
        let mut rng = stream(1, &[0]);
        let w = sample_walk(6, 0, &mut rng).unwrap();
        assert_eq!(w.positions().len(), 1);
        assert!(w.positions()[0].is_origin());
    }

    #[test]
    fn invalid_dimension_rejected() {
        let mut rng = stream(1, &[0]);
        assert!(sample_walk(0, 10, &mut rng).is_err());
        assert!(sample_walk(MAX_DIM + 1, 10, &mut rng).is_err());
    }

    #[test]
    fn step_frequencies_uniform() {
        // d=6, n=10^4: per-direction frequency within 5 stderr of 1/12.
        let mut rng = stream(2, &[0]);
        let w = sample_walk(6, 10_000, &mut rng).unwrap();
        let mut counts = [0u64; 12];
        for k in 0..w.len() {
            let (axis, sign) = w.step(k);
            counts[axis * 2 + if sign > 0 { 1 } else { 0 }] += 1;
        }
        let p = 1.0f64 / 12.0;
        let stderr = (p * (1.0 - p) / 10_000.0).sqrt();
        for &c in &counts {
            let freq = c as f64 / 10_000.0;
            assert!(
                (freq - p).abs() <= 5.0 * stderr,
                "direction frequency {freq} too far from {p}"
            );
        }
    }

    #[test]
    fn two_step_return_probability_d5() {
        // P(X_2 = 0) = 1/10 in d=5: enumerate-by-hand value 2d (1/2d)^2 = 1/(2d).
        let trials = 1_000_000u64;
        let mut rng = stream(3, &[0]);
        let mut returns = 0u64;
        for _ in 0..trials {
            let (a1, s1) = draw_step(5, &mut rng);
            let (a2, s2) = draw_step(5, &mut rng);
            if a1 == a2 && s1 == -s2 {
                returns += 1;
            }
        }
        let p = returns as f64 / trials as f64;
        let stderr = (0.1 * 0.9 / trials as f64).sqrt();
        assert!((p - 0.1).abs() <= 5.0 * stderr, "p={p}");
    }

    #[test]
    fn geometric_pmf_matches() {
        // Empirical pmf at k in {0,1,2} within 4 stderr for n in {2,10,100}.
        let draws = 200_000u64;
        for (i, n) in [2u64, 10, 100].into_iter().enumerate() {
            let mut rng = stream(4, &[i as u64]);
            let mut counts = [0u64; 3];
            for _ in 0..draws {
                let k = sample_geometric(n, &mut rng);
                if k < 3 {
                    counts[k as usize] += 1;
                }
            }
            let p0 = 1.0 / n as f64;
            for k in 0..3 {
                let pk = p0 * (1.0 - p0).powi(k as i32);
                let stderr = (pk * (1.0 - pk) / draws as f64).sqrt();
                let freq = counts[k] as f64 / draws as f64;
                assert!(
                    (freq - pk).abs() <= 4.0 * stderr,
                    "n={n} k={k} freq={freq} pk={pk}"
                );
            }
        }
    }

    #[test]
    fn geometric_one_is_degenerate() {
        let mut rng = stream(5, &[0]);
        let w = sample_two_sided(6, 1, &mut rng).unwrap();
        assert_eq!(w.left_len, 0);
        assert_eq!(w.right_len, 0);
        let r = w.range_window(0, 0).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r.contains(&LatticePoint::origin()));
    }

    #[test]
    fn two_sided_mean_length() {
        // Sample mean of xi^r over 10^5 draws within 3 stderr of n-1 = 99.
        let n = 100u64;
        let draws = 100_000u64;
        let mut rng = stream(6, &[0]);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..draws {
            let k = sample_geometric(n, &mut rng) as f64;
            sum += k;
            sum_sq += k * k;
        }
        let mean = sum / draws as f64;
        let var = sum_sq / draws as f64 - mean * mean;
        let stderr = (var / draws as f64).sqrt();
        assert!((mean - 99.0).abs() <= 3.0 * stderr, "mean={mean}");
    }

    #[test]
    fn no_return_probability_decreases_in_n() {
        // P(0 not in R[1, xi_n^r]) decreases as n grows (monotone trend).
        let trials = 20_000;
        let mut avoid = Vec::new();
        for (i, n) in [2u64, 20, 200].into_iter().enumerate() {
            let mut hits = 0u64;
            for t in 0..trials {
                let mut rng = stream(7, &[i as u64, t]);
                let w = sample_two_sided(6, n, &mut rng).unwrap();
                let mut returned = false;
                for j in 1..=w.right_len as i64 {
                    if w.position(j).is_origin() {
                        returned = true;
                        break;
                    }
                }
                if !returned {
                    hits += 1;
                }
            }
            avoid.push(hits as f64 / trials as f64);
        }
        assert!(avoid[0] > avoid[1] && avoid[1] > avoid[2], "{avoid:?}");
    }

    #[test]
    fn range_window_trivial_and_bounds() {
        let mut rng = stream(8, &[0]);
        let w = sample_walk(6, 4, &mut rng).unwrap();
        let s = w.range_window(0, 0).unwrap();
        assert_eq!(s.len(), 1);
        assert!(s.contains(&w.start));
        assert!(w.range_window(2, 1).is_err());
        assert!(w.range_window(0, 5).is_err());
        let full = w.range_window(0, 4).unwrap();
        assert!(full.len() <= 5);
        // Membership matches the brute-force position list.
        for p in w.positions() {
            assert!(full.contains(p));
        }
    }

    #[test]
    fn two_sided_full_window_size_bound() {
        let mut rng = stream(9, &[0]);
        let w = sample_two_sided(5, 50, &mut rng).unwrap();
        let full = w
            .range_window(-(w.left_len as i64), w.right_len as i64)
            .unwrap();
        assert!(full.len() <= w.total_len() + 1);
    }

    #[test]
    fn branch_seed_swap_mirrors_law() {
        // Kolmogorov-Smirnov on right-range sizes: swapping the branch
        // streams turns the right branch law into the left branch law.
        let m = 4000;
        let mut a_sizes: Vec<usize> = Vec::new();
        let mut b_sizes: Vec<usize> = Vec::new();
        for t in 0..m {
            let mut l = stream(10, &[t, 0]);
            let mut r = stream(10, &[t, 1]);
            let w = sample_two_sided_split(6, 30, &mut l, &mut r).unwrap();
            a_sizes.push(w.range_window(0, w.right_len as i64).unwrap().len());
            let mut l = stream(10, &[t, 1]);
            let mut r = stream(10, &[t, 0]);
            let w = sample_two_sided_split(6, 30, &mut l, &mut r).unwrap();
            b_sizes.push(
                w.range_window(-(w.left_len as i64), 0).unwrap().len(),
            );
        }
        a_sizes.sort_unstable();
        b_sizes.sort_unstable();
        // Two-sample KS statistic.
        let mut ks = 0.0f64;
        let (mut i, mut j) = (0usize, 0usize);
        while i < a_sizes.len() && j < b_sizes.len() {
            if a_sizes[i] <= b_sizes[j] {
                i += 1;
            } else {
                j += 1;
            }
            ks = ks.max((i as f64 / m as f64 - j as f64 / m as f64).abs());
        }
        // 0.1% critical value for equal samples of size m.
        let crit = 1.95 * (2.0 / m as f64).sqrt();
        assert!(ks <= crit, "ks={ks} crit={crit}");
    }

    #[test]
    fn ball_counts() {
        assert_eq!(ball(2, &LatticePoint::origin(), 1.0).len(), 5);
        assert_eq!(ball(3, &LatticePoint::origin(), 1.0).len(), 7);
        // d=6 unit ball: origin + 12 neighbors.
        assert_eq!(ball(6, &LatticePoint::origin(), 1.0).len(), 13);
    }

    #[test]
    fn pack_roundtrip_extremes() {
        for d in [1usize, 5, 6, 7, 8, 12, 16] {
            let bits = pack_bits(d);
            let lim = (1i64 << (bits - 1)) - 1;
            let mut coords = vec![0i64; d];
            coords[0] = lim;
            if d > 1 {
                coords[d - 1] = -lim;
            }
            let p = LatticePoint::from_coords(&coords).unwrap();
            let k = pack_key(&p, d, bits);
            assert_eq!(unpack_key(k, d, bits), p);
        }
    }

    proptest! {
        #[test]
        fn positions_reconstruct_from_steps(seed in 0u64..1000, n in 0usize..200) {
            let mut rng = stream(seed, &[99]);
            let w = sample_walk(6, n, &mut rng).unwrap();
            let mut pos = w.start;
            prop_assert_eq!(w.positions()[0], pos);
            for k in 0..w.len() {
                let (axis, sign) = w.step(k);
                pos = pos.stepped(axis, sign);
                prop_assert_eq!(w.positions()[k + 1], pos);
            }
        }

        #[test]
        fn consecutive_two_sided_positions_are_neighbors(seed in 0u64..200) {
            let mut rng = stream(seed, &[98]);
            let w = sample_two_sided(5, 20, &mut rng).unwrap();
            let ps = w.positions();
            for k in 1..ps.len() {
                let diff = ps[k].sub(&ps[k - 1]);
                let nz: Vec<i64> = diff.coords(5).iter().copied().filter(|&v| v != 0).collect();
                prop_assert_eq!(nz.len(), 1);
                prop_assert!(nz[0].abs() == 1);
            }
        }
    }
}
