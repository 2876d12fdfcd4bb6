//! The walk Green's function `g` and its self-convolution
//! `G(z) = sum_x g(x-z) g(x)`, evaluated exactly on a ball by dynamic
//! programming and asymptotically outside it.
//!
//! The DP runs on symmetry orbits of `Z^d` (the walk law is invariant under
//! coordinate permutations and sign flips), which shrinks the state space by
//! a factor of `2^d d!`. The truncated series are completed with a
//! local-CLT tail integral, so the number of convolution steps only has to
//! cover the regime where the Gaussian approximation is still poor.
//!
//! Series identities used here:
//!   g(z) = sum_n p_n(z),        G(z) = sum_n (n+1) p_n(z),
//! the second of which is verified against the defining double sum by a
//! brute-force oracle in the test suite.

use crate::error::Error;
use crate::lattice::{LatticePoint, MAX_DIM};
use crate::Result;
use rayon::prelude::*;
use rustc_hash::FxHashMap;
use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

/// Gamma function at `half/2` for positive integer `half`, by recurrence
/// from `Gamma(1) = 1` and `Gamma(1/2) = sqrt(pi)`.
pub fn gamma_half(half: u32) -> f64 {
    assert!(half >= 1);
    let mut s = if half % 2 == 0 { 1.0 } else { 0.5 };
    let mut val = if half % 2 == 0 {
        1.0
    } else {
        std::f64::consts::PI.sqrt()
    };
    while (2.0 * s) < half as f64 {
        val *= s;
        s += 1.0;
    }
    val
}

/// Lower incomplete gamma function, by its power series.
fn lower_gamma(s: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let mut term = x.powf(s) * (-x).exp() / s;
    let mut sum = term;
    let mut k = 1.0;
    while term.abs() > 1e-17 * sum.abs() && k < 600.0 {
        term *= x / (s + k);
        sum += term;
        k += 1.0;
    }
    sum
}

/// Closed-form constants of the `g` and `G` asymptotics.
#[derive(Clone, Copy, Debug)]
pub struct AsymptoticConstants {
    pub d: usize,
    /// `g(z) ~ a_d / |z|^{d-2}` with `a_d = (d/2) Gamma(d/2-1) pi^{-d/2}`.
    pub a_d: f64,
    /// `G(z) ~ c_d / |z|^{d-4}` with `c_d = d^2/(2(d-4)) Gamma(d/2-1) pi^{-d/2}`.
    pub green_c_d: f64,
}

impl AsymptoticConstants {
    pub fn new(d: usize) -> Result<Self> {
        if d < 5 {
            return Err(Error::Config(format!("asymptotic constants need d >= 5, got {d}")));
        }
        let gam = gamma_half(d as u32 - 2); // Gamma(d/2 - 1)
        let pi_pow = std::f64::consts::PI.powf(d as f64 / 2.0);
        let a_d = (d as f64 / 2.0) * gam / pi_pow;
        let green_c_d = (d as f64) * (d as f64) / (2.0 * (d as f64 - 4.0)) * gam / pi_pow;
        Ok(AsymptoticConstants { d, a_d, green_c_d })
    }
}

/// `a_d / |z|^{d-2}`.
pub fn asymptotic_g(d: usize, z: &LatticePoint) -> Result<f64> {
    let r = z.norm();
    if r == 0.0 {
        return Err(Error::Domain("asymptotic g undefined at the origin".into()));
    }
    Ok(AsymptoticConstants::new(d)?.a_d / r.powi(d as i32 - 2))
}

/// `c_d / |z|^{d-4}`.
pub fn asymptotic_big_g(d: usize, z: &LatticePoint) -> Result<f64> {
    let r = z.norm();
    if r == 0.0 {
        return Err(Error::Domain("asymptotic G undefined at the origin".into()));
    }
    Ok(AsymptoticConstants::new(d)?.green_c_d / r.powi(d as i32 - 4))
}

const MAX_TABLE_DIM: usize = 8;

/// Canonical orbit key: absolute coordinates sorted descending, one byte
/// per coordinate. Valid while all |coordinates| <= 127 and d <= 8.
#[inline]
fn canonical_key(coords: &[i64]) -> u64 {
    let mut bytes = [0u8; 8];
    let mut tmp = [0u8; MAX_TABLE_DIM];
    for (i, &c) in coords.iter().enumerate() {
        tmp[i] = c.unsigned_abs() as u8;
    }
    let d = coords.len();
    tmp[..d].sort_unstable_by(|a, b| b.cmp(a));
    bytes[..d].copy_from_slice(&tmp[..d]);
    u64::from_le_bytes(bytes)
}

/// Exact `g` and `G` on the ball `B(0, radius)`, stored per symmetry orbit.
pub struct GreenTable {
    pub d: usize,
    pub radius: i64,
    /// Series length used for `g`; `G` uses `2 * n_steps`.
    pub n_steps: usize,
    /// Certified bound on the absolute error of the stored `g` values.
    pub tail_bound: f64,
    orbits: FxHashMap<u64, u32>,
    g_vals: Vec<f64>,
    big_g_vals: Vec<f64>,
}

impl GreenTable {
    #[inline]
    fn orbit_of(&self, z: &LatticePoint) -> Option<u32> {
        let coords = z.coords(self.d);
        if coords.iter().any(|c| c.unsigned_abs() > 127) {
            return None;
        }
        self.orbits.get(&canonical_key(coords)).copied()
    }

    pub fn contains(&self, z: &LatticePoint) -> bool {
        self.orbit_of(z).is_some()
    }

    /// Exact `g(z)`, if `z` is inside the table domain.
    #[inline]
    pub fn g(&self, z: &LatticePoint) -> Option<f64> {
        self.orbit_of(z).map(|o| self.g_vals[o as usize])
    }

    /// Exact `G(z)`, if `z` is inside the table domain.
    #[inline]
    pub fn big_g(&self, z: &LatticePoint) -> Option<f64> {
        self.orbit_of(z).map(|o| self.big_g_vals[o as usize])
    }

    pub fn g0(&self) -> f64 {
        self.g(&LatticePoint::origin()).expect("origin is always tabulated")
    }

    pub fn big_g0(&self) -> f64 {
        self.big_g(&LatticePoint::origin()).expect("origin is always tabulated")
    }

    pub fn orbit_count(&self) -> usize {
        self.g_vals.len()
    }

    /// Iterate orbit values as (representative norm^2, g, G).
    pub fn orbit_values(&self) -> impl Iterator<Item = (u64, f64, f64)> + '_ {
        self.orbits.iter().map(move |(&key, &idx)| {
            let bytes = key.to_le_bytes();
            let norm_sq: u64 = bytes.iter().map(|&b| (b as u64) * (b as u64)).sum();
            (norm_sq, self.g_vals[idx as usize], self.big_g_vals[idx as usize])
        })
    }
}

/// Domain margin added around the requested ball so that mass escaping the
/// DP window within `2N` steps cannot meaningfully return.
fn dp_margin(n_steps: usize) -> i64 {
    (1.3 * (2.0 * n_steps as f64).sqrt()).ceil() as i64
}

fn clt_prefactor(d: usize) -> f64 {
    (d as f64 / (2.0 * std::f64::consts::PI)).powf(d as f64 / 2.0)
}

/// Tail integral of `sum_{n>N} p_n(z)` under the local CLT,
/// `kappa * beta^{1-d/2} * gamma(d/2-1, beta/N)` with `beta = d r^2 / 2`.
fn clt_tail_g(d: usize, norm_sq: f64, n: usize) -> f64 {
    let kappa = clt_prefactor(d);
    let s = d as f64 / 2.0 - 1.0;
    let beta = d as f64 * norm_sq / 2.0;
    if beta == 0.0 {
        kappa * (n as f64).powf(-s) / s
    } else {
        kappa * beta.powf(-s) * lower_gamma(s, beta / n as f64)
    }
}

/// Tail integral of `sum_{n>M} (n+1) p_n(z)`.
fn clt_tail_big_g(d: usize, norm_sq: f64, m: usize) -> f64 {
    let kappa = clt_prefactor(d);
    let s1 = d as f64 / 2.0 - 2.0;
    let s2 = d as f64 / 2.0 - 1.0;
    let beta = d as f64 * norm_sq / 2.0;
    if beta == 0.0 {
        kappa * ((m as f64).powf(-s1) / s1 + (m as f64).powf(-s2) / s2)
    } else {
        kappa
            * (beta.powf(-s1) * lower_gamma(s1, beta / m as f64)
                + beta.powf(-s2) * lower_gamma(s2, beta / m as f64))
    }
}

/// Build the `g`/`G` table on `B(0, radius)` from an `N`-step (`2N` for `G`)
/// convolution DP plus the CLT tail completion.
///
/// Fails with a required-`N` estimate if the certified error bound exceeds
/// `rel_tol * g(0)`.
/// Orbit representatives under coordinate permutation and sign flips:
/// non-increasing coordinate vectors with norm <= window.
fn enumerate_reps(d: usize, window: i64) -> Vec<[u8; MAX_TABLE_DIM]> {
    let w2 = window * window;
    let mut reps: Vec<[u8; MAX_TABLE_DIM]> = Vec::new();
    let mut cur = [0u8; MAX_TABLE_DIM];
    fn rec(
        d: usize,
        axis: usize,
        hi: i64,
        left: i64,
        cur: &mut [u8; MAX_TABLE_DIM],
        reps: &mut Vec<[u8; MAX_TABLE_DIM]>,
    ) {
        if axis == d {
            reps.push(*cur);
            return;
        }
        let mut v = hi.min((left as f64).sqrt() as i64 + 1);
        while v * v > left {
            v -= 1;
        }
        while v >= 0 {
            cur[axis] = v as u8;
            rec(d, axis + 1, v, left - v * v, cur, reps);
            v -= 1;
        }
        cur[axis] = 0;
    }
    rec(d, 0, window, w2, &mut cur, &mut reps);
    reps
}

/// Neighbor structure in CSR form: for each orbit, the orbits reachable in
/// one step with multiplicities (out of 2d).
fn orbit_csr(
    d: usize,
    window: i64,
    reps: &[[u8; MAX_TABLE_DIM]],
    index: &FxHashMap<u64, u32>,
) -> (Vec<u32>, Vec<u32>, Vec<u8>) {
    let w2 = window * window;
    let rows: Vec<(Vec<u32>, Vec<u8>)> = reps
        .par_iter()
        .map(|rep| {
            let mut cols: Vec<u32> = Vec::with_capacity(2 * d);
            let mut wts: Vec<u8> = Vec::with_capacity(2 * d);
            let mut coords = [0i64; MAX_TABLE_DIM];
            for i in 0..d {
                coords[i] = rep[i] as i64;
            }
            for axis in 0..d {
                for delta in [1i64, -1] {
                    let mut nb = coords;
                    nb[axis] += delta;
                    let norm_sq: i64 = nb[..d].iter().map(|&c| c * c).sum();
                    if norm_sq > w2 {
                        continue;
                    }
                    let key = canonical_key(&nb[..d]);
                    let idx = index[&key];
                    match cols.iter().position(|&c| c == idx) {
                        Some(p) => wts[p] += 1,
                        None => {
                            cols.push(idx);
                            wts.push(1);
                        }
                    }
                }
            }
            (cols, wts)
        })
        .collect();
    let mut row_ptr: Vec<u32> = Vec::with_capacity(reps.len() + 1);
    row_ptr.push(0);
    let mut col: Vec<u32> = Vec::new();
    let mut wt: Vec<u8> = Vec::new();
    for (c, w) in rows {
        col.extend_from_slice(&c);
        wt.extend_from_slice(&w);
        row_ptr.push(col.len() as u32);
    }
    (row_ptr, col, wt)
}

/// Return probabilities `p_k(0)` for `k = 0..=n_max`, by the same
/// absorbing-window orbit DP as the table build. The window is generous
/// enough that the absorbed (escape-and-return) mass is far below 1e-3
/// relative for the k where `p_k(0)` is not already negligible.
pub fn return_probabilities(d: usize, n_max: usize) -> Result<Vec<f64>> {
    if !(5..=MAX_TABLE_DIM).contains(&d) {
        return Err(Error::Config(format!(
            "return probabilities support 5 <= d <= {MAX_TABLE_DIM}, got {d}"
        )));
    }
    let window = ((1.6 * (n_max as f64).sqrt()).ceil() as i64).max(4);
    if window > 127 {
        return Err(Error::Config(format!(
            "DP window {window} exceeds the byte-packed coordinate range"
        )));
    }
    let reps = enumerate_reps(d, window);
    let mut index: FxHashMap<u64, u32> = FxHashMap::default();
    index.reserve(reps.len());
    for (i, rep) in reps.iter().enumerate() {
        index.insert(u64::from_le_bytes(*rep), i as u32);
    }
    let (row_ptr, col, wt) = orbit_csr(d, window, &reps, &index);
    let origin = index[&0u64] as usize;
    let n_orbits = reps.len();
    let mut cur_p = vec![0.0f64; n_orbits];
    let mut next_p = vec![0.0f64; n_orbits];
    cur_p[origin] = 1.0;
    let inv_2d = 1.0 / (2.0 * d as f64);
    let mut out = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        out.push(cur_p[origin]);
        if n == n_max {
            break;
        }
        next_p.par_iter_mut().enumerate().for_each(|(o, slot)| {
            let lo = row_ptr[o] as usize;
            let hi = row_ptr[o + 1] as usize;
            let mut acc = 0.0;
            for k in lo..hi {
                acc += wt[k] as f64 * cur_p[col[k] as usize];
            }
            *slot = acc * inv_2d;
        });
        std::mem::swap(&mut cur_p, &mut next_p);
    }
    Ok(out)
}

pub fn build_green_table(d: usize, radius: i64, n_steps: usize, rel_tol: f64) -> Result<GreenTable> {
    if !(5..=MAX_TABLE_DIM).contains(&d) {
        return Err(Error::Config(format!(
            "green tables support 5 <= d <= {MAX_TABLE_DIM}, got {d}"
        )));
    }
    if radius < 1 || n_steps < 10 || !(rel_tol > 0.0) {
        return Err(Error::Config(format!(
            "invalid table parameters: radius {radius}, N {n_steps}, tol {rel_tol}"
        )));
    }
    let margin = dp_margin(n_steps);
    let window = radius + margin;
    if window > 127 {
        return Err(Error::Config(format!(
            "DP window {window} exceeds the byte-packed coordinate range"
        )));
    }
    let consts = AsymptoticConstants::new(d)?;
    // Certified error on g: CLT correction residual + escape-and-return mass.
    let kappa = clt_prefactor(d);
    let clt_err = 5.0 * kappa * (n_steps as f64).powf(-(d as f64) / 2.0);
    let escape_err = consts.a_d / (margin as f64).powi(d as i32 - 2);
    let tail_bound = clt_err + escape_err;
    // g(0) >= 1, so gate against rel_tol directly.
    if tail_bound > rel_tol {
        let required = (10.0 * kappa / rel_tol).powf(2.0 / d as f64).ceil() as usize;
        return Err(Error::Tolerance {
            tol: rel_tol,
            n: n_steps,
            required,
        });
    }

    let reps = enumerate_reps(d, window);
    let mut index: FxHashMap<u64, u32> = FxHashMap::default();
    index.reserve(reps.len());
    for (i, rep) in reps.iter().enumerate() {
        index.insert(u64::from_le_bytes(*rep), i as u32);
    }
    let (row_ptr, col, wt) = orbit_csr(d, window, &reps, &index);

    // DP over p_n, accumulating both series.
    let m_steps = 2 * n_steps;
    let n_orbits = reps.len();
    let mut cur_p = vec![0.0f64; n_orbits];
    let mut next_p = vec![0.0f64; n_orbits];
    let mut g_acc = vec![0.0f64; n_orbits];
    let mut big_g_acc = vec![0.0f64; n_orbits];
    cur_p[index[&0u64] as usize] = 1.0;
    let inv_2d = 1.0 / (2.0 * d as f64);
    for n in 0..=m_steps {
        if n <= n_steps {
            for o in 0..n_orbits {
                g_acc[o] += cur_p[o];
            }
        }
        let weight = (n + 1) as f64;
        for o in 0..n_orbits {
            big_g_acc[o] += weight * cur_p[o];
        }
        if n == m_steps {
            break;
        }
        next_p
            .par_iter_mut()
            .enumerate()
            .for_each(|(o, out)| {
                let lo = row_ptr[o] as usize;
                let hi = row_ptr[o + 1] as usize;
                let mut acc = 0.0;
                for k in lo..hi {
                    acc += wt[k] as f64 * cur_p[col[k] as usize];
                }
                *out = acc * inv_2d;
            });
        std::mem::swap(&mut cur_p, &mut next_p);
    }

    // Keep only orbits inside the requested ball, completing each series
    // with its CLT tail.
    let r2 = radius * radius;
    let mut orbits: FxHashMap<u64, u32> = FxHashMap::default();
    let mut g_vals = Vec::new();
    let mut big_g_vals = Vec::new();
    for (i, rep) in reps.iter().enumerate() {
        let norm_sq: i64 = rep[..d].iter().map(|&c| (c as i64) * (c as i64)).sum();
        if norm_sq > r2 {
            continue;
        }
        let idx = g_vals.len() as u32;
        orbits.insert(u64::from_le_bytes(*rep), idx);
        g_vals.push(g_acc[i] + clt_tail_g(d, norm_sq as f64, n_steps));
        big_g_vals.push(big_g_acc[i] + clt_tail_big_g(d, norm_sq as f64, m_steps));
    }

    Ok(GreenTable {
        d,
        radius,
        n_steps,
        tail_bound,
        orbits,
        g_vals,
        big_g_vals,
    })
}

/// `|G(z+h)/G(z) - 1| * |z| / |h|`, the normalized gradient ratio.
pub fn gradient_ratio_check(table: &GreenTable, z: &LatticePoint, h: &LatticePoint) -> Result<f64> {
    if h.is_origin() {
        return Ok(0.0);
    }
    let nz = z.norm();
    let nh = h.norm();
    if nh > nz / 2.0 {
        return Err(Error::Domain(format!("|h| = {nh} exceeds |z|/2 = {}", nz / 2.0)));
    }
    let zh = z.add(h);
    let gz = table
        .big_g(z)
        .ok_or_else(|| Error::Domain("z outside table domain".into()))?;
    let gzh = table
        .big_g(&zh)
        .ok_or_else(|| Error::Domain("z+h outside table domain".into()))?;
    Ok((gzh / gz - 1.0).abs() * nz / nh)
}

// ---------------------------------------------------------------------------
// Table files.
// ---------------------------------------------------------------------------

/// Write the table, one record per lattice site of `B(0, radius)` in
/// lexicographic order. Values are printed with 17 significant digits so the
/// round-trip is bit-exact.
pub fn write_table(table: &GreenTable, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    writeln!(
        w,
        "GREENTABLE v1 {} {} {} {:.16e}",
        table.d, table.radius, table.n_steps, table.tail_bound
    )?;
    let d = table.d;
    let r = table.radius;
    let r2 = r * r;
    let mut coords = [0i64; MAX_DIM];
    // Streaming lexicographic recursion; the ball can be large.
    fn rec(
        table: &GreenTable,
        w: &mut impl Write,
        coords: &mut [i64; MAX_DIM],
        axis: usize,
        left: i64,
        d: usize,
        r: i64,
    ) -> std::io::Result<()> {
        if axis == d {
            let p = LatticePoint::from_coords(&coords[..d]).expect("dimension checked");
            let g = table.g(&p).expect("site inside radius");
            let big_g = table.big_g(&p).expect("site inside radius");
            for (i, c) in coords[..d].iter().enumerate() {
                if i > 0 {
                    write!(w, " ")?;
                }
                write!(w, "{c}")?;
            }
            writeln!(w, " {g:.16e} {big_g:.16e}")?;
            return Ok(());
        }
        for v in -r..=r {
            if v * v <= left {
                coords[axis] = v;
                rec(table, w, coords, axis + 1, left - v * v, d, r)?;
            }
        }
        coords[axis] = 0;
        Ok(())
    }
    rec(table, &mut w, &mut coords, 0, r2, d, r)?;
    w.flush()?;
    Ok(())
}

/// Read a table file written by [`write_table`].
pub fn read_table(path: &Path) -> Result<GreenTable> {
    let f = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(f).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty table file".into()))??;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 6 || parts[0] != "GREENTABLE" || parts[1] != "v1" {
        return Err(Error::Parse(format!("bad table header: {header:?}")));
    }
    let d: usize = parts[2]
        .parse()
        .map_err(|_| Error::Parse("bad dimension in header".into()))?;
    let radius: i64 = parts[3]
        .parse()
        .map_err(|_| Error::Parse("bad radius in header".into()))?;
    let n_steps: usize = parts[4]
        .parse()
        .map_err(|_| Error::Parse("bad step count in header".into()))?;
    let tail_bound: f64 = parts[5]
        .parse()
        .map_err(|_| Error::Parse("bad tail bound in header".into()))?;
    if !(5..=MAX_TABLE_DIM).contains(&d) {
        return Err(Error::Parse(format!("unsupported dimension {d} in table file")));
    }
    let mut orbits: FxHashMap<u64, u32> = FxHashMap::default();
    let mut g_vals: Vec<f64> = Vec::new();
    let mut big_g_vals: Vec<f64> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != d + 2 {
            return Err(Error::Parse(format!(
                "line {}: expected {} fields, got {}",
                lineno + 2,
                d + 2,
                fields.len()
            )));
        }
        let mut coords = [0i64; MAX_TABLE_DIM];
        for i in 0..d {
            coords[i] = fields[i]
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad coordinate", lineno + 2)))?;
        }
        let g: f64 = fields[d]
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad g value", lineno + 2)))?;
        let big_g: f64 = fields[d + 1]
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad G value", lineno + 2)))?;
        let key = canonical_key(&coords[..d]);
        match orbits.get(&key) {
            Some(&idx) => {
                if g_vals[idx as usize].to_bits() != g.to_bits()
                    || big_g_vals[idx as usize].to_bits() != big_g.to_bits()
                {
                    return Err(Error::Parse(format!(
                        "line {}: value disagrees with its symmetry orbit",
                        lineno + 2
                    )));
                }
            }
            None => {
                orbits.insert(key, g_vals.len() as u32);
                g_vals.push(g);
                big_g_vals.push(big_g);
            }
        }
    }
    if g_vals.is_empty() {
        return Err(Error::Parse("table file has no records".into()));
    }
    Ok(GreenTable {
        d,
        radius,
        n_steps,
        tail_bound,
        orbits,
        g_vals,
        big_g_vals,
    })
}

// ---------------------------------------------------------------------------
// Cache and the table-or-asymptotic evaluator.
// ---------------------------------------------------------------------------

type CacheKey = (usize, i64, usize, u64);

fn cache() -> &'static Mutex<HashMap<CacheKey, Arc<GreenTable>>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<GreenTable>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Build-or-reuse a table; keyed by (d, radius, N, tol) for the process
/// lifetime.
pub fn cached_table(d: usize, radius: i64, n_steps: usize, rel_tol: f64) -> Result<Arc<GreenTable>> {
    let key = (d, radius, n_steps, rel_tol.to_bits());
    if let Some(t) = cache().lock().unwrap().get(&key) {
        return Ok(Arc::clone(t));
    }
    let table = Arc::new(build_green_table(d, radius, n_steps, rel_tol)?);
    cache()
        .lock()
        .unwrap()
        .entry(key)
        .or_insert_with(|| Arc::clone(&table));
    Ok(table)
}

/// Default table parameters per dimension: (radius, N, rel_tol).
///
/// d = 5 needs a wide ball (the convolution oracle sums `g` over a large
/// domain) but its series converges slowly, hence the looser tolerance.
pub fn default_table_params(d: usize) -> Result<(i64, usize, f64)> {
    Ok(match d {
        5 => (28, 250, 1e-4),
        6 => (12, 300, 1e-6),
        7 => (12, 200, 1e-5),
        8 => (10, 150, 1e-4),
        _ => {
            return Err(Error::Config(format!(
                "no default green table for d = {d}"
            )))
        }
    })
}

pub fn default_table(d: usize) -> Result<Arc<GreenTable>> {
    let (r, n, tol) = default_table_params(d)?;
    cached_table(d, r, n, tol)
}

/// Evaluator backed by a table for near arguments with asymptotic fallback
/// beyond the table radius.
#[derive(Clone)]
pub struct GreenEval {
    pub d: usize,
    table: Arc<GreenTable>,
    consts: AsymptoticConstants,
    g0: f64,
}

impl GreenEval {
    pub fn new(table: Arc<GreenTable>) -> Result<Self> {
        let consts = AsymptoticConstants::new(table.d)?;
        let g0 = table.g0();
        Ok(GreenEval {
            d: table.d,
            table,
            consts,
            g0,
        })
    }

    pub fn for_dim(d: usize) -> Result<Self> {
        GreenEval::new(default_table(d)?)
    }

    /// Radius below which values are exact table entries.
    pub fn crossover_radius(&self) -> i64 {
        self.table.radius
    }

    pub fn table(&self) -> &GreenTable {
        &self.table
    }

    #[inline]
    pub fn g0(&self) -> f64 {
        self.g0
    }

    #[inline]
    pub fn g(&self, z: &LatticePoint) -> f64 {
        match self.table.g(z) {
            Some(v) => v,
            None => self.consts.a_d / z.norm().powi(self.d as i32 - 2),
        }
    }

    #[inline]
    pub fn big_g(&self, z: &LatticePoint) -> f64 {
        match self.table.big_g(z) {
            Some(v) => v,
            None => self.consts.green_c_d / z.norm().powi(self.d as i32 - 4),
        }
    }

    /// `g(x, y) = g(y - x)`.
    #[inline]
    pub fn g_between(&self, x: &LatticePoint, y: &LatticePoint) -> f64 {
        self.g(&y.sub(x))
    }

    pub fn constants(&self) -> AsymptoticConstants {
        self.consts
    }
}
