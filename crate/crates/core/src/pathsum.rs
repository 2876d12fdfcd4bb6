//! Fast approximate evaluation of `sum_j g(x_j - q)` over a long path.
//!
//! A balanced segment tree over the path stores, per segment, the centroid
//! and an enclosing radius. A query opens segments until they are far
//! enough away (`radius <= theta * distance` and entirely beyond the exact
//! table) to be collapsed into `count * a_d / dist^{d-2}`; near segments
//! bottom out in exact per-point evaluations. With the walk's diffusive
//! geometry a query touches `O(theta^{-2} log n)` nodes.

use crate::green::GreenEval;
use crate::lattice::LatticePoint;
use crate::Result;
use crate::error::Error;

const LEAF_SIZE: usize = 4;
const TABLE_DIM_CAP: usize = 8;

struct Node {
    start: u32,
    len: u32,
    centroid: [f64; TABLE_DIM_CAP],
    radius: f64,
    // Children at 2k+1, 2k+2 in the heap layout; leaves have none.
}

pub struct PathSummer<'a> {
    eval: &'a GreenEval,
    d: usize,
    points: Vec<LatticePoint>,
    nodes: Vec<Node>,
    theta: f64,
    a_d: f64,
    crossover: f64,
}

impl<'a> PathSummer<'a> {
    pub fn new(eval: &'a GreenEval, points: &[LatticePoint], theta: f64) -> Result<Self> {
        let d = eval.d;
        if d > TABLE_DIM_CAP {
            return Err(Error::Config(format!(
                "path summation supports d <= {TABLE_DIM_CAP}, got {d}"
            )));
        }
        if points.is_empty() {
            return Err(Error::Config("empty path".into()));
        }
        if !(0.0 < theta && theta < 0.5) {
            return Err(Error::Config(format!("theta {theta} outside (0, 0.5)")));
        }
        let mut summer = PathSummer {
            eval,
            d,
            points: points.to_vec(),
            nodes: Vec::new(),
            theta,
            a_d: eval.constants().a_d,
            crossover: eval.crossover_radius() as f64,
        };
        summer.build(0, 0, points.len());
        Ok(summer)
    }

    /// Heap-layout build; node `idx` covers `points[start..start+len]`.
    fn build(&mut self, idx: usize, start: usize, len: usize) {
        if self.nodes.len() <= idx {
            self.nodes.resize_with(idx + 1, || Node {
                start: 0,
                len: 0,
                centroid: [0.0; TABLE_DIM_CAP],
                radius: 0.0,
            });
        }
        let mut centroid = [0.0f64; TABLE_DIM_CAP];
        for p in &self.points[start..start + len] {
            for (i, &c) in p.coords(self.d).iter().enumerate() {
                centroid[i] += c as f64;
            }
        }
        for c in centroid.iter_mut() {
            *c /= len as f64;
        }
        let mut radius: f64 = 0.0;
        for p in &self.points[start..start + len] {
            let mut dist_sq = 0.0;
            for (i, &c) in p.coords(self.d).iter().enumerate() {
                let dc = c as f64 - centroid[i];
                dist_sq += dc * dc;
            }
            radius = radius.max(dist_sq);
        }
        let radius = radius.sqrt();
        self.nodes[idx] = Node {
            start: start as u32,
            len: len as u32,
            centroid,
            radius,
        };
        if len > LEAF_SIZE {
            let half = len / 2;
            self.build(2 * idx + 1, start, half);
            self.build(2 * idx + 2, start + half, len - half);
        }
    }

    #[inline]
    fn dist_to_centroid(&self, node: &Node, q: &LatticePoint) -> f64 {
        let mut s = 0.0;
        for (i, &c) in q.coords(self.d).iter().enumerate() {
            let dc = c as f64 - node.centroid[i];
            s += dc * dc;
        }
        s.sqrt()
    }

    /// `sum_j g(points[j] - q)`.
    pub fn sum_g(&self, q: &LatticePoint) -> f64 {
        self.query(0, q)
    }

    fn query(&self, idx: usize, q: &LatticePoint) -> f64 {
        let node = &self.nodes[idx];
        let len = node.len as usize;
        if len > LEAF_SIZE {
            let dist = self.dist_to_centroid(node, q);
            if node.radius <= self.theta * dist && dist - node.radius > self.crossover {
                // Entire segment is in the asymptotic regime and well
                // separated: collapse to the centroid.
                return len as f64 * self.a_d / dist.powi(self.d as i32 - 2);
            }
            return self.query(2 * idx + 1, q) + self.query(2 * idx + 2, q);
        }
        let start = node.start as usize;
        let mut acc = 0.0;
        for p in &self.points[start..start + len] {
            acc += self.eval.g(&p.sub(q));
        }
        acc
    }

    /// Exact direct sum, for validation.
    pub fn sum_g_direct(&self, q: &LatticePoint) -> f64 {
        self.points.iter().map(|p| self.eval.g(&p.sub(q))).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::green::GreenEval;
    use crate::lattice::sample_walk;
    use crate::rng::stream;

    #[test]
    fn matches_direct_sum_on_walk() {
        let eval = GreenEval::for_dim(6).unwrap();
        let mut rng = stream(50, &[0]);
        let walk = sample_walk(6, 2000, &mut rng).unwrap();
        let summer = PathSummer::new(&eval, walk.positions(), 0.2).unwrap();
        let queries = [
            LatticePoint::origin(),
            LatticePoint::from_coords(&[30, 0, 0, 0, 0, 0]).unwrap(),
            LatticePoint::from_coords(&[-10, 15, 3, 0, 0, 0]).unwrap(),
            walk.positions()[1000],
        ];
        for q in &queries {
            let fast = summer.sum_g(q);
            let exact = summer.sum_g_direct(q);
            let rel = (fast / exact - 1.0).abs();
            assert!(rel <= 0.01, "query {:?}: rel err {rel}", q.coords(6));
        }
    }

    #[test]
    fn small_path_is_exact() {
        let eval = GreenEval::for_dim(6).unwrap();
        let pts = [
            LatticePoint::origin(),
            LatticePoint::from_coords(&[1, 0, 0, 0, 0, 0]).unwrap(),
        ];
        let summer = PathSummer::new(&eval, &pts, 0.2).unwrap();
        let q = LatticePoint::from_coords(&[3, 3, 0, 0, 0, 0]).unwrap();
        assert_eq!(summer.sum_g(&q), summer.sum_g_direct(&q));
    }

    #[test]
    fn bad_parameters_rejected() {
        let eval = GreenEval::for_dim(6).unwrap();
        assert!(PathSummer::new(&eval, &[], 0.2).is_err());
        let pts = [LatticePoint::origin()];
        assert!(PathSummer::new(&eval, &pts, 0.9).is_err());
    }
}
