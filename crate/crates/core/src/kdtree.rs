//! Exact nearest-neighbor queries over a fixed point set.
//!
//! Distances are compared as squared Euclidean norms computed by
//! [`dist2`]; among equidistant candidates the smallest index wins, so query
//! results are fully deterministic and agree with a linear scan.

use crate::{Error, Result, Vec3};

const LEAF_SIZE: usize = 8;

/// Squared Euclidean distance, the single metric used by every query.
#[inline]
pub fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Immutable kd-tree; safe to share between threads for concurrent queries.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[inline]
fn better(d: f64, i: usize, best_d: f64, best_i: usize) -> bool {
    d < best_d || (d == best_d && i < best_i)
}

impl SpatialIndex {
    pub fn new(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        let mut index = SpatialIndex {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        index.build(0, points.len());
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        if hi[axis] <= lo[axis] {
            // all coincident
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// Index of the stored point closest to `query` (smallest index on ties).
    pub fn nearest(&self, query: &Vec3) -> usize {
        let mut best = (f64::INFINITY, usize::MAX);
        self.nearest_rec(0, query, &mut best);
        best.1
    }

    /// Nearest index together with its squared distance.
    pub fn nearest_with_dist2(&self, query: &Vec3) -> (usize, f64) {
        let i = self.nearest(query);
        (i, dist2(query, &self.points[i]))
    }

    fn nearest_rec(&self, node: usize, q: &Vec3, best: &mut (f64, usize)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(q, &self.points[i]);
                    if better(d, i, best.0, best.1) {
                        *best = (d, i);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near, q, best);
                // equality must still descend so ties can resolve to a smaller index
                if diff * diff <= best.0 {
                    self.nearest_rec(far, q, best);
                }
            }
        }
    }

    /// The `k` closest stored points, nearest first, ties by index.
    pub fn k_nearest(&self, query: &Vec3, k: usize) -> Vec<usize> {
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.knn_rec(0, query, k, &mut heap);
        }
        heap.into_iter().map(|(_, i)| i).collect()
    }

    fn knn_rec(&self, node: usize, q: &Vec3, k: usize, found: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(q, &self.points[i]);
                    if found.len() == k {
                        let (wd, wi) = found[k - 1];
                        if !better(d, i, wd, wi) {
                            continue;
                        }
                        found.pop();
                    }
                    let pos = found.partition_point(|&(fd, fi)| better(fd, fi, d, i));
                    found.insert(pos, (d, i));
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near, q, k, found);
                if found.len() < k || diff * diff <= found[k - 1].0 {
                    self.knn_rec(far, q, k, found);
                }
            }
        }
    }
}

/// Reference linear scan with the same tie rule; used by tests and tiny inputs.
pub fn linear_nearest(points: &[Vec3], query: &Vec3) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(query, p);
        match best {
            Some((bd, bi)) if !better(d, i, bd, bi) => {}
            _ => best = Some((d, i)),
        }
    }
    best.map(|(_, i)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_hit_and_simple_query() {
        let pts = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
        let idx = SpatialIndex::new(&pts).unwrap();
        assert_eq!(idx.nearest(&pts[1]), 1);
        assert_eq!(idx.nearest(&Vec3::new(0.4, 0.0, 0.0)), 0);
        // midpoint tie goes to the smaller index
        assert_eq!(idx.nearest(&Vec3::new(0.5, 0.0, 0.0)), 0);
    }

    #[test]
    fn empty_index_rejected() {
        assert!(matches!(SpatialIndex::new(&[]), Err(Error::EmptyPointSet)));
    }

    #[test]
    fn matches_linear_scan_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100 {
            let n = rng.gen_range(1..=1000);
            // coarse lattice values so exact ties actually occur
            let lattice = trial % 2 == 0;
            let pts: Vec<Vec3> = (0..n)
                .map(|_| {
                    if lattice {
                        Vec3::new(
                            rng.gen_range(0..6) as f64,
                            rng.gen_range(0..6) as f64,
                            rng.gen_range(0..6) as f64,
                        )
                    } else {
                        Vec3::new(rng.gen(), rng.gen(), rng.gen())
                    }
                })
                .collect();
            let idx = SpatialIndex::new(&pts).unwrap();
            for _ in 0..100 {
                let q = if lattice {
                    Vec3::new(
                        rng.gen_range(0..12) as f64 * 0.5,
                        rng.gen_range(0..12) as f64 * 0.5,
                        rng.gen_range(0..12) as f64 * 0.5,
                    )
                } else {
                    Vec3::new(rng.gen(), rng.gen(), rng.gen())
                };
                assert_eq!(Some(idx.nearest(&q)), linear_nearest(&pts, &q));
            }
        }
    }

    #[test]
    fn knn_matches_sorted_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> = (0..300)
            .map(|_| Vec3::new(rng.gen_range(0..5) as f64, rng.gen_range(0..5) as f64, rng.gen()))
            .collect();
        let idx = SpatialIndex::new(&pts).unwrap();
        for q in pts.iter().take(40) {
            let mut all: Vec<(f64, usize)> =
                pts.iter().enumerate().map(|(i, p)| (dist2(q, p), i)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expect: Vec<usize> = all.iter().take(7).map(|x| x.1).collect();
            assert_eq!(idx.k_nearest(q, 7), expect);
        }
    }
}
