//! Static k-d tree over 3D points.
//!
//! Used for the radius neighborhoods of normal estimation, the outlier filter
//! and the nearest-neighbor step of ICP. Ties between equidistant points are
//! always resolved towards the lower point index.

use std::cmp::Ordering;

use crate::geometry::Vec3;

const LEAF_SIZE: usize = 8;
const NONE: u32 = u32::MAX;

#[derive(Clone, Debug)]
struct Node {
    lo: u32,
    hi: u32,
    axis: u8,
    split: f64,
    left: u32,
    right: u32,
}

#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<u32>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len() as u32).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &Vec3 {
        &self.points[index]
    }

    fn build(&mut self, lo: usize, hi: usize) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            lo: lo as u32,
            hi: hi as u32,
            axis: 0,
            split: 0.0,
            left: NONE,
            right: NONE,
        });
        if hi - lo <= LEAF_SIZE {
            return id;
        }
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[lo..hi] {
            let p = &self.points[i as usize];
            min = min.inf(p);
            max = max.sup(p);
        }
        let axis = (max - min).imax();
        let mid = (lo + hi) / 2;
        let points = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a as usize][axis]
                .total_cmp(&points[b as usize][axis])
                .then(a.cmp(&b))
        });
        let split = self.points[self.order[mid] as usize][axis];
        let left = self.build(lo, mid);
        let right = self.build(mid, hi);
        let node = &mut self.nodes[id as usize];
        node.axis = axis as u8;
        node.split = split;
        node.left = left;
        node.right = right;
        id
    }

    /// Nearest point to `q` as `(index, squared distance)`.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(0, q, &mut best);
        Some(best)
    }

    fn nearest_rec(&self, node: u32, q: &Vec3, best: &mut (usize, f64)) {
        let n = &self.nodes[node as usize];
        if n.left == NONE {
            for &i in &self.order[n.lo as usize..n.hi as usize] {
                let d2 = (self.points[i as usize] - q).norm_squared();
                let i = i as usize;
                if d2 < best.1 || (d2 == best.1 && i < best.0) {
                    *best = (i, d2);
                }
            }
            return;
        }
        let diff = q[n.axis as usize] - n.split;
        let (near, far) = if diff <= 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.nearest_rec(near, q, best);
        if diff * diff <= best.1 {
            self.nearest_rec(far, q, best);
        }
    }

    /// All points within `radius` of `q` as `(index, squared distance)`, in no particular order.
    pub fn within_radius(&self, q: &Vec3, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if !self.points.is_empty() {
            self.radius_rec(0, q, radius, radius * radius, &mut |i, d2| {
                out.push((i, d2));
                true
            });
        }
        out
    }

    /// Up to `k` points within `radius`, nearest first (ties by index).
    pub fn nearest_within(&self, q: &Vec3, radius: f64, k: usize) -> Vec<usize> {
        let mut found = self.within_radius(q, radius);
        let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
        if found.len() > k {
            found.select_nth_unstable_by(k, cmp);
            found.truncate(k);
        }
        found.sort_unstable_by(cmp);
        found.into_iter().map(|(i, _)| i).collect()
    }

    /// Counts points within `radius`, stopping early once `limit` is reached.
    pub fn count_within(&self, q: &Vec3, radius: f64, limit: usize) -> usize {
        let mut count = 0;
        if !self.points.is_empty() && limit > 0 {
            self.radius_rec(0, q, radius, radius * radius, &mut |_, _| {
                count += 1;
                count < limit
            });
        }
        count
    }

    /// Returns false when the visitor asked to stop.
    fn radius_rec(
        &self,
        node: u32,
        q: &Vec3,
        r: f64,
        r2: f64,
        visit: &mut dyn FnMut(usize, f64) -> bool,
    ) -> bool {
        let n = &self.nodes[node as usize];
        if n.left == NONE {
            for &i in &self.order[n.lo as usize..n.hi as usize] {
                let d2 = (self.points[i as usize] - q).norm_squared();
                if d2 <= r2 && !visit(i as usize, d2) {
                    return false;
                }
            }
            return true;
        }
        let c = q[n.axis as usize];
        if c - r <= n.split && !self.radius_rec(n.left, q, r, r2, visit) {
            return false;
        }
        if c + r >= n.split && !self.radius_rec(n.right, q, r, r2, visit) {
            return false;
        }
        true
    }
}

/// Orders `(index, squared distance)` pairs nearest first.
pub fn by_distance(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect()
    }

    #[test]
    fn nearest_matches_brute_force() {
        let pts = cloud(2000, 1);
        let tree = KdTree::new(&pts);
        for q in cloud(200, 2) {
            let (i, d2) = tree.nearest(&q).unwrap();
            let brute = pts
                .iter()
                .enumerate()
                .map(|(j, p)| (j, (p - q).norm_squared()))
                .min_by(by_distance)
                .unwrap();
            assert_eq!((i, d2), brute);
        }
    }

    #[test]
    fn radius_matches_brute_force() {
        let pts = cloud(3000, 3);
        let tree = KdTree::new(&pts);
        for q in cloud(100, 4) {
            let mut got: Vec<usize> = tree.within_radius(&q, 0.15).into_iter().map(|x| x.0).collect();
            got.sort_unstable();
            let want: Vec<usize> = (0..pts.len())
                .filter(|&j| (pts[j] - q).norm_squared() <= 0.0225)
                .collect();
            assert_eq!(got, want);
            assert_eq!(tree.count_within(&q, 0.15, usize::MAX), want.len());
            assert_eq!(tree.count_within(&q, 0.15, 3), want.len().min(3));
        }
    }

    #[test]
    fn capped_neighbors_are_nearest_first() {
        let pts = cloud(3000, 5);
        let tree = KdTree::new(&pts);
        let q = Vec3::repeat(0.5);
        let got = tree.nearest_within(&q, 0.3, 20);
        assert_eq!(got.len(), 20);
        let mut all: Vec<(usize, f64)> = (0..pts.len()).map(|j| (j, (pts[j] - q).norm_squared())).collect();
        all.sort_by(by_distance);
        let want: Vec<usize> = all.iter().take(20).map(|x| x.0).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn coincident_points_and_empty_tree() {
        let pts = vec![Vec3::new(1.0, 1.0, 1.0); 50];
        let tree = KdTree::new(&pts);
        assert_eq!(tree.nearest(&Vec3::zeros()).unwrap().0, 0);
        assert_eq!(tree.within_radius(&Vec3::new(1.0, 1.0, 1.0), 0.0).len(), 50);
        assert!(KdTree::new(&[]).nearest(&Vec3::zeros()).is_none());
    }
}
