//! Bounding volume hierarchy over surfel disks.
//!
//! Each disk is bounded by `center ± radius` on every axis (slightly padded so
//! rounding in the slab test can never cull a true hit). Nodes are split at the
//! centroid median of their longest axis until at most [`LEAF_SIZE`] disks
//! remain. Closest-hit queries return exactly what an exhaustive scan would:
//! the smallest range, ties going to the lowest surfel index.

use crate::geometry::{intersect_disk_index, Aabb, Hit, Ray, Surfel, Vec3};

pub const LEAF_SIZE: usize = 4;

#[derive(Clone, Copy, Debug)]
struct Node {
    min: [f64; 3],
    max: [f64; 3],
    /// Leaf: first primitive. Interior: index of the right child (left is `self + 1`).
    offset: u32,
    /// Number of primitives; zero for interior nodes.
    count: u32,
}

#[derive(Clone, Debug, Default)]
pub struct Bvh {
    nodes: Vec<Node>,
    surfels: Vec<Surfel>,
    /// Original index of each reordered surfel.
    ids: Vec<u32>,
}

/// True when hit `(range_a, index_a)` should win over `(range_b, index_b)`.
#[inline]
pub fn hit_precedes(range_a: f64, index_a: usize, range_b: f64, index_b: usize) -> bool {
    range_a < range_b || (range_a == range_b && index_a < index_b)
}

fn surfel_bounds(s: &Surfel) -> Aabb {
    let pad = Vec3::new(
        1e-6 + 1e-9 * s.center.x.abs(),
        1e-6 + 1e-9 * s.center.y.abs(),
        1e-6 + 1e-9 * s.center.z.abs(),
    );
    let r = Vec3::repeat(s.radius) + pad;
    Aabb {
        min: s.center - r,
        max: s.center + r,
    }
}

impl Bvh {
    pub fn build(surfels: &[Surfel]) -> Self {
        let bounds: Vec<Aabb> = surfels.iter().map(surfel_bounds).collect();
        let mut ids: Vec<u32> = (0..surfels.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * surfels.len() / LEAF_SIZE + 1);
        if !surfels.is_empty() {
            build_rec(&bounds, surfels, &mut ids, 0, surfels.len(), &mut nodes);
        }
        Bvh {
            nodes,
            surfels: ids.iter().map(|&i| surfels[i as usize]).collect(),
            ids,
        }
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn bounds(&self) -> Aabb {
        match self.nodes.first() {
            Some(n) => Aabb {
                min: n.min.into(),
                max: n.max.into(),
            },
            None => Aabb::empty(),
        }
    }

    /// Closest disk hit beyond `t_min`; `surfel_index` refers to the input slice.
    pub fn closest_hit(&self, ray: &Ray, t_min: f64) -> Option<Hit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = Vec3::new(
            1.0 / ray.direction.x,
            1.0 / ray.direction.y,
            1.0 / ray.direction.z,
        );
        let mut best: Option<Hit> = None;
        let mut best_range = f64::INFINITY;
        let mut stack = [0u32; 64];
        let mut sp = 1;
        while sp > 0 {
            sp -= 1;
            let node = &self.nodes[stack[sp] as usize];
            if !slab_overlaps(node, &ray.origin, &inv, t_min, best_range) {
                continue;
            }
            if node.count > 0 {
                let start = node.offset as usize;
                for k in start..start + node.count as usize {
                    let id = self.ids[k] as usize;
                    if let Some(hit) = intersect_disk_index(ray, &self.surfels[k], t_min, id) {
                        let better = match &best {
                            Some(b) => hit_precedes(hit.range, id, b.range, b.surfel_index),
                            None => true,
                        };
                        if better {
                            best_range = hit.range;
                            best = Some(hit);
                        }
                    }
                }
            } else {
                let left = stack[sp] + 1;
                let right = node.offset;
                // Visit the nearer child first by pushing it last.
                let (first, second) = {
                    let l = &self.nodes[left as usize];
                    let r = &self.nodes[right as usize];
                    let dl = entry_distance(l, &ray.origin, &inv);
                    let dr = entry_distance(r, &ray.origin, &inv);
                    if dl <= dr {
                        (left, right)
                    } else {
                        (right, left)
                    }
                };
                stack[sp] = second;
                stack[sp + 1] = first;
                sp += 2;
            }
        }
        best
    }
}

fn build_rec(
    bounds: &[Aabb],
    surfels: &[Surfel],
    ids: &mut [u32],
    lo: usize,
    hi: usize,
    nodes: &mut Vec<Node>,
) -> u32 {
    let mut b = Aabb::empty();
    for &i in &ids[lo..hi] {
        b.grow(&bounds[i as usize]);
    }
    let id = nodes.len() as u32;
    nodes.push(Node {
        min: b.min.into(),
        max: b.max.into(),
        offset: lo as u32,
        count: (hi - lo) as u32,
    });
    if hi - lo <= LEAF_SIZE {
        return id;
    }
    let axis = b.extent().imax();
    let mid = (lo + hi) / 2;
    ids[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
        surfels[a as usize].center[axis]
            .total_cmp(&surfels[b as usize].center[axis])
            .then(a.cmp(&b))
    });
    build_rec(bounds, surfels, ids, lo, mid, nodes);
    let right = build_rec(bounds, surfels, ids, mid, hi, nodes);
    let node = &mut nodes[id as usize];
    node.offset = right;
    node.count = 0;
    id
}

#[inline]
fn slab(node: &Node, o: &Vec3, inv: &Vec3) -> (f64, f64) {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let ta = (node.min[a] - o[a]) * inv[a];
        let tb = (node.max[a] - o[a]) * inv[a];
        // `f64::min`/`max` drop a NaN operand, which keeps the test conservative.
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t0, t1)
}

#[inline]
fn slab_overlaps(node: &Node, o: &Vec3, inv: &Vec3, t_min: f64, t_max: f64) -> bool {
    let (t0, t1) = slab(node, o, inv);
    t0 <= t1 && t1 >= t_min && t0 <= t_max
}

#[inline]
fn entry_distance(node: &Node, o: &Vec3, inv: &Vec3) -> f64 {
    let (t0, t1) = slab(node, o, inv);
    if t0 <= t1 {
        t0
    } else {
        f64::INFINITY
    }
}
