//! Static k-d tree over 3D positions.
//!
//! The tree is an implicit median split over a permutation array: the median
//! of each range is the node, lower half on the left, upper half on the right.
//! Every comparison uses the key `(squared distance, point id)`, so results
//! match a brute-force scan bit for bit, ties included.

use alloc::vec::Vec;

use crate::math::{sqrt, Vec3};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Vec3>,
    perm: Vec<u32>,
    split_dim: Vec<u8>,
}

#[inline]
pub(crate) fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn better(d2: f64, id: u32, best_d2: f64, best_id: u32) -> bool {
    d2 < best_d2 || (d2 == best_d2 && id < best_id)
}

impl SpatialIndex {
    pub fn new(points: &[Vec3]) -> Self {
        assert!(points.len() < u32::MAX as usize, "too many points for the index");
        let mut index = SpatialIndex {
            points: points.to_vec(),
            perm: (0..points.len() as u32).collect(),
            split_dim: alloc::vec![0; points.len()],
        };
        index.build(0, points.len());
        index
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

    fn build(&mut self, lo: usize, hi: usize) {
        if hi - lo <= LEAF_SIZE {
            return;
        }
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &self.perm[lo..hi] {
            let p = &self.points[i as usize];
            min = min.inf(p);
            max = max.sup(p);
        }
        let extent = max - min;
        let dim = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        let mid = lo + (hi - lo) / 2;
        let points = &self.points;
        self.perm[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a as usize][dim]
                .total_cmp(&points[b as usize][dim])
                .then(a.cmp(&b))
        });
        self.split_dim[mid] = dim as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    /// Closest indexed point within `max_dist` (inclusive) of `query`, as
    /// `(point id, distance)`. Ties go to the smaller id.
    pub fn nearest(&self, query: &Vec3, max_dist: f64) -> Option<(usize, f64)> {
        let mut best = (max_dist * max_dist, u32::MAX);
        self.nearest_in(0, self.points.len(), query, &mut best);
        (best.1 != u32::MAX).then(|| (best.1 as usize, sqrt(best.0)))
    }

    fn nearest_in(&self, lo: usize, hi: usize, q: &Vec3, best: &mut (f64, u32)) {
        if hi - lo <= LEAF_SIZE {
            for &id in &self.perm[lo..hi] {
                let d2 = dist2(q, &self.points[id as usize]);
                if d2 <= best.0 && better(d2, id, best.0, best.1) {
                    *best = (d2, id);
                }
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let id = self.perm[mid];
        let p = &self.points[id as usize];
        let d2 = dist2(q, p);
        if d2 <= best.0 && better(d2, id, best.0, best.1) {
            *best = (d2, id);
        }
        let dim = self.split_dim[mid] as usize;
        let diff = q[dim] - p[dim];
        let (first, second) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_in(first.0, first.1, q, best);
        if diff * diff <= best.0 {
            self.nearest_in(second.0, second.1, q, best);
        }
    }

    /// The `k` closest points sorted by `(distance, id)`; fewer when the index
    /// holds fewer than `k` points.
    pub fn knn(&self, query: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut heap: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.knn_in(0, self.points.len(), query, k, &mut heap);
        }
        heap.into_iter().map(|(d2, id)| (id as usize, sqrt(d2))).collect()
    }

    fn offer(heap: &mut Vec<(f64, u32)>, k: usize, d2: f64, id: u32) {
        if heap.len() == k {
            let (wd, wi) = heap[k - 1];
            if !better(d2, id, wd, wi) {
                return;
            }
            heap.pop();
        }
        let pos = heap
            .iter()
            .position(|&(hd, hi)| better(d2, id, hd, hi))
            .unwrap_or(heap.len());
        heap.insert(pos, (d2, id));
    }

    fn knn_in(&self, lo: usize, hi: usize, q: &Vec3, k: usize, heap: &mut Vec<(f64, u32)>) {
        if hi - lo <= LEAF_SIZE {
            for &id in &self.perm[lo..hi] {
                Self::offer(heap, k, dist2(q, &self.points[id as usize]), id);
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let id = self.perm[mid];
        let p = &self.points[id as usize];
        Self::offer(heap, k, dist2(q, p), id);
        let dim = self.split_dim[mid] as usize;
        let diff = q[dim] - p[dim];
        let (first, second) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_in(first.0, first.1, q, k, heap);
        if heap.len() < k || diff * diff <= heap[k - 1].0 {
            self.knn_in(second.0, second.1, q, k, heap);
        }
    }
}
