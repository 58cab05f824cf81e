//! Exact nearest-neighbor lookup for 2D point sets.
//!
//! A balanced kd-tree built once per query set. Correspondence matching
//! and the contour metrics both query thousands of points per call, so
//! the log-time lookup matters; exactness is part of the contract and is
//! checked against brute force in tests.

use nalgebra::Vector2;

pub struct NearestNeighbor2d {
    points: Vec<Vector2<f64>>,
    /// Indices into `points`, reordered so each subtree occupies a
    /// contiguous slice.
    order: Vec<u32>,
}

impl NearestNeighbor2d {
    pub fn build(points: &[Vector2<f64>]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = NearestNeighbor2d {
            points: points.to_vec(),
            order,
        };
        order = std::mem::take(&mut tree.order);
        build_recursive(&tree.points, &mut order, 0);
        tree.order = order;
        tree
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Index of the nearest stored point and the distance to it.
    /// Panics on an empty set; callers guard that case.
    pub fn nearest(&self, q: &Vector2<f64>) -> (usize, f64) {
        assert!(!self.points.is_empty(), "nearest() on empty point set");
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(&self.order, 0, q, &mut best);
        (best.0, best.1.sqrt())
    }

    fn search(&self, slice: &[u32], axis: usize, q: &Vector2<f64>, best: &mut (usize, f64)) {
        if slice.is_empty() {
            return;
        }
        let mid = slice.len() / 2;
        let idx = slice[mid] as usize;
        let p = self.points[idx];
        let d2 = (p - q).norm_squared();
        if d2 < best.1 {
            *best = (idx, d2);
        }
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            (&slice[..mid], &slice[mid + 1..])
        } else {
            (&slice[mid + 1..], &slice[..mid])
        };
        self.search(near, 1 - axis, q, best);
        if delta * delta < best.1 {
            self.search(far, 1 - axis, q, best);
        }
    }
}

fn build_recursive(points: &[Vector2<f64>], slice: &mut [u32], axis: usize) {
    if slice.len() <= 1 {
        return;
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .partial_cmp(&points[b as usize][axis])
            .unwrap()
    });
    let (lo, rest) = slice.split_at_mut(mid);
    build_recursive(points, lo, 1 - axis);
    build_recursive(points, &mut rest[1..], 1 - axis);
}
