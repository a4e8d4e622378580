//! Balanced KD-tree for nearest-neighbor queries over a point set.
//!
//! The query contract is exact: the result equals a brute-force scan, with
//! distance ties broken by the lowest point index. Pruning therefore only
//! discards a subtree when its slab distance is strictly greater than the
//! current best squared distance.

use nalgebra::Point3;

#[derive(Debug, Clone, Copy)]
struct Node {
    point: u32,
    left: i32,
    right: i32,
    axis: u8,
}

#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Point3<f64>>,
    nodes: Vec<Node>,
    root: i32,
}

impl SpatialIndex {
    pub fn build(points: &[Point3<f64>]) -> Self {
        let mut ids: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = build_rec(points, &mut ids, 0, &mut nodes);
        Self {
            points: points.to_vec(),
            nodes,
            root,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and squared distance of the nearest point to `q`.
    /// Panics on an empty index.
    pub fn nearest(&self, q: &Point3<f64>) -> (u32, f64) {
        assert!(!self.points.is_empty(), "nearest() on empty SpatialIndex");
        let mut best = (u32::MAX, f64::INFINITY);
        self.search(self.root, q, &mut best);
        best
    }

    fn search(&self, node: i32, q: &Point3<f64>, best: &mut (u32, f64)) {
        if node < 0 {
            return;
        }
        let n = self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        let d2 = (q - p).norm_squared();
        if d2 < best.1 || (d2 == best.1 && n.point < best.0) {
            *best = (n.point, d2);
        }
        let delta = q[n.axis as usize] - p[n.axis as usize];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, q, best);
        // `>=` would lose equal-distance candidates on the far side which may
        // carry a lower index, so prune strictly.
        if delta * delta <= best.1 {
            self.search(far, q, best);
        }
    }

    /// Brute-force reference with the same tie rule; used by the oracle tests.
    pub fn nearest_brute_force(points: &[Point3<f64>], q: &Point3<f64>) -> (u32, f64) {
        assert!(!points.is_empty());
        let mut best = (u32::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d2 = (q - p).norm_squared();
            if d2 < best.1 {
                best = (i as u32, d2);
            }
        }
        best
    }
}

fn build_rec(points: &[Point3<f64>], ids: &mut [u32], depth: usize, nodes: &mut Vec<Node>) -> i32 {
    if ids.is_empty() {
        return -1;
    }
    let axis = (depth % 3) as u8;
    let mid = ids.len() / 2;
    ids.select_nth_unstable_by(mid, |&a, &b| {
        let ka = points[a as usize][axis as usize];
        let kb = points[b as usize][axis as usize];
        ka.partial_cmp(&kb).unwrap().then(a.cmp(&b))
    });
    let point = ids[mid];
    let (lo, rest) = ids.split_at_mut(mid);
    let hi = &mut rest[1..];
    let left = build_rec(points, lo, depth + 1, nodes);
    let right = build_rec(points, hi, depth + 1, nodes);
    nodes.push(Node {
        point,
        left,
        right,
        axis,
    });
    (nodes.len() - 1) as i32
}
