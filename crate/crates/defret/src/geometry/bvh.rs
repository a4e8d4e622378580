//! Axis-aligned BVH over triangles for exact point-to-mesh distance queries.

use super::triangle::point_triangle_distance_sq;
use super::TriangleMesh;
use nalgebra::Point3;

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Point3<f64>,
    hi: Point3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
            hi: Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Point3<f64>) {
        for k in 0..3 {
            self.lo[k] = self.lo[k].min(p[k]);
            self.hi[k] = self.hi[k].max(p[k]);
        }
    }

    fn distance_sq(&self, p: &Point3<f64>) -> f64 {
        let mut d2 = 0.0;
        for k in 0..3 {
            let d = (self.lo[k] - p[k]).max(0.0).max(p[k] - self.hi[k]);
            d2 += d * d;
        }
        d2
    }
}

#[derive(Debug, Clone)]
struct BvhNode {
    aabb: Aabb,
    // Interior: children as (left, right). Leaf: triangle range in `order`.
    left: i32,
    right: i32,
    start: u32,
    len: u32,
}

/// Immutable distance-query acceleration structure. Safe to share across
/// threads; queries are read-only.
#[derive(Debug, Clone)]
pub struct TriangleBvh {
    tris: Vec<[Point3<f64>; 3]>,
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
    root: i32,
}

const LEAF_SIZE: usize = 4;

impl TriangleBvh {
    pub fn build(mesh: &TriangleMesh) -> Self {
        let tris: Vec<[Point3<f64>; 3]> =
            (0..mesh.triangles().len()).map(|t| mesh.triangle_points(t)).collect();
        Self::from_triangles(tris)
    }

    pub fn from_triangles(tris: Vec<[Point3<f64>; 3]>) -> Self {
        let centroids: Vec<Point3<f64>> = tris
            .iter()
            .map(|t| Point3::from((t[0].coords + t[1].coords + t[2].coords) / 3.0))
            .collect();
        let mut order: Vec<u32> = (0..tris.len() as u32).collect();
        let mut nodes = Vec::new();
        let root = if tris.is_empty() {
            -1
        } else {
            build_rec(&tris, &centroids, &mut order, 0, &mut nodes)
        };
        Self {
            tris,
            nodes,
            order,
            root,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tris.is_empty()
    }

    /// Exact squared distance from `p` to the nearest triangle.
    /// Panics if the BVH holds no triangles.
    pub fn distance_sq(&self, p: &Point3<f64>) -> f64 {
        assert!(self.root >= 0, "distance query on empty TriangleBvh");
        let mut best = f64::INFINITY;
        self.query(self.root, p, &mut best);
        best
    }

    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        self.distance_sq(p).sqrt()
    }

    fn query(&self, node: i32, p: &Point3<f64>, best: &mut f64) {
        let n = &self.nodes[node as usize];
        if n.aabb.distance_sq(p) > *best {
            return;
        }
        if n.len > 0 {
            for &t in &self.order[n.start as usize..(n.start + n.len) as usize] {
                let d2 = point_triangle_distance_sq(p, &self.tris[t as usize]);
                if d2 < *best {
                    *best = d2;
                }
            }
            return;
        }
        // Visit the nearer child first so the bound tightens early.
        let (l, r) = (n.left, n.right);
        let dl = self.nodes[l as usize].aabb.distance_sq(p);
        let dr = self.nodes[r as usize].aabb.distance_sq(p);
        if dl <= dr {
            self.query(l, p, best);
            if dr <= *best {
                self.query(r, p, best);
            }
        } else {
            self.query(r, p, best);
            if dl <= *best {
                self.query(l, p, best);
            }
        }
    }

    /// Brute-force reference used by the oracle tests.
    pub fn distance_sq_brute_force(&self, p: &Point3<f64>) -> f64 {
        self.tris
            .iter()
            .map(|t| point_triangle_distance_sq(p, t))
            .fold(f64::INFINITY, f64::min)
    }
}

fn build_rec(
    tris: &[[Point3<f64>; 3]],
    centroids: &[Point3<f64>],
    order: &mut [u32],
    offset: usize,
    nodes: &mut Vec<BvhNode>,
) -> i32 {
    let mut aabb = Aabb::empty();
    for &t in order.iter() {
        for v in &tris[t as usize] {
            aabb.grow(v);
        }
    }
    if order.len() <= LEAF_SIZE {
        nodes.push(BvhNode {
            aabb,
            left: -1,
            right: -1,
            start: offset as u32,
            len: order.len() as u32,
        });
        return (nodes.len() - 1) as i32;
    }
    // Median split along the widest centroid axis, tie-broken by index for a
    // deterministic tree.
    let mut cmin = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut cmax = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &t in order.iter() {
        let c = &centroids[t as usize];
        for k in 0..3 {
            cmin[k] = cmin[k].min(c[k]);
            cmax[k] = cmax[k].max(c[k]);
        }
    }
    let extent = cmax - cmin;
    let mut axis = 0;
    for k in 1..3 {
        if extent[k] > extent[axis] {
            axis = k;
        }
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        centroids[a as usize][axis]
            .partial_cmp(&centroids[b as usize][axis])
            .unwrap()
            .then(a.cmp(&b))
    });
    let (lo, hi) = order.split_at_mut(mid);
    let left = build_rec(tris, centroids, lo, offset, nodes);
    let right = build_rec(tris, centroids, hi, offset + mid, nodes);
    nodes.push(BvhNode {
        aabb,
        left,
        right,
        start: 0,
        len: 0,
    });
    (nodes.len() - 1) as i32
}
