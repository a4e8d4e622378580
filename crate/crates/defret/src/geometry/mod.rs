//! Mesh and point-cloud carriers, normalization, surface sampling, spatial
//! indexing, and the Chamfer-distance family.

mod bvh;
mod chamfer;
pub mod io;
mod kdtree;
mod triangle;

pub use bvh::TriangleBvh;
pub use chamfer::{
    chamfer_pm, chamfer_pm_cached, chamfer_pp, chamfer_pp_cached, chamfer_pp_variant, one_way_pm,
    one_way_pm_cached, ChamferVariant,
};
pub use kdtree::SpatialIndex;
pub use triangle::{closest_point_on_triangle, point_triangle_distance};

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Database-wide shape identifier; also the key type of fitting-gap tables.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct ShapeId(pub u32);

impl ShapeId {
    /// Placeholder for clouds that are not attached to a database shape.
    pub const UNASSIGNED: ShapeId = ShapeId(u32::MAX);
}

impl std::fmt::Display for ShapeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("mesh has no vertices")]
    NoVertices,
    #[error("triangle index {index} out of bounds (vertex count {len})")]
    IndexOutOfBounds { index: u32, len: usize },
    #[error("degenerate bounding box: all vertices coincide")]
    DegenerateBoundingBox,
    #[error("no triangle with positive area to sample from")]
    NoSampleableArea,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("shape {0} has no evaluation cloud")]
    MissingEvalCloud(ShapeId),
}

/// Indexed triangle mesh. Edges are derived from the triangles at
/// construction: the union of each triangle's three edges, deduplicated,
/// stored as `(lo, hi)` vertex-index pairs in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Point3<f64>>,
    triangles: Vec<[u32; 3]>,
    edges: Vec<[u32; 2]>,
}

impl TriangleMesh {
    pub fn new(
        vertices: Vec<Point3<f64>>,
        triangles: Vec<[u32; 3]>,
    ) -> Result<Self, GeometryError> {
        if vertices.is_empty() {
            return Err(GeometryError::NoVertices);
        }
        let len = vertices.len();
        for tri in &triangles {
            for &i in tri {
                if i as usize >= len {
                    return Err(GeometryError::IndexOutOfBounds { index: i, len });
                }
            }
        }
        let edges = derive_edges(&triangles);
        Ok(Self {
            vertices,
            triangles,
            edges,
        })
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn edges(&self) -> &[[u32; 2]] {
        &self.edges
    }

    pub fn triangle_points(&self, t: usize) -> [Point3<f64>; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bbox(&self) -> (Point3<f64>, Point3<f64>) {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bbox();
        (hi - lo).norm()
    }

    /// Replaces vertex positions, keeping connectivity. Panics if the count
    /// changes; deformation must preserve the vertex set.
    pub fn with_vertices(&self, vertices: Vec<Point3<f64>>) -> Self {
        assert_eq!(vertices.len(), self.vertices.len());
        Self {
            vertices,
            triangles: self.triangles.clone(),
            edges: self.edges.clone(),
        }
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_points(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }
}

fn derive_edges(triangles: &[[u32; 3]]) -> Vec<[u32; 2]> {
    let mut edges: Vec<[u32; 2]> = Vec::with_capacity(triangles.len() * 3);
    for tri in triangles {
        for (i, j) in [(0, 1), (1, 2), (2, 0)] {
            let (a, b) = (tri[i].min(tri[j]), tri[i].max(tri[j]));
            if a != b {
                edges.push([a, b]);
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Centers the bounding box at the origin and scales the bounding-box
/// diagonal to unit length.
pub fn normalize(mesh: &TriangleMesh) -> Result<TriangleMesh, GeometryError> {
    let (lo, hi) = mesh.bbox();
    let diag = (hi - lo).norm();
    if diag == 0.0 {
        return Err(GeometryError::DegenerateBoundingBox);
    }
    let center = nalgebra::center(&lo, &hi);
    let scale = 1.0 / diag;
    let vertices = mesh
        .vertices
        .iter()
        .map(|v| Point3::from((v - center) * scale))
        .collect();
    Ok(mesh.with_vertices(vertices))
}

/// Fixed-size point sample of a surface.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    pub source_shape_id: ShapeId,
    pub seed: u64,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>, source_shape_id: ShapeId, seed: u64) -> Self {
        Self {
            points,
            source_shape_id,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Where on a mesh each sample of a cloud was drawn: triangle index plus
/// barycentric weights. Evaluating the same pattern on deformed vertex
/// positions transports the sample through the deformation, which keeps
/// point-to-point correspondence between a shape's cloud and the cloud of
/// its deformed copy.
#[derive(Debug, Clone)]
pub struct SamplePattern {
    pub triangle_ids: Vec<u32>,
    pub barycentric: Vec<[f64; 3]>,
    pub seed: u64,
}

impl SamplePattern {
    /// Area-weighted triangle selection with barycentric-uniform placement.
    /// Deterministic in `(mesh, n, seed)`.
    pub fn draw(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Self, GeometryError> {
        let ntris = mesh.triangles.len();
        let mut cdf = Vec::with_capacity(ntris);
        let mut total = 0.0f64;
        for t in 0..ntris {
            total += mesh.triangle_area(t);
            cdf.push(total);
        }
        if !(total > 0.0) {
            return Err(GeometryError::NoSampleableArea);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut triangle_ids = Vec::with_capacity(n);
        let mut barycentric = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random::<f64>() * total;
            let t = cdf.partition_point(|&c| c <= u).min(ntris - 1);
            let r1: f64 = rng.random();
            let r2: f64 = rng.random();
            let su = r1.sqrt();
            triangle_ids.push(t as u32);
            barycentric.push([1.0 - su, su * (1.0 - r2), su * r2]);
        }
        Ok(Self {
            triangle_ids,
            barycentric,
            seed,
        })
    }

    /// Instantiates the pattern on a mesh with the same connectivity.
    pub fn evaluate(&self, mesh: &TriangleMesh) -> PointCloud {
        let points = self
            .triangle_ids
            .iter()
            .zip(&self.barycentric)
            .map(|(&t, w)| {
                let [a, b, c] = mesh.triangle_points(t as usize);
                Point3::from(a.coords * w[0] + b.coords * w[1] + c.coords * w[2])
            })
            .collect();
        PointCloud::new(points, ShapeId::UNASSIGNED, self.seed)
    }
}

/// Uniform area-weighted surface sample: `n` points, barycentric-uniform
/// within each selected triangle. Identical `(mesh, n, seed)` reproduce
/// identical clouds bitwise.
pub fn sample_surface(
    mesh: &TriangleMesh,
    n: usize,
    seed: u64,
) -> Result<PointCloud, GeometryError> {
    Ok(SamplePattern::draw(mesh, n, seed)?.evaluate(mesh))
}

/// Default training-cloud sample count.
pub const TRAIN_CLOUD_POINTS: usize = 2048;
/// Default evaluation-cloud sample count.
pub const EVAL_CLOUD_POINTS: usize = 50_000;

/// A database shape: normalized mesh plus its two canonical point samples.
#[derive(Debug, Clone)]
pub struct ShapeRecord {
    pub id: ShapeId,
    pub mesh: TriangleMesh,
    pub cloud_train: PointCloud,
    pub cloud_eval: Option<PointCloud>,
}

impl ShapeRecord {
    /// Normalizes `mesh` and samples both clouds with seeds derived from
    /// `root_seed` and the shape id.
    pub fn build(
        id: ShapeId,
        mesh: &TriangleMesh,
        root_seed: u64,
        train_points: usize,
        eval_points: usize,
    ) -> Result<Self, GeometryError> {
        let mesh = normalize(mesh)?;
        let mut cloud_train =
            sample_surface(&mesh, train_points, train_cloud_seed(root_seed, id))?;
        cloud_train.source_shape_id = id;
        let mut cloud_eval = sample_surface(&mesh, eval_points, eval_cloud_seed(root_seed, id))?;
        cloud_eval.source_shape_id = id;
        Ok(Self {
            id,
            mesh,
            cloud_train,
            cloud_eval: Some(cloud_eval),
        })
    }

    pub fn cloud_eval(&self) -> Result<&PointCloud, GeometryError> {
        self.cloud_eval
            .as_ref()
            .ok_or(GeometryError::MissingEvalCloud(self.id))
    }
}

pub fn train_cloud_seed(root_seed: u64, id: ShapeId) -> u64 {
    crate::seed::derive_indexed(root_seed, "cloud_train", id.0 as u64)
}

pub fn eval_cloud_seed(root_seed: u64, id: ShapeId) -> u64 {
    crate::seed::derive_indexed(root_seed, "cloud_eval", id.0 as u64)
}

/// Barycenter helper used in a few tests and the deform export.
pub fn centroid(points: &[Point3<f64>]) -> Point3<f64> {
    let mut acc = Vector3::zeros();
    for p in points {
        acc += p.coords;
    }
    Point3::from(acc / points.len() as f64)
}

#[cfg(test)]
pub(crate) mod tests;
