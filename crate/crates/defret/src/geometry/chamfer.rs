//! The Chamfer-distance family: point-to-point, point-to-mesh, and one-way
//! partial-fit variants.

use super::{GeometryError, PointCloud, ShapeRecord, SpatialIndex, TriangleBvh, TriangleMesh};

/// Per-point distance exponent. Squared is the default convention; the
/// unsquared variant stays selectable by configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChamferVariant {
    #[default]
    Squared,
    Unsquared,
}

impl ChamferVariant {
    fn apply(self, d2: f64) -> f64 {
        match self {
            ChamferVariant::Squared => d2,
            ChamferVariant::Unsquared => d2.sqrt(),
        }
    }
}

fn one_way_pp(from: &PointCloud, to_index: &SpatialIndex, variant: ChamferVariant) -> f64 {
    let mut acc = 0.0;
    for p in &from.points {
        let (_, d2) = to_index.nearest(p);
        acc += variant.apply(d2);
    }
    acc / from.len() as f64
}

/// Symmetric two-way point-to-point Chamfer distance:
/// mean nearest-neighbor squared distance from `a` into `b` plus the mean
/// from `b` into `a`.
pub fn chamfer_pp(a: &PointCloud, b: &PointCloud) -> Result<f64, GeometryError> {
    chamfer_pp_variant(a, b, ChamferVariant::Squared)
}

pub fn chamfer_pp_variant(
    a: &PointCloud,
    b: &PointCloud,
    variant: ChamferVariant,
) -> Result<f64, GeometryError> {
    if a.is_empty() || b.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    let ia = SpatialIndex::build(&a.points);
    let ib = SpatialIndex::build(&b.points);
    Ok(one_way_pp(a, &ib, variant) + one_way_pp(b, &ia, variant))
}

/// `chamfer_pp` with caller-owned KD-trees, for all-pairs scans that reuse
/// per-cloud indexes.
pub fn chamfer_pp_cached(
    a: &PointCloud,
    index_a: &SpatialIndex,
    b: &PointCloud,
    index_b: &SpatialIndex,
) -> f64 {
    one_way_pp(a, index_b, ChamferVariant::Squared)
        + one_way_pp(b, index_a, ChamferVariant::Squared)
}

fn one_way_points_to_mesh(from: &PointCloud, bvh: &TriangleBvh, variant: ChamferVariant) -> f64 {
    let mut acc = 0.0;
    for p in &from.points {
        acc += variant.apply(bvh.distance_sq(p));
    }
    acc / from.len() as f64
}

/// Symmetric two-way point-to-mesh Chamfer distance on the dense evaluation
/// clouds: mean squared distance from `a`'s eval cloud to `b`'s surface plus
/// the reverse direction.
pub fn chamfer_pm(a: &ShapeRecord, b: &ShapeRecord) -> Result<f64, GeometryError> {
    let ca = a.cloud_eval()?;
    let cb = b.cloud_eval()?;
    let bvh_a = TriangleBvh::build(&a.mesh);
    let bvh_b = TriangleBvh::build(&b.mesh);
    Ok(chamfer_pm_cached(ca, &bvh_a, cb, &bvh_b))
}

/// `chamfer_pm` with caller-owned BVHs, for callers that query the same
/// meshes repeatedly.
pub fn chamfer_pm_cached(
    cloud_a: &PointCloud,
    bvh_a: &TriangleBvh,
    cloud_b: &PointCloud,
    bvh_b: &TriangleBvh,
) -> f64 {
    one_way_points_to_mesh(cloud_a, bvh_b, ChamferVariant::Squared)
        + one_way_points_to_mesh(cloud_b, bvh_a, ChamferVariant::Squared)
}

/// One-way partial-fit distance: mean squared point-to-mesh distance from
/// the observed (partial) points to the model surface. Asymmetric on
/// purpose; unobserved model regions cost nothing.
pub fn one_way_pm(partial: &PointCloud, model: &TriangleMesh) -> Result<f64, GeometryError> {
    if partial.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    let bvh = TriangleBvh::build(model);
    Ok(one_way_pm_cached(partial, &bvh))
}

pub fn one_way_pm_cached(partial: &PointCloud, model_bvh: &TriangleBvh) -> f64 {
    one_way_points_to_mesh(partial, model_bvh, ChamferVariant::Squared)
}
