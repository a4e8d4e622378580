//! Voxelized unsigned distance fields.
//!
//! The grid samples the exact point-to-mesh distance of a target shape at
//! the nodes of a cubic lattice and answers interior queries by trilinear
//! interpolation. Queries outside the lattice clamp to the boundary and add
//! the Euclidean distance to the grid box, so the field stays finite and
//! increases away from the domain.

use crate::geometry::{ShapeRecord, TriangleBvh, TriangleMesh};
use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid resolution must be at least 2, got {0}")]
    ResolutionTooSmall(u32),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected DUDF")]
    BadMagic,
    #[error("truncated grid file")]
    Truncated,
}

/// Fractional bbox inflation applied when deriving a grid domain.
pub const DOMAIN_MARGIN: f64 = 0.10;

/// Unsigned distance samples on a `resolution`^3 lattice with uniform cell
/// size. Node `(i, j, k)` sits at `origin + (i, j, k) * cell_size`; values
/// are stored x-fastest.
#[derive(Debug, Clone)]
pub struct UnsignedDistanceGrid {
    resolution: u32,
    origin: Point3<f64>,
    cell_size: f64,
    values: Vec<f32>,
}

impl UnsignedDistanceGrid {
    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn origin(&self) -> Point3<f64> {
        self.origin
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Far corner of the lattice.
    pub fn max_corner(&self) -> Point3<f64> {
        let span = (self.resolution - 1) as f64 * self.cell_size;
        self.origin + Vector3::new(span, span, span)
    }

    fn value_at(&self, i: u32, j: u32, k: u32) -> f64 {
        let r = self.resolution as usize;
        self.values[(k as usize * r + j as usize) * r + i as usize] as f64
    }

    pub fn node_position(&self, i: u32, j: u32, k: u32) -> Point3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.cell_size
    }

    /// Trilinear interpolation of the eight surrounding node values. Points
    /// outside the lattice are clamped to it and charged the Euclidean
    /// distance to the lattice box on top.
    pub fn query(&self, p: &Point3<f64>) -> f64 {
        let hi = self.max_corner();
        let mut outside2 = 0.0;
        let mut q = *p;
        for a in 0..3 {
            if q[a] < self.origin[a] {
                let d = self.origin[a] - q[a];
                outside2 += d * d;
                q[a] = self.origin[a];
            } else if q[a] > hi[a] {
                let d = q[a] - hi[a];
                outside2 += d * d;
                q[a] = hi[a];
            }
        }
        let rel = (q - self.origin) / self.cell_size;
        let n = self.resolution - 1;
        let mut idx = [0u32; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let cell = rel[a].floor().clamp(0.0, (n - 1) as f64);
            idx[a] = cell as u32;
            frac[a] = (rel[a] - cell).clamp(0.0, 1.0);
        }
        let (i, j, k) = (idx[0], idx[1], idx[2]);
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        let c000 = self.value_at(i, j, k);
        let c100 = self.value_at(i + 1, j, k);
        let c010 = self.value_at(i, j + 1, k);
        let c110 = self.value_at(i + 1, j + 1, k);
        let c001 = self.value_at(i, j, k + 1);
        let c101 = self.value_at(i + 1, j, k + 1);
        let c011 = self.value_at(i, j + 1, k + 1);
        let c111 = self.value_at(i + 1, j + 1, k + 1);
        let c00 = c000 * (1.0 - fx) + c100 * fx;
        let c10 = c010 * (1.0 - fx) + c110 * fx;
        let c01 = c001 * (1.0 - fx) + c101 * fx;
        let c11 = c011 * (1.0 - fx) + c111 * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        let interpolated = c0 * (1.0 - fz) + c1 * fz;
        interpolated + outside2.sqrt()
    }

    /// Finite-difference gradient of `query` with step `cell_size / 2`,
    /// central where both probes stay on the lattice and one-sided in the
    /// boundary shell.
    pub fn gradient(&self, p: &Point3<f64>) -> Vector3<f64> {
        let h = self.cell_size * 0.5;
        let hi = self.max_corner();
        let mut g = Vector3::zeros();
        for a in 0..3 {
            let mut fwd = *p;
            let mut back = *p;
            fwd[a] += h;
            back[a] -= h;
            let use_fwd = fwd[a] <= hi[a];
            let use_back = back[a] >= self.origin[a];
            g[a] = match (use_fwd, use_back) {
                (true, true) => (self.query(&fwd) - self.query(&back)) / (2.0 * h),
                (true, false) => (self.query(&fwd) - self.query(p)) / h,
                (false, true) => (self.query(p) - self.query(&back)) / h,
                (false, false) => 0.0,
            };
        }
        g
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        let hi = self.max_corner();
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] <= hi[a])
    }
}

/// Cubic domain covering `bbox` inflated by [`DOMAIN_MARGIN`] on each side.
/// The cube is centered on the bbox center with a side floor that keeps
/// degenerate (flat) boxes usable.
pub fn domain_for_bbox(lo: &Point3<f64>, hi: &Point3<f64>) -> (Point3<f64>, f64) {
    let center = nalgebra::center(lo, hi);
    let extent = hi - lo;
    let side = extent
        .iter()
        .fold(0.0f64, |m, &e| m.max(e))
        .max(1e-3) * (1.0 + 2.0 * DOMAIN_MARGIN);
    (center, side)
}

/// Builds the unsigned distance grid of `target`'s mesh over the target's
/// own inflated bbox.
pub fn build_udf(target: &ShapeRecord, resolution: u32) -> Result<UnsignedDistanceGrid, GridError> {
    let (lo, hi) = target.mesh.bbox();
    let (center, side) = domain_for_bbox(&lo, &hi);
    build_udf_in_cube(&target.mesh, &center, side, resolution)
}

/// Builds the unsigned distance grid of `mesh` over an explicit cubic
/// domain. Every node value is the exact point-to-mesh distance from the
/// node to the surface.
pub fn build_udf_in_cube(
    mesh: &TriangleMesh,
    center: &Point3<f64>,
    side: f64,
    resolution: u32,
) -> Result<UnsignedDistanceGrid, GridError> {
    if resolution < 2 {
        return Err(GridError::ResolutionTooSmall(resolution));
    }
    let cell_size = side / (resolution - 1) as f64;
    let origin = center - Vector3::new(side, side, side) * 0.5;
    let bvh = TriangleBvh::build(mesh);
    let r = resolution as usize;
    let mut values = vec![0.0f32; r * r * r];
    // Each node is independent, so slab partitioning cannot change values.
    values
        .par_chunks_mut(r * r)
        .enumerate()
        .for_each(|(k, slab)| {
            for j in 0..r {
                for i in 0..r {
                    let p = origin
                        + Vector3::new(i as f64, j as f64, k as f64) * cell_size;
                    slab[j * r + i] = bvh.distance(&p) as f32;
                }
            }
        });
    Ok(UnsignedDistanceGrid {
        resolution,
        origin,
        cell_size,
        values,
    })
}

const GRID_MAGIC: &[u8; 4] = b"DUDF";

/// Grid cache file: magic `DUDF`, u32 resolution, 3 f64 origin, f64
/// cell_size, then resolution^3 little-endian f32 values, x-fastest.
pub fn save_grid(grid: &UnsignedDistanceGrid, path: impl AsRef<Path>) -> Result<(), GridError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(GRID_MAGIC)?;
    w.write_all(&grid.resolution.to_le_bytes())?;
    for a in 0..3 {
        w.write_all(&grid.origin[a].to_le_bytes())?;
    }
    w.write_all(&grid.cell_size.to_le_bytes())?;
    for v in &grid.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<UnsignedDistanceGrid, GridError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != GRID_MAGIC {
        return Err(GridError::BadMagic);
    }
    let header = 4 + 4 + 24 + 8;
    if bytes.len() < header {
        return Err(GridError::Truncated);
    }
    let resolution = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if resolution < 2 {
        return Err(GridError::ResolutionTooSmall(resolution));
    }
    let mut origin = Point3::origin();
    for a in 0..3 {
        let s = 8 + a * 8;
        origin[a] = f64::from_le_bytes(bytes[s..s + 8].try_into().unwrap());
    }
    let cell_size = f64::from_le_bytes(bytes[32..40].try_into().unwrap());
    let n = resolution as usize;
    let expected = n * n * n * 4;
    if bytes.len() != header + expected {
        return Err(GridError::Truncated);
    }
    let values = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(UnsignedDistanceGrid {
        resolution,
        origin,
        cell_size,
        values,
    })
}
