//! Procedural shape families for benchmarks and property suites.
//!
//! Shapes vary along two axes: *structure* (leg or bar count), which a
//! rigidity-regularized deformation cannot change, and *attributes* (height,
//! thickness, aspect), which it can. Ground truth about deformability is
//! therefore known by construction.

use crate::geometry::{GeometryError, ShapeId, ShapeRecord, TriangleMesh};
use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Interns exactly-coincident vertices so adjacent faces and boxes share
/// indices.
struct Welder {
    verts: Vec<Point3<f64>>,
    ids: HashMap<[u64; 3], u32>,
}

impl Welder {
    fn new() -> Self {
        Self {
            verts: Vec::new(),
            ids: HashMap::new(),
        }
    }

    fn intern(&mut self, p: Point3<f64>) -> u32 {
        let key = [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()];
        *self.ids.entry(key).or_insert_with(|| {
            self.verts.push(p);
            (self.verts.len() - 1) as u32
        })
    }
}

// lerp with exact endpoints so shared edges produce bit-identical vertices.
fn lerp_exact(a: f64, b: f64, i: usize, n: usize) -> f64 {
    if i == 0 {
        a
    } else if i == n {
        b
    } else {
        a + (b - a) * (i as f64 / n as f64)
    }
}

fn gridded_face(
    welder: &mut Welder,
    tris: &mut Vec<[u32; 3]>,
    lo: [f64; 3],
    hi: [f64; 3],
    counts: [usize; 3],
    axis: usize,
    at: f64,
    flip: bool,
) {
    let (u, v) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (nu, nv) = (counts[u], counts[v]);
    let mut grid_point = |i: usize, j: usize| -> u32 {
        let mut c = [0.0; 3];
        c[axis] = at;
        c[u] = lerp_exact(lo[u], hi[u], i, nu);
        c[v] = lerp_exact(lo[v], hi[v], j, nv);
        welder.intern(Point3::new(c[0], c[1], c[2]))
    };
    for j in 0..nv {
        for i in 0..nu {
            let a = grid_point(i, j);
            let b = grid_point(i + 1, j);
            let c = grid_point(i + 1, j + 1);
            let d = grid_point(i, j + 1);
            if flip {
                tris.push([a, c, b]);
                tris.push([a, d, c]);
            } else {
                tris.push([a, b, c]);
                tris.push([a, c, d]);
            }
        }
    }
}

fn box_into(
    welder: &mut Welder,
    tris: &mut Vec<[u32; 3]>,
    center: [f64; 3],
    half_extents: [f64; 3],
    subdiv_target: f64,
) {
    let lo = [
        center[0] - half_extents[0],
        center[1] - half_extents[1],
        center[2] - half_extents[2],
    ];
    let hi = [
        center[0] + half_extents[0],
        center[1] + half_extents[1],
        center[2] + half_extents[2],
    ];
    let counts = [
        (((hi[0] - lo[0]) / subdiv_target).ceil() as usize).max(1),
        (((hi[1] - lo[1]) / subdiv_target).ceil() as usize).max(1),
        (((hi[2] - lo[2]) / subdiv_target).ceil() as usize).max(1),
    ];
    gridded_face(welder, tris, lo, hi, counts, 0, lo[0], true);
    gridded_face(welder, tris, lo, hi, counts, 0, hi[0], false);
    gridded_face(welder, tris, lo, hi, counts, 1, lo[1], false);
    gridded_face(welder, tris, lo, hi, counts, 1, hi[1], true);
    gridded_face(welder, tris, lo, hi, counts, 2, lo[2], true);
    gridded_face(welder, tris, lo, hi, counts, 2, hi[2], false);
}

/// Axis-aligned box with gridded faces, welded at exactly-coincident
/// vertices. `subdiv_target` is the largest acceptable edge length.
pub fn box_mesh(
    center: [f64; 3],
    half_extents: [f64; 3],
    subdiv_target: f64,
) -> (Vec<Point3<f64>>, Vec<[u32; 3]>) {
    let mut welder = Welder::new();
    let mut tris = Vec::new();
    box_into(&mut welder, &mut tris, center, half_extents, subdiv_target);
    (welder.verts, tris)
}

/// Concatenates box parts into one mesh, welding coincident vertices across
/// parts when their grids align exactly.
pub fn union_boxes(
    parts: &[([f64; 3], [f64; 3])],
    subdiv_target: f64,
) -> Result<TriangleMesh, GeometryError> {
    let mut welder = Welder::new();
    let mut tris = Vec::new();
    for (center, half) in parts {
        box_into(&mut welder, &mut tris, *center, *half, subdiv_target);
    }
    TriangleMesh::new(welder.verts, tris)
}

/// Longitude/latitude sphere, used by tests that need a smooth convex shape.
pub fn uv_sphere(radius: f64, n_long: usize, n_lat: usize) -> TriangleMesh {
    assert!(n_long >= 3 && n_lat >= 2);
    let mut verts = vec![Point3::new(0.0, 0.0, radius)];
    for j in 1..n_lat {
        let theta = std::f64::consts::PI * j as f64 / n_lat as f64;
        for i in 0..n_long {
            let phi = 2.0 * std::f64::consts::PI * i as f64 / n_long as f64;
            verts.push(Point3::new(
                radius * theta.sin() * phi.cos(),
                radius * theta.sin() * phi.sin(),
                radius * theta.cos(),
            ));
        }
    }
    verts.push(Point3::new(0.0, 0.0, -radius));
    let south = (verts.len() - 1) as u32;
    let ring = |j: usize, i: usize| -> u32 { (1 + (j - 1) * n_long + i % n_long) as u32 };
    let mut tris = Vec::new();
    for i in 0..n_long {
        tris.push([0, ring(1, i), ring(1, i + 1)]);
        tris.push([south, ring(n_lat - 1, i + 1), ring(n_lat - 1, i)]);
    }
    for j in 1..n_lat - 1 {
        for i in 0..n_long {
            let (a, b) = (ring(j, i), ring(j, i + 1));
            let (c, d) = (ring(j + 1, i), ring(j + 1, i + 1));
            tris.push([a, b, d]);
            tris.push([a, d, c]);
        }
    }
    TriangleMesh::new(verts, tris).unwrap()
}

/// Structural variant of a table: the axis a deformation cannot cross.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableStructure {
    FourLeg,
    Pedestal,
    TwoPanel,
}

pub const TABLE_STRUCTURES: [TableStructure; 3] = [
    TableStructure::FourLeg,
    TableStructure::Pedestal,
    TableStructure::TwoPanel,
];

/// Attribute knobs a deformation can absorb.
#[derive(Debug, Clone, Copy)]
pub struct TableAttributes {
    pub height: f64,
    pub width: f64,
    pub depth: f64,
    pub top_thickness: f64,
    pub support_thickness: f64,
}

const SUBDIV: f64 = 0.09;

pub fn table_mesh(
    structure: TableStructure,
    attrs: &TableAttributes,
) -> Result<TriangleMesh, GeometryError> {
    let TableAttributes {
        height: h,
        width: w,
        depth: d,
        top_thickness: tt,
        support_thickness: st,
    } = *attrs;
    let mut parts: Vec<([f64; 3], [f64; 3])> = Vec::new();
    // Top slab.
    parts.push(([0.0, 0.0, h - tt * 0.5], [w * 0.5, d * 0.5, tt * 0.5]));
    let leg_h = h - tt;
    match structure {
        TableStructure::FourLeg => {
            let ox = w * 0.5 - st;
            let oy = d * 0.5 - st;
            for sx in [-1.0, 1.0] {
                for sy in [-1.0, 1.0] {
                    parts.push((
                        [sx * ox, sy * oy, leg_h * 0.5],
                        [st * 0.5, st * 0.5, leg_h * 0.5],
                    ));
                }
            }
        }
        TableStructure::Pedestal => {
            let s = st * 2.2;
            parts.push(([0.0, 0.0, leg_h * 0.5], [s * 0.5, s * 0.5, leg_h * 0.5]));
        }
        TableStructure::TwoPanel => {
            let ox = w * 0.5 - st * 0.75;
            for sx in [-1.0, 1.0] {
                parts.push((
                    [sx * ox, 0.0, leg_h * 0.5],
                    [st * 0.5, d * 0.45, leg_h * 0.5],
                ));
            }
        }
    }
    union_boxes(&parts, SUBDIV)
}

/// Downward-facing comb: a spine bar with `teeth` evenly spread posts. The
/// canonical asymmetry witness; posts can merge but never split.
pub fn comb_mesh(teeth: usize, tooth_thickness: f64, height: f64) -> Result<TriangleMesh, GeometryError> {
    assert!(teeth >= 1);
    let span = 1.2f64;
    let spine_h = 0.18;
    let depth = 0.22;
    let mut parts: Vec<([f64; 3], [f64; 3])> = Vec::new();
    parts.push((
        [0.0, 0.0, height - spine_h * 0.5],
        [span * 0.5, depth * 0.5, spine_h * 0.5],
    ));
    let tooth_h = height - spine_h;
    // Tooth centers, symmetric about zero with even spacing.
    let spread = span - 0.3;
    for t in 0..teeth {
        let x = if teeth == 1 {
            0.0
        } else {
            -spread * 0.5 + spread * t as f64 / (teeth - 1) as f64
        };
        parts.push((
            [x, 0.0, tooth_h * 0.5],
            [tooth_thickness * 0.5, depth * 0.5, tooth_h * 0.5],
        ));
    }
    union_boxes(&parts, SUBDIV)
}

/// Family selector for the procedural generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    /// Tables with four-leg / pedestal / two-panel structures.
    Tables,
    /// Combs with 2..=5 teeth.
    Combs,
    /// Plain boxes; one structure, attribute variation only.
    Boxes,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FamilyParams {
    pub kind: FamilyKind,
    /// Training-cloud sample count for generated records.
    pub train_points: usize,
    /// Evaluation-cloud sample count for generated records.
    pub eval_points: usize,
}

impl FamilyParams {
    pub fn new(kind: FamilyKind) -> Self {
        Self {
            kind,
            train_points: crate::geometry::TRAIN_CLOUD_POINTS,
            eval_points: crate::geometry::EVAL_CLOUD_POINTS,
        }
    }

    pub fn with_cloud_sizes(mut self, train: usize, eval: usize) -> Self {
        self.train_points = train;
        self.eval_points = eval;
        self
    }
}

fn range(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Generates the raw (unnormalized) mesh of family member `index` and its
/// structure label. Deterministic in `(params.kind, index, seed)`.
pub fn family_member(
    kind: FamilyKind,
    index: usize,
    seed: u64,
) -> Result<(TriangleMesh, String), GeometryError> {
    let member_seed = crate::seed::derive_indexed(seed, "synth_member", index as u64);
    let mut rng = ChaCha12Rng::seed_from_u64(member_seed);
    match kind {
        FamilyKind::Tables => {
            let structure = TABLE_STRUCTURES[index % TABLE_STRUCTURES.len()];
            let attrs = TableAttributes {
                height: range(&mut rng, 0.55, 1.45),
                width: range(&mut rng, 0.8, 1.3),
                depth: range(&mut rng, 0.55, 0.95),
                top_thickness: range(&mut rng, 0.05, 0.14),
                support_thickness: range(&mut rng, 0.07, 0.13),
            };
            Ok((table_mesh(structure, &attrs)?, format!("{structure:?}")))
        }
        FamilyKind::Combs => {
            let teeth = 2 + index % 4;
            let mesh = comb_mesh(
                teeth,
                range(&mut rng, 0.06, 0.12),
                range(&mut rng, 0.7, 1.3),
            )?;
            Ok((mesh, format!("Teeth{teeth}")))
        }
        FamilyKind::Boxes => {
            let mesh = union_boxes(
                &[(
                    [0.0, 0.0, 0.0],
                    [
                        range(&mut rng, 0.3, 0.8),
                        range(&mut rng, 0.3, 0.8),
                        range(&mut rng, 0.3, 0.8),
                    ],
                )],
                SUBDIV,
            )?;
            Ok((mesh, "Box".to_string()))
        }
    }
}

/// Generates `count` normalized records with ids `0..count`. Regenerable
/// from `(params, count, seed)`.
pub fn generate_synthetic(
    params: &FamilyParams,
    count: usize,
    seed: u64,
) -> Result<Vec<ShapeRecord>, GeometryError> {
    assert!(count >= 2, "a family needs at least two shapes");
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let (mesh, _) = family_member(params.kind, i, seed)?;
        out.push(ShapeRecord::build(
            ShapeId(i as u32),
            &mesh,
            seed,
            params.train_points,
            params.eval_points,
        )?);
    }
    Ok(out)
}

/// Structure label of family member `index` (matches `family_member`).
pub fn structure_label(kind: FamilyKind, index: usize) -> String {
    match kind {
        FamilyKind::Tables => format!("{:?}", TABLE_STRUCTURES[index % TABLE_STRUCTURES.len()]),
        FamilyKind::Combs => format!("Teeth{}", 2 + index % 4),
        FamilyKind::Boxes => "Box".to_string(),
    }
}

/// The canonical asymmetry witness: a four-teeth comb and a two-teeth comb
/// with identical spans, so every source tooth has a nearby merge target.
pub fn comb_pair(
    train_points: usize,
    eval_points: usize,
    seed: u64,
) -> Result<(ShapeRecord, ShapeRecord), GeometryError> {
    let four = comb_mesh(4, 0.09, 1.0)?;
    let two = comb_mesh(2, 0.12, 1.0)?;
    Ok((
        ShapeRecord::build(ShapeId(0), &four, seed, train_points, eval_points)?,
        ShapeRecord::build(ShapeId(1), &two, seed, train_points, eval_points)?,
    ))
}
