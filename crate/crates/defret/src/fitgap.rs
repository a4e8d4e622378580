//! Fitting-gap computation, pair sampling, and the persistent gap table.
//!
//! The fitting gap from source `s` to target `t` is the Chamfer distance
//! between `s` deformed toward `t`'s distance field and `t` itself. It is
//! non-negative, vanishes on the diagonal up to discretization, and is
//! deliberately asymmetric: parts can merge under deformation but never
//! split.

use crate::deform::{deform, DeformError, DeformationProblem, SolverOptions};
use crate::distance_field::{build_udf_in_cube, GridError, UnsignedDistanceGrid};
use crate::geometry::{
    chamfer_pm_cached, chamfer_pp_cached, chamfer_pp_variant, ChamferVariant, SamplePattern,
    ShapeId, ShapeRecord, SpatialIndex, TriangleBvh,
};
use nalgebra::Point3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const TABLE_MAGIC: &[u8; 4] = b"DFGT";
pub const TABLE_VERSION: u16 = 1;
const RECORD_SIZE: usize = 28;

/// Side of the cubic grid domain used for normalized shapes. A unit-diagonal
/// bbox centered at the origin fits with at least a 10% margin on every
/// axis.
pub const NORMALIZED_DOMAIN_SIDE: f64 = 1.1;

#[derive(Debug, Error)]
pub enum FitGapError {
    #[error("need at least 2 shapes, got {0}")]
    TooFewShapes(usize),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("deformation of pair ({source_id} -> {target_id}) failed: {err}")]
    Solver {
        source_id: ShapeId,
        target_id: ShapeId,
        err: DeformError,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected DFGT")]
    BadMagic,
    #[error("unsupported table version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated table file")]
    Truncated,
    #[error("checksum mismatch in record for pair ({0}, {1})")]
    CrcMismatch(u32, u32),
}

/// One table entry: the training-time gap on sampled clouds, and optionally
/// the denser point-to-mesh gap used by evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitGapEntry {
    pub e_train: f64,
    pub e_eval: Option<f64>,
}

/// Sparse asymmetric map `(source, target) -> fitting gap`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitGapTable {
    entries: BTreeMap<(ShapeId, ShapeId), FitGapEntry>,
}

impl FitGapTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, source: ShapeId, target: ShapeId) -> Option<&FitGapEntry> {
        self.entries.get(&(source, target))
    }

    pub fn e_train(&self, source: ShapeId, target: ShapeId) -> Option<f64> {
        self.get(source, target).map(|e| e.e_train)
    }

    pub fn e_eval(&self, source: ShapeId, target: ShapeId) -> Option<f64> {
        self.get(source, target).and_then(|e| e.e_eval)
    }

    pub fn insert(&mut self, source: ShapeId, target: ShapeId, entry: FitGapEntry) {
        self.entries.insert((source, target), entry);
    }

    pub fn contains(&self, source: ShapeId, target: ShapeId) -> bool {
        self.entries.contains_key(&(source, target))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(ShapeId, ShapeId), &FitGapEntry)> {
        self.entries.iter()
    }

    /// All sources with a stored gap toward `target`, with their training
    /// gaps, in ascending source order.
    pub fn sources_for(&self, target: ShapeId) -> Vec<(ShapeId, f64)> {
        self.entries
            .iter()
            .filter(|((_, t), _)| *t == target)
            .map(|((s, _), e)| (*s, e.e_train))
            .collect()
    }

    /// Canonical serialization: header then records sorted by (source,
    /// target). Byte-identical for equal contents.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FitGapError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(TABLE_MAGIC)?;
        w.write_all(&TABLE_VERSION.to_le_bytes())?;
        for ((s, t), entry) in &self.entries {
            w.write_all(&encode_record(*s, *t, entry))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FitGapError> {
        Self::load_impl(path, false)
    }

    /// Journal-tolerant load: a short trailing record (interrupted append)
    /// is dropped instead of failing.
    pub fn load_lenient(path: impl AsRef<Path>) -> Result<Self, FitGapError> {
        Self::load_impl(path, true)
    }

    fn load_impl(path: impl AsRef<Path>, lenient: bool) -> Result<Self, FitGapError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 6 || &bytes[..4] != TABLE_MAGIC {
            return Err(FitGapError::BadMagic);
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != TABLE_VERSION {
            return Err(FitGapError::UnsupportedVersion(version));
        }
        let body = &bytes[6..];
        let remainder = body.len() % RECORD_SIZE;
        if remainder != 0 && !lenient {
            return Err(FitGapError::Truncated);
        }
        let mut table = Self::new();
        for rec in body[..body.len() - remainder].chunks_exact(RECORD_SIZE) {
            let (s, t, entry) = decode_record(rec)?;
            table.insert(s, t, entry);
        }
        Ok(table)
    }
}

fn encode_record(s: ShapeId, t: ShapeId, entry: &FitGapEntry) -> [u8; RECORD_SIZE] {
    let mut rec = [0u8; RECORD_SIZE];
    rec[0..4].copy_from_slice(&s.0.to_le_bytes());
    rec[4..8].copy_from_slice(&t.0.to_le_bytes());
    rec[8..16].copy_from_slice(&entry.e_train.to_le_bytes());
    rec[16..24].copy_from_slice(&entry.e_eval.unwrap_or(f64::NAN).to_le_bytes());
    let crc = crc32fast::hash(&rec[..24]);
    rec[24..28].copy_from_slice(&crc.to_le_bytes());
    rec
}

fn decode_record(rec: &[u8]) -> Result<(ShapeId, ShapeId, FitGapEntry), FitGapError> {
    let s = u32::from_le_bytes(rec[0..4].try_into().unwrap());
    let t = u32::from_le_bytes(rec[4..8].try_into().unwrap());
    let crc = u32::from_le_bytes(rec[24..28].try_into().unwrap());
    if crc != crc32fast::hash(&rec[..24]) {
        return Err(FitGapError::CrcMismatch(s, t));
    }
    let e_train = f64::from_le_bytes(rec[8..16].try_into().unwrap());
    let e_eval_raw = f64::from_le_bytes(rec[16..24].try_into().unwrap());
    let e_eval = if e_eval_raw.is_nan() {
        None
    } else {
        Some(e_eval_raw)
    };
    Ok((ShapeId(s), ShapeId(t), FitGapEntry { e_train, e_eval }))
}

/// Append-only record writer used as the precompute resume journal.
pub struct TableJournal {
    file: std::fs::File,
}

impl TableJournal {
    /// Opens (or creates with a header) the journal at `path`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, FitGapError> {
        let path = path.as_ref();
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        if fresh {
            file.write_all(TABLE_MAGIC)?;
            file.write_all(&TABLE_VERSION.to_le_bytes())?;
        }
        Ok(Self { file })
    }

    pub fn append(
        &mut self,
        s: ShapeId,
        t: ShapeId,
        entry: &FitGapEntry,
    ) -> Result<(), FitGapError> {
        self.file.write_all(&encode_record(s, t, entry))?;
        self.file.flush()?;
        Ok(())
    }
}

/// Per-target candidate sets: the nearest shapes by point-to-point Chamfer
/// distance plus uniformly random others.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSampling {
    pub sources_per_target: BTreeMap<ShapeId, Vec<ShapeId>>,
    pub seed: u64,
}

pub const NEAREST_CANDIDATES: usize = 50;
pub const RANDOM_CANDIDATES: usize = 50;

impl PairSampling {
    pub fn pair_count(&self) -> usize {
        self.sources_per_target.values().map(Vec::len).sum()
    }
}

/// For every target: the `NEAREST_CANDIDATES` closest other shapes by
/// `chamfer_pp` on training clouds, topped up with `RANDOM_CANDIDATES`
/// distinct random others. Databases smaller than the budget use all other
/// shapes.
pub fn sample_pairs(db: &[ShapeRecord], seed: u64) -> Result<PairSampling, FitGapError> {
    if db.len() < 2 {
        return Err(FitGapError::TooFewShapes(db.len()));
    }
    let indexes: Vec<SpatialIndex> = db
        .par_iter()
        .map(|r| SpatialIndex::build(&r.cloud_train.points))
        .collect();

    let mut sources_per_target = BTreeMap::new();
    let budget = NEAREST_CANDIDATES + RANDOM_CANDIDATES;
    for (ti, target) in db.iter().enumerate() {
        let others: Vec<usize> = (0..db.len()).filter(|&si| si != ti).collect();
        let chosen: Vec<ShapeId> = if others.len() <= budget {
            others.iter().map(|&si| db[si].id).collect()
        } else {
            let mut dist: Vec<(f64, ShapeId)> = others
                .par_iter()
                .map(|&si| {
                    let d = chamfer_pp_cached(
                        &db[si].cloud_train,
                        &indexes[si],
                        &target.cloud_train,
                        &indexes[ti],
                    );
                    (d, db[si].id)
                })
                .collect();
            dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let nearest: Vec<ShapeId> = dist[..NEAREST_CANDIDATES].iter().map(|d| d.1).collect();
            let mut remaining: Vec<ShapeId> =
                dist[NEAREST_CANDIDATES..].iter().map(|d| d.1).collect();
            remaining.sort_unstable();
            let mut rng = ChaCha12Rng::seed_from_u64(crate::seed::derive_indexed(
                seed,
                "pair_sampling",
                target.id.0 as u64,
            ));
            remaining.shuffle(&mut rng);
            let mut chosen = nearest;
            chosen.extend(remaining.into_iter().take(RANDOM_CANDIDATES));
            chosen
        };
        let mut chosen = chosen;
        chosen.sort_unstable();
        chosen.dedup();
        debug_assert!(!chosen.contains(&target.id));
        sources_per_target.insert(target.id, chosen);
    }
    Ok(PairSampling {
        sources_per_target,
        seed,
    })
}

/// Knobs for a fitting-gap computation.
#[derive(Debug, Clone)]
pub struct FitGapComputeOptions {
    /// Distance-grid resolution per axis.
    pub resolution: u32,
    pub solver: SolverOptions,
    /// Rigidity weight of the deformation energy.
    pub lambda: f64,
    /// Also compute the dense point-to-mesh gap.
    pub with_eval: bool,
    pub chamfer: ChamferVariant,
}

impl Default for FitGapComputeOptions {
    fn default() -> Self {
        Self {
            resolution: 100,
            solver: SolverOptions::default(),
            lambda: 1.0,
            with_eval: false,
            chamfer: ChamferVariant::Squared,
        }
    }
}

/// Discretization-driven bound under which a diagonal gap `e(t, t)` counts
/// as zero: both one-way means stay within one squared cell.
pub fn identity_tolerance(cell_size: f64) -> f64 {
    2.0 * cell_size * cell_size
}

/// Distance grid of a normalized target over the fixed cubic domain shared
/// by all normalized shapes.
pub fn target_udf(
    target: &ShapeRecord,
    resolution: u32,
) -> Result<UnsignedDistanceGrid, FitGapError> {
    Ok(build_udf_in_cube(
        &target.mesh,
        &Point3::origin(),
        NORMALIZED_DOMAIN_SIDE,
        resolution,
    )?)
}

#[derive(Debug, Clone, Copy)]
pub struct FitGapValue {
    pub e_train: f64,
    pub e_eval: Option<f64>,
}

/// Deforms `s` toward `t` and measures the residual gap.
///
/// The deformed surface is resampled by transporting `s`'s own sampling
/// pattern (same seed, same barycentric draws) through the deformation, so
/// the diagonal case keeps point-to-point correspondence with the stored
/// cloud and lands under [`identity_tolerance`].
pub fn compute_fitgap(
    s: &ShapeRecord,
    t: &ShapeRecord,
    opts: &FitGapComputeOptions,
) -> Result<FitGapValue, FitGapError> {
    let udf = target_udf(t, opts.resolution)?;
    compute_fitgap_with_udf(s, t, &udf, opts)
}

/// `compute_fitgap` against a prebuilt target grid; precompute shares one
/// grid across all sources of a target.
pub fn compute_fitgap_with_udf(
    s: &ShapeRecord,
    t: &ShapeRecord,
    udf: &UnsignedDistanceGrid,
    opts: &FitGapComputeOptions,
) -> Result<FitGapValue, FitGapError> {
    let problem = DeformationProblem::new(s.mesh.clone(), udf.clone()).with_lambda(opts.lambda);
    let result = deform(&problem, &opts.solver).map_err(|err| FitGapError::Solver {
        source_id: s.id,
        target_id: t.id,
        err,
    })?;
    let deformed = s.mesh.with_vertices(result.vertices);

    let pattern = SamplePattern::draw(&s.mesh, s.cloud_train.len(), s.cloud_train.seed)?;
    let resampled = pattern.evaluate(&deformed);
    let e_train = chamfer_pp_variant(&resampled, &t.cloud_train, opts.chamfer)?;

    let e_eval = if opts.with_eval {
        let s_eval = s.cloud_eval()?;
        let t_eval = t.cloud_eval()?;
        let eval_pattern = SamplePattern::draw(&s.mesh, s_eval.len(), s_eval.seed)?;
        let deformed_eval = eval_pattern.evaluate(&deformed);
        let bvh_deformed = TriangleBvh::build(&deformed);
        let bvh_target = TriangleBvh::build(&t.mesh);
        Some(chamfer_pm_cached(
            &deformed_eval,
            &bvh_deformed,
            t_eval,
            &bvh_target,
        ))
    } else {
        None
    };

    Ok(FitGapValue { e_train, e_eval })
}

/// A pair whose computation failed; precompute records these and continues.
#[derive(Debug)]
pub struct PairFailure {
    pub source: ShapeId,
    pub target: ShapeId,
    pub error: FitGapError,
}

/// Computes every `(s, t)` pair of the sampling into `table`, skipping
/// entries already present. Pairs are grouped by target so each grid is
/// built once; sources of a target run in parallel, and the resulting table
/// content is independent of worker count and evaluation order.
pub fn precompute(
    db: &[ShapeRecord],
    sampling: &PairSampling,
    opts: &FitGapComputeOptions,
    table: &mut FitGapTable,
    mut journal: Option<&mut TableJournal>,
) -> Result<Vec<PairFailure>, FitGapError> {
    let by_id: BTreeMap<ShapeId, &ShapeRecord> = db.iter().map(|r| (r.id, r)).collect();
    let mut failures = Vec::new();
    for (&target_id, sources) in &sampling.sources_per_target {
        let target = by_id[&target_id];
        let todo: Vec<ShapeId> = sources
            .iter()
            .copied()
            .filter(|&s| !table.contains(s, target_id))
            .collect();
        if todo.is_empty() {
            continue;
        }
        let udf = target_udf(target, opts.resolution)?;
        let results: Vec<(ShapeId, Result<FitGapValue, FitGapError>)> = todo
            .par_iter()
            .map(|&sid| {
                let source = by_id[&sid];
                (sid, compute_fitgap_with_udf(source, target, &udf, opts))
            })
            .collect();
        for (sid, result) in results {
            match result {
                Ok(value) => {
                    let entry = FitGapEntry {
                        e_train: value.e_train,
                        e_eval: value.e_eval,
                    };
                    table.insert(sid, target_id, entry);
                    if let Some(j) = journal.as_deref_mut() {
                        j.append(sid, target_id, &entry)?;
                    }
                }
                Err(error) => failures.push(PairFailure {
                    source: sid,
                    target: target_id,
                    error,
                }),
            }
        }
    }
    Ok(failures)
}
