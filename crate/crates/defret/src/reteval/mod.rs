//! Retrieval by egocentric distance, the Ranked-CD baseline, and the metric
//! protocols (before/after-deformation distances, mean rank, recall@1).

pub mod synth;

use crate::embed::{ego_distance_sq, encode, forward, EgocentricCode, EmbedError, EmbeddingModel};
use crate::fitgap::{compute_fitgap_with_udf, target_udf, FitGapComputeOptions, FitGapEntry, FitGapError, FitGapTable};
use crate::geometry::{
    chamfer_pm_cached, chamfer_pp_cached, GeometryError, ShapeId, ShapeRecord, SpatialIndex,
    TriangleBvh,
};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetEvalError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    FitGap(#[from] FitGapError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected DRIX")]
    BadMagic,
    #[error("unsupported index version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated index file")]
    Truncated,
    #[error("shape {0} missing from index")]
    MissingShape(ShapeId),
}

/// Egocentric codes (with fields) for every database shape.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub ids: Vec<ShapeId>,
    pub codes: Vec<EgocentricCode>,
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn code_of(&self, id: ShapeId) -> Option<&EgocentricCode> {
        self.ids.iter().position(|&i| i == id).map(|p| &self.codes[p])
    }
}

/// One egocentric code (with field) per database shape, all from the same
/// checkpoint.
pub fn build_index(
    db: &[ShapeRecord],
    model: &EmbeddingModel,
) -> Result<RetrievalIndex, RetEvalError> {
    let mut ids = Vec::with_capacity(db.len());
    let mut codes = Vec::with_capacity(db.len());
    for record in db {
        ids.push(record.id);
        codes.push(forward(model, &record.cloud_train.points, true)?.code());
    }
    Ok(RetrievalIndex { ids, codes })
}

pub const INDEX_MAGIC: &[u8; 4] = b"DRIX";
pub const INDEX_VERSION: u16 = 1;

/// Index file: magic `DRIX`, u16 version, u32 count, u32 k, then per shape
/// u32 id followed by k f32 embedding and k f32 field values.
pub fn save_index(index: &RetrievalIndex, path: impl AsRef<Path>) -> Result<(), RetEvalError> {
    let k = index.codes.first().map(|c| c.z.len()).unwrap_or(0);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(INDEX_MAGIC)?;
    w.write_all(&INDEX_VERSION.to_le_bytes())?;
    w.write_all(&(index.len() as u32).to_le_bytes())?;
    w.write_all(&(k as u32).to_le_bytes())?;
    for (id, code) in index.ids.iter().zip(&index.codes) {
        w.write_all(&id.0.to_le_bytes())?;
        for v in code.z.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        let g = code.g.as_ref().ok_or(RetEvalError::Embed(EmbedError::MissingField))?;
        for v in g.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_index(path: impl AsRef<Path>) -> Result<RetrievalIndex, RetEvalError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 6 || &bytes[..4] != INDEX_MAGIC {
        return Err(RetEvalError::BadMagic);
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != INDEX_VERSION {
        return Err(RetEvalError::UnsupportedVersion(version));
    }
    if bytes.len() < 14 {
        return Err(RetEvalError::Truncated);
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let k = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let record = 4 + 8 * k;
    if bytes.len() != 14 + count * record {
        return Err(RetEvalError::Truncated);
    }
    let mut ids = Vec::with_capacity(count);
    let mut codes = Vec::with_capacity(count);
    let mut pos = 14;
    for _ in 0..count {
        let id = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        pos += 4;
        let mut z = Array1::zeros(k);
        for v in z.iter_mut() {
            *v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as f64;
            pos += 4;
        }
        let mut g = Array1::zeros(k);
        for v in g.iter_mut() {
            *v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as f64;
            pos += 4;
        }
        ids.push(ShapeId(id));
        codes.push(EgocentricCode { z, g: Some(g) });
    }
    Ok(RetrievalIndex { ids, codes })
}

/// Sorts candidate ids ascending by egocentric distance from the query
/// (each database shape observes with its own field); exact ties fall back
/// to the lower id.
pub fn rank_by_delta<'a>(
    query_code: &EgocentricCode,
    candidates: impl Iterator<Item = (ShapeId, &'a EgocentricCode)>,
) -> Result<Vec<(ShapeId, f64)>, RetEvalError> {
    let mut scored: Vec<(ShapeId, f64)> = candidates
        .map(|(id, code)| ego_distance_sq(query_code, code).map(|d| (id, d.sqrt())))
        .collect::<Result<_, _>>()?;
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(scored)
}

/// Top-`n` database shapes for a query cloud, the query itself excluded.
pub fn retrieve(
    query: &ShapeRecord,
    index: &RetrievalIndex,
    model: &EmbeddingModel,
    n: usize,
) -> Result<Vec<(ShapeId, f64)>, RetEvalError> {
    let query_code = EgocentricCode {
        z: encode_query(model, query)?,
        g: None,
    };
    let ranked = rank_by_delta(
        &query_code,
        index
            .ids
            .iter()
            .zip(&index.codes)
            .filter(|(id, _)| **id != query.id)
            .map(|(id, code)| (*id, code)),
    )?;
    Ok(ranked.into_iter().take(n).collect())
}

fn encode_query(model: &EmbeddingModel, query: &ShapeRecord) -> Result<Array1<f64>, EmbedError> {
    let cache = forward(model, &query.cloud_train.points, false)?;
    Ok(cache.f_acts.last().unwrap().clone())
}

/// Non-learned baseline: ascending two-way Chamfer distance on training
/// clouds.
pub fn ranked_cd_baseline(
    query: &ShapeRecord,
    db: &[ShapeRecord],
    n: usize,
) -> Result<Vec<(ShapeId, f64)>, RetEvalError> {
    let query_index = SpatialIndex::build(&query.cloud_train.points);
    let mut scored: Vec<(ShapeId, f64)> = db
        .par_iter()
        .filter(|r| r.id != query.id)
        .map(|r| {
            let idx = SpatialIndex::build(&r.cloud_train.points);
            let d = chamfer_pp_cached(&r.cloud_train, &idx, &query.cloud_train, &query_index);
            (r.id, d)
        })
        .collect();
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(n).collect())
}

/// A retrieval method under evaluation: produces a full ordering of the
/// candidate pool for a query.
pub trait Ranker {
    fn rank(
        &self,
        query: &ShapeRecord,
        pool: &[&ShapeRecord],
    ) -> Result<Vec<ShapeId>, RetEvalError>;
    fn name(&self) -> &'static str;
}

/// Learned retrieval: egocentric distance under a trained model.
pub struct EgocentricRanker<'a> {
    pub index: &'a RetrievalIndex,
    pub model: &'a EmbeddingModel,
}

impl Ranker for EgocentricRanker<'_> {
    fn rank(
        &self,
        query: &ShapeRecord,
        pool: &[&ShapeRecord],
    ) -> Result<Vec<ShapeId>, RetEvalError> {
        let query_code = EgocentricCode {
            z: encode_query(self.model, query)?,
            g: None,
        };
        let candidates = pool
            .iter()
            .map(|r| {
                self.index
                    .code_of(r.id)
                    .map(|c| (r.id, c))
                    .ok_or(RetEvalError::MissingShape(r.id))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(rank_by_delta(&query_code, candidates.into_iter())?
            .into_iter()
            .map(|(id, _)| id)
            .collect())
    }

    fn name(&self) -> &'static str {
        "egocentric"
    }
}

/// Ranked-CD baseline as a [`Ranker`].
pub struct ChamferRanker;

impl Ranker for ChamferRanker {
    fn rank(
        &self,
        query: &ShapeRecord,
        pool: &[&ShapeRecord],
    ) -> Result<Vec<ShapeId>, RetEvalError> {
        let query_index = SpatialIndex::build(&query.cloud_train.points);
        let mut scored: Vec<(ShapeId, f64)> = pool
            .par_iter()
            .map(|r| {
                let idx = SpatialIndex::build(&r.cloud_train.points);
                (
                    r.id,
                    chamfer_pp_cached(&r.cloud_train, &idx, &query.cloud_train, &query_index),
                )
            })
            .collect();
        scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        Ok(scored.into_iter().map(|(id, _)| id).collect())
    }

    fn name(&self) -> &'static str {
        "ranked_cd"
    }
}

/// Evaluation protocol knobs.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Candidate-pool size per query for the ranking protocol.
    pub n_rank: usize,
    /// Retrieval depth for the best-of-top-N metrics.
    pub top_n: usize,
    pub seed: u64,
    /// Fitting-gap computation for on-demand after-deformation distances.
    pub fitgap: FitGapComputeOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_rank: 150,
            top_n: 3,
            seed: 0,
            fitgap: FitGapComputeOptions {
                with_eval: true,
                ..FitGapComputeOptions::default()
            },
        }
    }
}

/// Per-query evaluation row.
#[derive(Debug, Clone, serde::Serialize)]
pub struct QueryMetrics {
    pub query: ShapeId,
    pub top1: ShapeId,
    /// Before-deformation point-to-mesh distance of the top-1 retrieval.
    pub top1_dm: f64,
    /// After-deformation point-to-mesh distance of the top-1 retrieval.
    pub top1_em: f64,
    /// Best (smallest) before-deformation distance among the top-N.
    pub topn_dm: f64,
    /// Best after-deformation distance among the top-N.
    pub topn_em: f64,
    /// 1-based position of the top-1 retrieval in the pool sorted by
    /// after-deformation distance.
    pub rank: usize,
    /// Top-1 lies within the best five pool candidates.
    pub recall_at_1: bool,
    pub pool_size: usize,
}

/// Aggregated evaluation of one retrieval method.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsReport {
    pub method: String,
    pub per_query: Vec<QueryMetrics>,
    pub mean_top1_dm: f64,
    pub mean_top1_em: f64,
    pub mean_topn_dm: f64,
    pub mean_topn_em: f64,
    pub mean_rank: f64,
    pub recall_at_1: f64,
}

impl MetricsReport {
    fn aggregate(method: String, per_query: Vec<QueryMetrics>) -> Self {
        let n = per_query.len().max(1) as f64;
        let mean = |f: &dyn Fn(&QueryMetrics) -> f64| per_query.iter().map(|q| f(q)).sum::<f64>() / n;
        Self {
            mean_top1_dm: mean(&|q| q.top1_dm),
            mean_top1_em: mean(&|q| q.top1_em),
            mean_topn_dm: mean(&|q| q.topn_dm),
            mean_topn_em: mean(&|q| q.topn_em),
            mean_rank: mean(&|q| q.rank as f64),
            recall_at_1: per_query.iter().filter(|q| q.recall_at_1).count() as f64 / n,
            method,
            per_query,
        }
    }

    /// CSV export, one row per query. `paper_scale` multiplies the distance
    /// columns by 100 (the reporting convention of values quoted as
    /// `x 1e-2`).
    pub fn save_csv(&self, path: impl AsRef<Path>, paper_scale: bool) -> std::io::Result<()> {
        let s = if paper_scale { 100.0 } else { 1.0 };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            w,
            "query,top1,top1_dm,top1_em,topn_dm,topn_em,rank,recall_at_1,pool_size"
        )?;
        for q in &self.per_query {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                q.query,
                q.top1,
                q.top1_dm * s,
                q.top1_em * s,
                q.topn_dm * s,
                q.topn_em * s,
                q.rank,
                q.recall_at_1,
                q.pool_size
            )?;
        }
        w.flush()
    }

    pub fn save_json(&self, path: impl AsRef<Path>, paper_scale: bool) -> std::io::Result<()> {
        let s = if paper_scale { 100.0 } else { 1.0 };
        let json = serde_json::json!({
            "method": self.method,
            "queries": self.per_query.len(),
            "mean_top1_dm": self.mean_top1_dm * s,
            "mean_top1_em": self.mean_top1_em * s,
            "mean_topn_dm": self.mean_topn_dm * s,
            "mean_topn_em": self.mean_topn_em * s,
            "mean_rank": self.mean_rank,
            "recall_at_1": self.recall_at_1,
            "paper_scale": paper_scale,
        });
        std::fs::write(path, serde_json::to_string_pretty(&json).unwrap())
    }
}

/// Caches one BVH per shape for before-deformation distances.
#[derive(Default)]
pub struct BvhCache {
    map: HashMap<ShapeId, TriangleBvh>,
}

impl BvhCache {
    pub fn ensure(&mut self, record: &ShapeRecord) {
        self.map
            .entry(record.id)
            .or_insert_with(|| TriangleBvh::build(&record.mesh));
    }
}

/// Before-deformation point-to-mesh distance with cached BVHs.
fn dm_between(
    a: &ShapeRecord,
    b: &ShapeRecord,
    cache: &mut BvhCache,
) -> Result<f64, RetEvalError> {
    cache.ensure(a);
    cache.ensure(b);
    Ok(chamfer_pm_cached(
        a.cloud_eval()?,
        &cache.map[&a.id],
        b.cloud_eval()?,
        &cache.map[&b.id],
    ))
}

/// Fills missing after-deformation gaps `e(s, q)` for every pool member,
/// sharing the query's distance grid, and caches them in the table.
pub fn ensure_eval_gaps(
    query: &ShapeRecord,
    pool: &[&ShapeRecord],
    table: &mut FitGapTable,
    opts: &FitGapComputeOptions,
) -> Result<(), RetEvalError> {
    let missing: Vec<&ShapeRecord> = pool
        .iter()
        .copied()
        .filter(|r| table.e_eval(r.id, query.id).is_none())
        .collect();
    if missing.is_empty() {
        return Ok(());
    }
    let opts = FitGapComputeOptions {
        with_eval: true,
        ..opts.clone()
    };
    let udf = target_udf(query, opts.resolution)?;
    let computed: Vec<(ShapeId, Result<crate::fitgap::FitGapValue, FitGapError>)> = missing
        .par_iter()
        .map(|r| (r.id, compute_fitgap_with_udf(r, query, &udf, &opts)))
        .collect();
    for (id, result) in computed {
        let value = result?;
        table.insert(
            id,
            query.id,
            FitGapEntry {
                e_train: value.e_train,
                e_eval: value.e_eval,
            },
        );
    }
    Ok(())
}

/// Deterministic candidate pool for a query: up to `n_rank` database shapes
/// (query excluded), sampled with a seed derived from the query id.
pub fn candidate_pool<'a>(
    query: &ShapeRecord,
    db: &'a [ShapeRecord],
    n_rank: usize,
    seed: u64,
) -> Vec<&'a ShapeRecord> {
    let mut candidates: Vec<&ShapeRecord> = db.iter().filter(|r| r.id != query.id).collect();
    if candidates.len() > n_rank {
        let mut rng = ChaCha12Rng::seed_from_u64(crate::seed::derive_indexed(
            seed,
            "rank_pool",
            query.id.0 as u64,
        ));
        candidates.shuffle(&mut rng);
        candidates.truncate(n_rank);
        candidates.sort_by_key(|r| r.id);
    }
    candidates
}

/// Runs the full protocol for one retrieval method: best-of-top-N distances
/// before and after deformation, mean rank within the candidate pool, and
/// recall@1 (top-1 within the best five pool candidates).
pub fn evaluate(
    queries: &[ShapeRecord],
    db: &[ShapeRecord],
    ranker: &dyn Ranker,
    table: &mut FitGapTable,
    opts: &EvalOptions,
) -> Result<MetricsReport, RetEvalError> {
    let by_id: BTreeMap<ShapeId, &ShapeRecord> = db.iter().map(|r| (r.id, r)).collect();
    let mut bvhs = BvhCache::default();
    let mut per_query = Vec::with_capacity(queries.len());

    for query in queries {
        let pool = candidate_pool(query, db, opts.n_rank, opts.seed);
        ensure_eval_gaps(query, &pool, table, &opts.fitgap)?;

        let ranked = ranker.rank(query, &pool)?;
        let top: Vec<ShapeId> = ranked.iter().take(opts.top_n.max(1)).copied().collect();
        let top1 = top[0];

        let em_of = |id: ShapeId, table: &FitGapTable| table.e_eval(id, query.id).unwrap();
        let mut top1_dm = f64::NAN;
        let mut topn_dm = f64::INFINITY;
        let mut topn_em = f64::INFINITY;
        for (i, &id) in top.iter().enumerate() {
            let dm = dm_between(by_id[&id], query, &mut bvhs)?;
            if i == 0 {
                top1_dm = dm;
            }
            topn_dm = topn_dm.min(dm);
            topn_em = topn_em.min(em_of(id, table));
        }
        let top1_em = em_of(top1, table);

        // Pool sorted by true after-deformation distance; ties by id.
        let mut sorted: Vec<(f64, ShapeId)> =
            pool.iter().map(|r| (em_of(r.id, table), r.id)).collect();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let rank = 1 + sorted.iter().position(|&(_, id)| id == top1).unwrap();

        per_query.push(QueryMetrics {
            query: query.id,
            top1,
            top1_dm,
            top1_em,
            topn_dm,
            topn_em,
            rank,
            recall_at_1: rank <= 5,
            pool_size: pool.len(),
        });
    }
    Ok(MetricsReport::aggregate(ranker.name().to_string(), per_query))
}
