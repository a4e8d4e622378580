//! Training of the embedding: the margin strategy over positive/negative
//! sets and the regression strategy over fitting-gap probabilities, plus the
//! perplexity calibration, the optimizer, and hard-negative mining.

use crate::embed::{
    backward, ego_distance_sq, forward, EgocentricCode, EmbedError, EmbeddingModel, ModelConfig,
    ModelGrads,
};
use crate::fitgap::FitGapTable;
use crate::geometry::{ShapeId, ShapeRecord};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no query has both a positive and a negative candidate under the thresholds")]
    NoValidQueries,
    #[error("loss became non-finite at epoch {epoch}")]
    NanLoss { epoch: usize },
    #[error("gradient became non-finite at epoch {epoch}")]
    NanGradient { epoch: usize },
    #[error("perplexity calibration needs at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("perplexity {tau} outside (1, {n})")]
    BadPerplexity { tau: f64, n: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Normalization used to turn learned distances into probabilities. The
/// consistent mode makes small distances mean well-fitting (matching how
/// retrieval consumes the distance); the literal mode keeps the direct
/// square-over-sum form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProbMode {
    Literal,
    #[default]
    Consistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Margin,
    Regression,
}

/// Hyperparameters of both strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Fitting-gap threshold below which a source is a positive.
    pub sigma_p: f64,
    /// Fitting-gap threshold above which a source is a negative.
    pub sigma_n: f64,
    pub margin: f64,
    pub perplexity: f64,
    pub batch_queries: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_reg: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub prob_mode: ProbMode,
    /// Training-time downsample of each shape's cloud.
    pub train_points: usize,
    /// Hard-negative mining for the margin strategy.
    pub mining: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sigma_p: 3e-4,
            sigma_n: 6e-4,
            margin: 10.0,
            perplexity: 5.0,
            batch_queries: 8,
            n_pos: 2,
            n_neg: 13,
            n_reg: 15,
            learning_rate: 0.001,
            epochs: 350,
            seed: 0,
            prob_mode: ProbMode::Consistent,
            train_points: 1024,
            mining: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.sigma_p < self.sigma_n) {
            return Err(TrainError::InvalidConfig(format!(
                "sigma_p ({}) must be below sigma_n ({})",
                self.sigma_p, self.sigma_n
            )));
        }
        if self.perplexity < 2.0 {
            return Err(TrainError::InvalidConfig(format!(
                "perplexity {} must be at least 2",
                self.perplexity
            )));
        }
        for (name, v) in [
            ("batch_queries", self.batch_queries),
            ("n_pos", self.n_pos),
            ("n_neg", self.n_neg),
            ("n_reg", self.n_reg),
            ("epochs", self.epochs),
            ("train_points", self.train_points),
        ] {
            if v == 0 {
                return Err(TrainError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Probability conversions and perplexity calibration
// ---------------------------------------------------------------------------

/// Gaussian-kernel probabilities of fitting gaps:
/// `p_i = exp(-e_i^2 / 2 sigma^2) / sum_j exp(-e_j^2 / 2 sigma^2)`,
/// stabilized by shifting the exponent maximum to zero.
pub fn target_probs(e_values: &[f64], sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let logits: Vec<f64> = e_values
        .iter()
        .map(|&e| -(e * e) / (2.0 * sigma * sigma))
        .collect();
    softmax(&logits)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / sum).collect()
}

/// Shannon entropy in bits; `0 log 0 = 0`.
pub fn entropy_bits(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.log2())
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy)]
pub struct SigmaCalibration {
    pub sigma: f64,
    /// All gaps equal: entropy is log2(n) for every sigma, so the returned
    /// sigma is arbitrary.
    pub degenerate: bool,
}

/// Finds the bandwidth whose gap probabilities have entropy `log2(tau)`
/// bits, by bisection. Entropy is monotone increasing in sigma.
pub fn calibrate_sigma(e_values: &[f64], tau: f64) -> Result<SigmaCalibration, TrainError> {
    let n = e_values.len();
    if n < 2 {
        return Err(TrainError::TooFewValues(n));
    }
    if !(tau > 1.0 && tau < n as f64) {
        return Err(TrainError::BadPerplexity { tau, n });
    }
    let first = e_values[0];
    if e_values.iter().all(|&e| e == first) {
        return Ok(SigmaCalibration {
            sigma: 1.0,
            degenerate: true,
        });
    }
    let target = tau.log2();
    let scale = e_values.iter().fold(0.0f64, |m, &e| m.max(e.abs())).max(1e-300);
    let entropy_at = |sigma: f64| entropy_bits(&target_probs(e_values, sigma));

    let mut hi = scale;
    let mut grow = 0;
    while entropy_at(hi) < target && grow < 200 {
        hi *= 2.0;
        grow += 1;
    }
    let mut lo = scale * 1e-12;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if entropy_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(SigmaCalibration {
        sigma: 0.5 * (lo + hi),
        degenerate: false,
    })
}

/// Converts learned distances into probabilities. Literal:
/// `p_i = d_i^2 / sum d^2` (grows with distance). Consistent:
/// `p_i = (1/(d_i^2 + eta)) / sum (1/(d^2 + eta))` (shrinks with distance).
/// A fully degenerate vector yields the uniform distribution.
pub fn predicted_probs(deltas: &[f64], mode: ProbMode) -> Vec<f64> {
    assert!(!deltas.is_empty());
    let n = deltas.len();
    match mode {
        ProbMode::Literal => {
            let sq: Vec<f64> = deltas.iter().map(|d| d * d).collect();
            let sum: f64 = sq.iter().sum();
            if sum <= 0.0 {
                return vec![1.0 / n as f64; n];
            }
            sq.into_iter().map(|v| v / sum).collect()
        }
        ProbMode::Consistent => {
            const ETA: f64 = 1e-8;
            let inv: Vec<f64> = deltas.iter().map(|d| 1.0 / (d * d + ETA)).collect();
            let sum: f64 = inv.iter().sum();
            inv.into_iter().map(|v| v / sum).collect()
        }
    }
}

// ---------------------------------------------------------------------------
// Loss cores (value + gradient w.r.t. distances)
// ---------------------------------------------------------------------------

/// Margin loss over one query's candidate distances:
/// `(1/|N|) sum_n [max_p delta_p - delta_n + m]_+`.
/// Returns the loss and its gradient w.r.t. each positive and negative
/// distance (subgradient 0 exactly at the hinge).
pub fn margin_loss_values(
    deltas_pos: &[f64],
    deltas_neg: &[f64],
    margin: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    assert!(!deltas_pos.is_empty() && !deltas_neg.is_empty());
    let (worst_idx, worst_pos) = deltas_pos
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| {
            if d > acc.1 {
                (i, d)
            } else {
                acc
            }
        });
    let inv_n = 1.0 / deltas_neg.len() as f64;
    let mut loss = 0.0;
    let mut dpos = vec![0.0; deltas_pos.len()];
    let mut dneg = vec![0.0; deltas_neg.len()];
    for (j, &dn) in deltas_neg.iter().enumerate() {
        let hinge = worst_pos - dn + margin;
        if hinge > 0.0 {
            loss += hinge * inv_n;
            dpos[worst_idx] += inv_n;
            dneg[j] -= inv_n;
        }
    }
    (loss, dpos, dneg)
}

/// L1 regression loss between predicted and target probabilities:
/// `(1/n) sum |p_hat - p|`. Returns the loss and d/d(p_hat)
/// (subgradient 0 at equality).
pub fn reg_loss_values(p_hat: &[f64], p: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(p_hat.len(), p.len());
    let inv_n = 1.0 / p.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.len()];
    for i in 0..p.len() {
        let diff = p_hat[i] - p[i];
        loss += diff.abs() * inv_n;
        grad[i] = inv_n * if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    (loss, grad)
}

// ---------------------------------------------------------------------------
// Model-level losses
// ---------------------------------------------------------------------------

/// A query with candidate source clouds for the margin strategy.
pub struct TripletBatch<'a> {
    pub query: &'a [nalgebra::Point3<f64>],
    pub positives: Vec<&'a [nalgebra::Point3<f64>]>,
    pub negatives: Vec<&'a [nalgebra::Point3<f64>]>,
}

/// A query with candidate source clouds and their precomputed gaps for the
/// regression strategy.
pub struct RegBatch<'a> {
    pub query: &'a [nalgebra::Point3<f64>],
    pub sources: Vec<&'a [nalgebra::Point3<f64>]>,
    pub gaps: Vec<f64>,
    pub sigma: f64,
}

fn delta_and_partials(
    query_code: &EgocentricCode,
    source_code: &EgocentricCode,
) -> Result<(f64, Array1<f64>, Array1<f64>, Array1<f64>), TrainError> {
    // Partials of delta (not squared): d(delta)/dz_t = g (z_t - z_s) / delta.
    let d2 = ego_distance_sq(query_code, source_code)?;
    let delta = d2.sqrt().max(1e-12);
    let g = source_code.g.as_ref().unwrap();
    let diff = &query_code.z - &source_code.z;
    let dz_t = g * &diff / delta;
    let dz_s = -&dz_t;
    let dg = diff.mapv(|d| d * d) / (2.0 * delta);
    Ok((d2.sqrt(), dz_t, dz_s, dg))
}

/// Margin loss of one query batch, with gradients for every model weight.
pub fn margin_loss(
    model: &EmbeddingModel,
    batch: &TripletBatch,
    margin: f64,
) -> Result<(f64, ModelGrads), TrainError> {
    if batch.positives.is_empty() || batch.negatives.is_empty() {
        return Err(TrainError::InvalidConfig(
            "margin batch needs at least one positive and one negative".into(),
        ));
    }
    let query_cache = forward(model, batch.query, false)?;
    let query_code = query_cache.code();
    let pos_caches: Vec<_> = batch
        .positives
        .iter()
        .map(|c| forward(model, c, true))
        .collect::<Result<_, _>>()?;
    let neg_caches: Vec<_> = batch
        .negatives
        .iter()
        .map(|c| forward(model, c, true))
        .collect::<Result<_, _>>()?;

    let pos: Vec<_> = pos_caches
        .iter()
        .map(|c| delta_and_partials(&query_code, &c.code()))
        .collect::<Result<_, _>>()?;
    let neg: Vec<_> = neg_caches
        .iter()
        .map(|c| delta_and_partials(&query_code, &c.code()))
        .collect::<Result<_, _>>()?;

    let deltas_pos: Vec<f64> = pos.iter().map(|p| p.0).collect();
    let deltas_neg: Vec<f64> = neg.iter().map(|p| p.0).collect();
    let (loss, dpos, dneg) = margin_loss_values(&deltas_pos, &deltas_neg, margin);

    let mut grads = ModelGrads::zeros_like(model);
    let mut dz_query = Array1::zeros(query_code.z.len());
    for (w, (cache, (_, dz_t, dz_s, dg))) in dpos.iter().zip(pos_caches.iter().zip(&pos)) {
        if *w != 0.0 {
            dz_query.scaled_add(*w, dz_t);
            backward(model, cache, &(dz_s * *w), Some(&(dg * *w)), &mut grads);
        }
    }
    for (w, (cache, (_, dz_t, dz_s, dg))) in dneg.iter().zip(neg_caches.iter().zip(&neg)) {
        if *w != 0.0 {
            dz_query.scaled_add(*w, dz_t);
            backward(model, cache, &(dz_s * *w), Some(&(dg * *w)), &mut grads);
        }
    }
    backward(model, &query_cache, &dz_query, None, &mut grads);
    Ok((loss, grads))
}

/// Regression loss of one query batch, with gradients for every model
/// weight.
pub fn reg_loss(
    model: &EmbeddingModel,
    batch: &RegBatch,
    mode: ProbMode,
) -> Result<(f64, ModelGrads), TrainError> {
    assert_eq!(batch.sources.len(), batch.gaps.len());
    let query_cache = forward(model, batch.query, false)?;
    let query_code = query_cache.code();
    let caches: Vec<_> = batch
        .sources
        .iter()
        .map(|c| forward(model, c, true))
        .collect::<Result<Vec<_>, _>>()?;
    let codes: Vec<_> = caches.iter().map(|c| c.code()).collect();

    let d2: Vec<f64> = codes
        .iter()
        .map(|c| ego_distance_sq(&query_code, c))
        .collect::<Result<_, _>>()?;
    let deltas: Vec<f64> = d2.iter().map(|v| v.sqrt()).collect();
    let p_hat = predicted_probs(&deltas, mode);
    let p = target_probs(&batch.gaps, batch.sigma);
    let (loss, dl_dphat) = reg_loss_values(&p_hat, &p);

    // Chain to squared distances through the normalization.
    let n = deltas.len();
    let dl_dd2: Vec<f64> = match mode {
        ProbMode::Literal => {
            let sum: f64 = d2.iter().sum();
            if sum <= 0.0 {
                vec![0.0; n]
            } else {
                let dot: f64 = dl_dphat.iter().zip(&p_hat).map(|(a, b)| a * b).sum();
                (0..n).map(|j| (dl_dphat[j] - dot) / sum).collect()
            }
        }
        ProbMode::Consistent => {
            const ETA: f64 = 1e-8;
            let q: Vec<f64> = d2.iter().map(|&v| 1.0 / (v + ETA)).collect();
            let sum: f64 = q.iter().sum();
            let dot: f64 = dl_dphat.iter().zip(&p_hat).map(|(a, b)| a * b).sum();
            (0..n)
                .map(|j| {
                    let dl_dqj = (dl_dphat[j] - dot) / sum;
                    -dl_dqj * q[j] * q[j]
                })
                .collect()
        }
    };

    let mut grads = ModelGrads::zeros_like(model);
    let mut dz_query = Array1::zeros(query_code.z.len());
    for j in 0..n {
        let w = dl_dd2[j];
        if w == 0.0 {
            continue;
        }
        // d(d2)/dz_t = 2 g (z_t - z_s); d(d2)/dg = (z_t - z_s)^2.
        let g = codes[j].g.as_ref().unwrap();
        let diff = &query_code.z - &codes[j].z;
        let dz_t = g * &diff * 2.0;
        let dg = diff.mapv(|d| d * d);
        dz_query.scaled_add(w, &dz_t);
        backward(model, &caches[j], &(dz_t * (-w)), Some(&(dg * w)), &mut grads);
    }
    backward(model, &query_cache, &dz_query, None, &mut grads);
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First and second moments per parameter, with bias-corrected updates.
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(model: &EmbeddingModel) -> Self {
        let n = model.param_count();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One Adam update of the model in place. Rejects non-finite gradients.
    pub fn step(
        &mut self,
        model: &mut EmbeddingModel,
        grads: &ModelGrads,
        lr: f64,
    ) -> Result<(), TrainError> {
        if grads.has_nan() {
            return Err(TrainError::NanGradient { epoch: 0 });
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let flat_grads = grads.to_flat();
        let mut params = model.to_flat();
        for i in 0..params.len() {
            let g = flat_grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        model.set_flat(&params);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Hard-negative mining
// ---------------------------------------------------------------------------

/// Warm-start epochs with uniform negative sampling before mining starts.
pub const MINING_WARMUP_EPOCHS: usize = 30;
/// Cached codes are refreshed every this many epochs once mining is active.
pub const MINING_REFRESH_EPOCHS: usize = 10;
/// Hardest negatives per batch; the rest of `n_neg` stays random.
pub const MINING_HARD_COUNT: usize = 8;

/// Cached egocentric codes for the whole database, refreshed on a schedule.
pub struct MiningState {
    cache: std::collections::BTreeMap<ShapeId, EgocentricCode>,
    last_refresh: Option<usize>,
}

impl MiningState {
    pub fn new() -> Self {
        Self {
            cache: Default::default(),
            last_refresh: None,
        }
    }

    pub fn active(epoch: usize) -> bool {
        epoch >= MINING_WARMUP_EPOCHS
    }

    pub fn cache_stale(&self, epoch: usize) -> bool {
        match self.last_refresh {
            None => true,
            Some(at) => epoch >= at + MINING_REFRESH_EPOCHS,
        }
    }

    pub fn refresh(
        &mut self,
        model: &EmbeddingModel,
        clouds: &std::collections::BTreeMap<ShapeId, Vec<nalgebra::Point3<f64>>>,
        epoch: usize,
    ) -> Result<(), TrainError> {
        self.cache.clear();
        for (&id, points) in clouds {
            self.cache.insert(id, forward(model, points, true)?.code());
        }
        self.last_refresh = Some(epoch);
        Ok(())
    }

    /// The `MINING_HARD_COUNT` negatives closest to the query under the
    /// cached codes (ties by id), plus `n_random` random others; short
    /// negative sets are padded by resampling.
    pub fn select(
        &self,
        query_code: &EgocentricCode,
        negatives: &[ShapeId],
        n_neg: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Vec<ShapeId>, TrainError> {
        let hardest = self.hardest(query_code, negatives, MINING_HARD_COUNT.min(n_neg))?;
        let mut chosen = hardest.clone();
        let mut rest: Vec<ShapeId> = negatives
            .iter()
            .copied()
            .filter(|id| !hardest.contains(id))
            .collect();
        rest.shuffle(rng);
        chosen.extend(rest.into_iter().take(n_neg - chosen.len()));
        // Pad with random repeats when the negative set is short.
        while chosen.len() < n_neg {
            chosen.push(negatives[rng.random_range(0..negatives.len())]);
        }
        Ok(chosen)
    }

    pub fn hardest(
        &self,
        query_code: &EgocentricCode,
        negatives: &[ShapeId],
        count: usize,
    ) -> Result<Vec<ShapeId>, TrainError> {
        let mut scored: Vec<(f64, ShapeId)> = negatives
            .iter()
            .map(|id| {
                let code = &self.cache[id];
                ego_distance_sq(query_code, code).map(|d| (d, *id))
            })
            .collect::<Result<_, _>>()?;
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        Ok(scored.into_iter().take(count).map(|(_, id)| id).collect())
    }
}

impl Default for MiningState {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub skipped_queries: usize,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    /// CSV export: `epoch,loss,skipped_queries,wall_secs`.
    pub fn save_csv(&self, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "epoch,loss,skipped_queries,wall_secs")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{},{:.3}", e.epoch, e.loss, e.skipped_queries, e.wall_secs)?;
        }
        w.flush()
    }
}

struct QueryPlan {
    id: ShapeId,
    /// Margin strategy: candidates with gap at or below `sigma_p`.
    positives: Vec<ShapeId>,
    /// Margin strategy: candidates with gap above `sigma_n`.
    negatives: Vec<ShapeId>,
    /// Regression strategy: every candidate with a stored gap.
    sources: Vec<(ShapeId, f64)>,
    /// Bandwidth calibrated once over the full candidate set.
    sigma: f64,
}

/// Trains an embedding on the precomputed fitting gaps.
///
/// Single-threaded and fully deterministic in `(db, table, config,
/// strategy)`: equal seeds give bitwise-equal models.
pub fn train(
    db: &[ShapeRecord],
    table: &FitGapTable,
    config: &TrainConfig,
    strategy: Strategy,
) -> Result<(EmbeddingModel, TrainHistory), TrainError> {
    config.validate()?;
    let mut model = EmbeddingModel::init(&config.model, crate::seed::derive(config.seed, "init"));
    let history = train_into(db, table, config, strategy, &mut model)?;
    Ok((model, history))
}

fn training_clouds(
    db: &[ShapeRecord],
    config: &TrainConfig,
) -> std::collections::BTreeMap<ShapeId, Vec<nalgebra::Point3<f64>>> {
    // Fixed per-shape downsample: deterministic and cheap to revisit.
    let mut out = std::collections::BTreeMap::new();
    for record in db {
        let points = &record.cloud_train.points;
        let cloud = if points.len() <= config.train_points {
            points.clone()
        } else {
            let mut rng = ChaCha12Rng::seed_from_u64(crate::seed::derive_indexed(
                config.seed,
                "train_subset",
                record.id.0 as u64,
            ));
            let idx = rand::seq::index::sample(&mut rng, points.len(), config.train_points);
            idx.iter().map(|i| points[i]).collect()
        };
        out.insert(record.id, cloud);
    }
    out
}

fn train_into(
    db: &[ShapeRecord],
    table: &FitGapTable,
    config: &TrainConfig,
    strategy: Strategy,
    model: &mut EmbeddingModel,
) -> Result<TrainHistory, TrainError> {
    let clouds = training_clouds(db, config);

    // Per-query plans from the gap table.
    let mut plans: Vec<QueryPlan> = Vec::new();
    for record in db {
        let sources = table.sources_for(record.id);
        let sources: Vec<(ShapeId, f64)> = sources
            .into_iter()
            .filter(|(s, _)| clouds.contains_key(s))
            .collect();
        if sources.is_empty() {
            continue;
        }
        let positives: Vec<ShapeId> = sources
            .iter()
            .filter(|(_, e)| *e <= config.sigma_p)
            .map(|(s, _)| *s)
            .collect();
        let negatives: Vec<ShapeId> = sources
            .iter()
            .filter(|(_, e)| *e > config.sigma_n)
            .map(|(s, _)| *s)
            .collect();
        let gaps: Vec<f64> = sources.iter().map(|(_, e)| *e).collect();
        let sigma = match calibrate_sigma(&gaps, config.perplexity.min(gaps.len() as f64 - 1.0).max(1.0 + 1e-9)) {
            Ok(c) => c.sigma,
            Err(TrainError::TooFewValues(_)) | Err(TrainError::BadPerplexity { .. }) => 1.0,
            Err(e) => return Err(e),
        };
        plans.push(QueryPlan {
            id: record.id,
            positives,
            negatives,
            sources,
            sigma,
        });
    }

    let usable = |p: &QueryPlan| match strategy {
        Strategy::Margin => !p.positives.is_empty() && !p.negatives.is_empty(),
        Strategy::Regression => !p.sources.is_empty(),
    };
    if !plans.iter().any(usable) {
        return Err(TrainError::NoValidQueries);
    }

    let mut rng = ChaCha12Rng::seed_from_u64(crate::seed::derive(config.seed, "train"));
    let mut adam = AdamState::new(model);
    let mut mining = MiningState::new();
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let start = std::time::Instant::now();
        let mut order: Vec<usize> = (0..plans.len()).collect();
        order.shuffle(&mut rng);

        let mine_now = strategy == Strategy::Margin && config.mining && MiningState::active(epoch);
        if mine_now && mining.cache_stale(epoch) {
            mining.refresh(model, &clouds, epoch)?;
        }

        let mut epoch_loss = 0.0;
        let mut counted = 0usize;
        let mut skipped = 0usize;
        for chunk in order.chunks(config.batch_queries) {
            let mut batch_grads = ModelGrads::zeros_like(model);
            let mut batch_members = 0usize;
            for &pi in chunk {
                let plan = &plans[pi];
                if !usable(plan) {
                    skipped += 1;
                    continue;
                }
                let (loss, grads) = match strategy {
                    Strategy::Margin => {
                        let positives = sample_ids(&plan.positives, config.n_pos, &mut rng);
                        let negatives = if mine_now {
                            let query_code =
                                forward(model, &clouds[&plan.id], false)?.code();
                            mining.select(&query_code, &plan.negatives, config.n_neg, &mut rng)?
                        } else {
                            sample_ids(&plan.negatives, config.n_neg, &mut rng)
                        };
                        let batch = TripletBatch {
                            query: &clouds[&plan.id],
                            positives: positives.iter().map(|s| clouds[s].as_slice()).collect(),
                            negatives: negatives.iter().map(|s| clouds[s].as_slice()).collect(),
                        };
                        margin_loss(model, &batch, config.margin)?
                    }
                    Strategy::Regression => {
                        let picked = sample_indices(plan.sources.len(), config.n_reg, &mut rng);
                        let batch = RegBatch {
                            query: &clouds[&plan.id],
                            sources: picked
                                .iter()
                                .map(|&i| clouds[&plan.sources[i].0].as_slice())
                                .collect(),
                            gaps: picked.iter().map(|&i| plan.sources[i].1).collect(),
                            sigma: plan.sigma,
                        };
                        reg_loss(model, &batch, config.prob_mode)?
                    }
                };
                if !loss.is_finite() {
                    return Err(TrainError::NanLoss { epoch });
                }
                epoch_loss += loss;
                counted += 1;
                batch_members += 1;
                batch_grads.add(&grads);
            }
            if batch_members > 0 {
                batch_grads.scale(1.0 / batch_members as f64);
                adam.step(model, &batch_grads, config.learning_rate)
                    .map_err(|e| match e {
                        TrainError::NanGradient { .. } => TrainError::NanGradient { epoch },
                        other => other,
                    })?;
            }
        }
        history.epochs.push(EpochStats {
            epoch,
            loss: if counted > 0 { epoch_loss / counted as f64 } else { f64::NAN },
            skipped_queries: skipped,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }
    Ok(history)
}

fn sample_ids(pool: &[ShapeId], count: usize, rng: &mut ChaCha12Rng) -> Vec<ShapeId> {
    if pool.len() <= count {
        return pool.to_vec();
    }
    rand::seq::index::sample(rng, pool.len(), count)
        .iter()
        .map(|i| pool[i])
        .collect()
}

fn sample_indices(len: usize, count: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    rand::seq::index::sample(rng, len, count).into_vec()
}
