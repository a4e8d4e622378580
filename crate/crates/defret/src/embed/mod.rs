//! The embedding network, per-shape egocentric distance fields, and the
//! asymmetric distance they induce.
//!
//! Two heads share one permutation-invariant point encoder. `F` places a
//! shape in the latent space; `G` predicts a strictly positive diagonal
//! field for the shape in its role as an *observer* (the database side of a
//! retrieval). The egocentric distance from observer `s` to target `t` is
//! `sqrt((z_t - z_s)^T diag(g_s) (z_t - z_s))`: non-negative, zero at
//! `z_t = z_s`, and asymmetric whenever the observers' fields differ.

pub mod net;

use ndarray::{Array1, Array2};
use net::{Dense, DenseGrad, HeadOutput};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Offset added to the logistic output of `G`, keeping every diagonal entry
/// strictly positive.
pub const FIELD_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot encode an empty point cloud")]
    EmptyCloud,
    #[error("observer code has no egocentric field")]
    MissingField,
    #[error("latent dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected DEMB")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated checkpoint")]
    Truncated,
}

/// Architecture knobs. The defaults follow the shared-encoder convention:
/// per-point widths (64, 128, 256), then two dense layers per head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub k: usize,
    pub encoder_widths: Vec<usize>,
    pub head_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 256,
            encoder_widths: vec![64, 128, 256],
            head_hidden: vec![256],
        }
    }
}

impl ModelConfig {
    /// Compact configuration for desk-scale benchmarks.
    pub fn small(k: usize) -> Self {
        Self {
            k,
            encoder_widths: vec![32, 64],
            head_hidden: vec![64],
        }
    }
}

/// Shared point encoder plus the two heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub point_layers: Vec<Dense>,
    pub f_head: Vec<Dense>,
    pub g_head: Vec<Dense>,
    pub k: usize,
}

impl EmbeddingModel {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut point_layers = Vec::new();
        let mut prev = 3usize;
        for &w in &config.encoder_widths {
            point_layers.push(Dense::init(&mut rng, prev, w));
            prev = w;
        }
        let feature_dim = prev;
        let make_head = |rng: &mut ChaCha12Rng| {
            let mut layers = Vec::new();
            let mut prev = feature_dim;
            for &w in &config.head_hidden {
                layers.push(Dense::init(rng, prev, w));
                prev = w;
            }
            layers.push(Dense::init(rng, prev, config.k));
            layers
        };
        let f_head = make_head(&mut rng);
        let g_head = make_head(&mut rng);
        Self {
            point_layers,
            f_head,
            g_head,
            k: config.k,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.point_layers
            .last()
            .map(|l| l.out_dim())
            .unwrap_or(3)
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.point_layers
            .iter()
            .chain(&self.f_head)
            .chain(&self.g_head)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.point_layers
            .iter_mut()
            .chain(self.f_head.iter_mut())
            .chain(self.g_head.iter_mut())
    }

    /// All parameters flattened in declaration order. Test and optimizer
    /// plumbing.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in self.layers() {
            out.extend(layer.w.iter());
            out.extend(layer.b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for layer in self.layers_mut() {
            for w in layer.w.iter_mut() {
                *w = *it.next().expect("flat vector too short");
            }
            for b in layer.b.iter_mut() {
                *b = *it.next().expect("flat vector too short");
            }
        }
        assert!(it.next().is_none(), "flat vector too long");
    }
}

/// Gradients for every layer of the model, in declaration order.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub point: Vec<DenseGrad>,
    pub f: Vec<DenseGrad>,
    pub g: Vec<DenseGrad>,
}

impl ModelGrads {
    pub fn zeros_like(model: &EmbeddingModel) -> Self {
        Self {
            point: model.point_layers.iter().map(DenseGrad::zeros_like).collect(),
            f: model.f_head.iter().map(DenseGrad::zeros_like).collect(),
            g: model.g_head.iter().map(DenseGrad::zeros_like).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.iter_mut() {
            g.scale(factor);
        }
    }

    pub fn add(&mut self, other: &ModelGrads) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            a.add(b);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &DenseGrad> {
        self.point.iter().chain(&self.f).chain(&self.g)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut DenseGrad> {
        self.point
            .iter_mut()
            .chain(self.f.iter_mut())
            .chain(self.g.iter_mut())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.iter() {
            out.extend(g.dw.iter());
            out.extend(g.db.iter());
        }
        out
    }

    pub fn has_nan(&self) -> bool {
        self.iter()
            .any(|g| g.dw.iter().chain(g.db.iter()).any(|v| !v.is_finite()))
    }
}

/// Latent position plus, for observers, the positive diagonal field.
#[derive(Debug, Clone, PartialEq)]
pub struct EgocentricCode {
    pub z: Array1<f64>,
    pub g: Option<Array1<f64>>,
}

/// Forward caches needed to backpropagate through one shape's encoding.
pub struct ForwardCache {
    pub point_acts: Vec<Array2<f64>>,
    pub argmax: Vec<usize>,
    pub f_acts: Vec<Array1<f64>>,
    pub g_acts: Option<Vec<Array1<f64>>>,
}

impl ForwardCache {
    pub fn code(&self) -> EgocentricCode {
        EgocentricCode {
            z: self.f_acts.last().unwrap().clone(),
            g: self.g_acts.as_ref().map(|a| a.last().unwrap().clone()),
        }
    }
}

fn points_matrix(points: &[nalgebra::Point3<f64>]) -> Array2<f64> {
    let mut m = Array2::zeros((points.len(), 3));
    for (i, p) in points.iter().enumerate() {
        m[[i, 0]] = p.x;
        m[[i, 1]] = p.y;
        m[[i, 2]] = p.z;
    }
    m
}

/// Permutation-invariant cloud feature: per-point layers then channel-wise
/// max pooling.
pub fn encode(model: &EmbeddingModel, points: &[nalgebra::Point3<f64>]) -> Result<Array1<f64>, EmbedError> {
    if points.is_empty() {
        return Err(EmbedError::EmptyCloud);
    }
    let acts = net::point_stack_forward(&model.point_layers, points_matrix(points));
    let (pooled, _) = net::max_pool(acts.last().unwrap());
    Ok(pooled)
}

/// Full forward pass with caches; `with_field` controls whether the `G`
/// head runs (observers and database shapes need it, queries do not).
pub fn forward(
    model: &EmbeddingModel,
    points: &[nalgebra::Point3<f64>],
    with_field: bool,
) -> Result<ForwardCache, EmbedError> {
    if points.is_empty() {
        return Err(EmbedError::EmptyCloud);
    }
    let point_acts = net::point_stack_forward(&model.point_layers, points_matrix(points));
    let (pooled, argmax) = net::max_pool(point_acts.last().unwrap());
    let f_acts = net::head_forward(&model.f_head, &pooled, HeadOutput::Linear);
    let g_acts = with_field.then(|| {
        net::head_forward(
            &model.g_head,
            &pooled,
            HeadOutput::SigmoidPlus(FIELD_EPSILON),
        )
    });
    Ok(ForwardCache {
        point_acts,
        argmax,
        f_acts,
        g_acts,
    })
}

/// Encodes a shape's training cloud into its egocentric code.
pub fn code(
    model: &EmbeddingModel,
    shape: &crate::geometry::ShapeRecord,
    with_field: bool,
) -> Result<EgocentricCode, EmbedError> {
    Ok(forward(model, &shape.cloud_train.points, with_field)?.code())
}

/// Backpropagates `dL/dz` (and `dL/dg` when the field head ran) through one
/// shape's forward cache, accumulating into `grads`.
pub fn backward(
    model: &EmbeddingModel,
    cache: &ForwardCache,
    dz: &Array1<f64>,
    dg: Option<&Array1<f64>>,
    grads: &mut ModelGrads,
) {
    let mut dpooled = net::head_backward(
        &model.f_head,
        &cache.f_acts,
        HeadOutput::Linear,
        dz.clone(),
        &mut grads.f,
    );
    if let (Some(g_acts), Some(dg)) = (cache.g_acts.as_ref(), dg) {
        let from_g = net::head_backward(
            &model.g_head,
            g_acts,
            HeadOutput::SigmoidPlus(FIELD_EPSILON),
            dg.clone(),
            &mut grads.g,
        );
        dpooled += &from_g;
    }
    // Max pooling routes each channel's gradient to its argmax point.
    let last = cache.point_acts.last().unwrap();
    let mut dpoints = Array2::zeros(last.dim());
    for (ch, &row) in cache.argmax.iter().enumerate() {
        dpoints[[row, ch]] += dpooled[ch];
    }
    net::point_stack_backward(&model.point_layers, &cache.point_acts, dpoints, &mut grads.point);
}

/// Squared egocentric distance from observer `s` to target `t`:
/// `sum_i g_i (z_t,i - z_s,i)^2`.
pub fn ego_distance_sq(
    target: &EgocentricCode,
    observer: &EgocentricCode,
) -> Result<f64, EmbedError> {
    let g = observer.g.as_ref().ok_or(EmbedError::MissingField)?;
    if target.z.len() != observer.z.len() || g.len() != target.z.len() {
        return Err(EmbedError::DimensionMismatch(target.z.len(), observer.z.len()));
    }
    let mut acc = 0.0;
    for i in 0..g.len() {
        let d = target.z[i] - observer.z[i];
        acc += g[i] * d * d;
    }
    Ok(acc)
}

/// Egocentric distance; the square root of [`ego_distance_sq`].
pub fn ego_distance(
    target: &EgocentricCode,
    observer: &EgocentricCode,
) -> Result<f64, EmbedError> {
    Ok(ego_distance_sq(target, observer)?.sqrt())
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DEMB";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Checkpoint layout: magic `DEMB`, u16 version, u32 k, an architecture
/// descriptor (per stack: u32 layer count, then u32 (in, out) per layer),
/// then all weights and biases as little-endian f32 in declaration order.
pub fn save_checkpoint(model: &EmbeddingModel, path: impl AsRef<Path>) -> Result<(), EmbedError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(model.k as u32).to_le_bytes())?;
    for stack in [&model.point_layers, &model.f_head, &model.g_head] {
        w.write_all(&(stack.len() as u32).to_le_bytes())?;
        for layer in stack {
            w.write_all(&(layer.in_dim() as u32).to_le_bytes())?;
            w.write_all(&(layer.out_dim() as u32).to_le_bytes())?;
        }
    }
    for layer in model.layers() {
        for v in layer.w.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        for v in layer.b.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EmbeddingModel, EmbedError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 6 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(EmbedError::BadMagic);
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(EmbedError::UnsupportedVersion(version));
    }
    let mut pos = 6usize;
    let read_u32 = |pos: &mut usize| -> Result<u32, EmbedError> {
        if *pos + 4 > bytes.len() {
            return Err(EmbedError::Truncated);
        }
        let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    let k = read_u32(&mut pos)? as usize;
    let mut shapes: [Vec<(usize, usize)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for stack in &mut shapes {
        let count = read_u32(&mut pos)? as usize;
        for _ in 0..count {
            let fan_in = read_u32(&mut pos)? as usize;
            let fan_out = read_u32(&mut pos)? as usize;
            stack.push((fan_in, fan_out));
        }
    }
    let read_layer = |pos: &mut usize, fan_in: usize, fan_out: usize| -> Result<Dense, EmbedError> {
        let need = (fan_in * fan_out + fan_out) * 4;
        if *pos + need > bytes.len() {
            return Err(EmbedError::Truncated);
        }
        let mut w = Array2::zeros((fan_out, fan_in));
        for v in w.iter_mut() {
            *v = f32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap()) as f64;
            *pos += 4;
        }
        let mut b = Array1::zeros(fan_out);
        for v in b.iter_mut() {
            *v = f32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap()) as f64;
            *pos += 4;
        }
        Ok(Dense { w, b })
    };
    let mut stacks: Vec<Vec<Dense>> = Vec::new();
    for stack_shapes in &shapes {
        let mut layers = Vec::new();
        for &(fan_in, fan_out) in stack_shapes {
            layers.push(read_layer(&mut pos, fan_in, fan_out)?);
        }
        stacks.push(layers);
    }
    if pos != bytes.len() {
        return Err(EmbedError::Truncated);
    }
    let g_head = stacks.pop().unwrap();
    let f_head = stacks.pop().unwrap();
    let point_layers = stacks.pop().unwrap();
    Ok(EmbeddingModel {
        point_layers,
        f_head,
        g_head,
        k,
    })
}

#[cfg(test)]
mod tests;
