//! Dense-layer machinery: forward passes with caches and reverse-mode
//! gradient accumulation. The architecture is fixed (shared per-point
//! layers, channel-wise max pooling, two MLP heads), so the backward pass is
//! written out explicitly instead of going through a general tape.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

/// Fully-connected layer; weights are `(out, in)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    /// Uniform fan-in initialization: `U(-1/sqrt(in), 1/sqrt(in))`, zero bias.
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_out, fan_in), |_| {
            (rng.random::<f64>() * 2.0 - 1.0) * bound
        });
        Dense {
            w,
            b: Array1::zeros(fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Gradient buffer mirroring a [`Dense`] layer.
#[derive(Debug, Clone)]
pub struct DenseGrad {
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
}

impl DenseGrad {
    pub fn zeros_like(layer: &Dense) -> Self {
        Self {
            dw: Array2::zeros(layer.w.dim()),
            db: Array1::zeros(layer.b.dim()),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.dw *= factor;
        self.db *= factor;
    }

    pub fn add(&mut self, other: &DenseGrad) {
        self.dw += &other.dw;
        self.db += &other.db;
    }
}

pub fn tanh_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(f64::tanh);
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Forward through a stack of rows-as-points layers, tanh after every layer.
/// Returns activations including the input at index 0.
pub fn point_stack_forward(layers: &[Dense], input: Array2<f64>) -> Vec<Array2<f64>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(input);
    for layer in layers {
        let mut pre = acts.last().unwrap().dot(&layer.w.t());
        pre += &layer.b;
        tanh_inplace(&mut pre);
        acts.push(pre);
    }
    acts
}

/// Channel-wise max over rows; ties go to the first row so the routing in
/// the backward pass is deterministic.
pub fn max_pool(features: &Array2<f64>) -> (Array1<f64>, Vec<usize>) {
    let (n, c) = features.dim();
    assert!(n > 0);
    let mut pooled = Array1::from_elem(c, f64::NEG_INFINITY);
    let mut argmax = vec![0usize; c];
    for (row_idx, row) in features.axis_iter(Axis(0)).enumerate() {
        for (ch, &v) in row.iter().enumerate() {
            if v > pooled[ch] {
                pooled[ch] = v;
                argmax[ch] = row_idx;
            }
        }
    }
    (pooled, argmax)
}

/// Head activation of the final layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadOutput {
    Linear,
    /// Logistic squash plus a small positive offset.
    SigmoidPlus(f64),
}

/// Forward through a head MLP: tanh on hidden layers, `output` on the last.
/// Returns post-activation values including the input at index 0.
pub fn head_forward(layers: &[Dense], input: &Array1<f64>, output: HeadOutput) -> Vec<Array1<f64>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(input.clone());
    for (i, layer) in layers.iter().enumerate() {
        let mut pre = layer.w.dot(acts.last().unwrap());
        pre += &layer.b;
        if i + 1 < layers.len() {
            pre.mapv_inplace(f64::tanh);
        } else {
            match output {
                HeadOutput::Linear => {}
                HeadOutput::SigmoidPlus(eps) => pre.mapv_inplace(|x| sigmoid(x) + eps),
            }
        }
        acts.push(pre);
    }
    acts
}

/// Backward through a head. `delta` is dL/d(output activation); returns
/// dL/d(input) and accumulates layer gradients.
pub fn head_backward(
    layers: &[Dense],
    acts: &[Array1<f64>],
    output: HeadOutput,
    mut delta: Array1<f64>,
    grads: &mut [DenseGrad],
) -> Array1<f64> {
    for i in (0..layers.len()).rev() {
        let out = &acts[i + 1];
        let grad_pre: Array1<f64> = if i + 1 < layers.len() {
            // Hidden tanh: d/dpre = 1 - out^2.
            let mut g = delta;
            g.zip_mut_with(out, |d, &o| *d *= 1.0 - o * o);
            g
        } else {
            match output {
                HeadOutput::Linear => delta,
                HeadOutput::SigmoidPlus(eps) => {
                    // out = sigmoid(pre) + eps; d/dpre = s * (1 - s).
                    let mut g = delta;
                    g.zip_mut_with(out, |d, &o| {
                        let s = o - eps;
                        *d *= s * (1.0 - s);
                    });
                    g
                }
            }
        };
        let input = &acts[i];
        for (r, &gp) in grad_pre.iter().enumerate() {
            if gp != 0.0 {
                grads[i].dw.row_mut(r).scaled_add(gp, input);
            }
        }
        grads[i].db += &grad_pre;
        delta = layers[i].w.t().dot(&grad_pre);
    }
    delta
}

/// Backward through the per-point stack. `delta` is dL/d(last activation);
/// accumulates layer gradients. The input gradient is not needed, so it is
/// not returned.
pub fn point_stack_backward(
    layers: &[Dense],
    acts: &[Array2<f64>],
    mut delta: Array2<f64>,
    grads: &mut [DenseGrad],
) {
    for i in (0..layers.len()).rev() {
        let out = &acts[i + 1];
        delta.zip_mut_with(out, |d, &o| *d *= 1.0 - o * o);
        let input = &acts[i];
        grads[i].dw += &delta.t().dot(input);
        grads[i].db += &delta.sum_axis(Axis(0));
        if i > 0 {
            delta = delta.dot(&layers[i].w);
        }
    }
}
