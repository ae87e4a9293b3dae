//! Desk-scale models, analytic gradients, clipping and SGD with momentum.
//!
//! Two tasks are supported: an analytic quadratic bowl `½·λ·w²` with a
//! single scalar parameter, and a small tanh MLP regressing noisy `sin(3x)`.
//! All math is `f64`. Batch reductions go through [`crate::par`] with fixed
//! chunking, so sequential and parallel runs agree bit for bit.

#![allow(clippy::needless_range_loop)]

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Batch, Example};
use crate::par::{self, Exec, CHUNK};
use crate::rng::TrainRng;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("layer `{layer}` has no parameter `{param}`")]
    UnknownParam { layer: String, param: String },
    #[error("invalid value for `{param}`: {reason}")]
    InvalidValue { param: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    /// Output width.
    pub rows: usize,
    /// Input width (fan-in).
    pub cols: usize,
    /// Row-major `rows × cols`.
    #[serde(with = "crate::floats")]
    pub weight: Vec<f64>,
    #[serde(with = "crate::floats")]
    pub bias: Vec<f64>,
    pub activation: Activation,
    /// `None` when the layer has no dropout; applied to its activations in training.
    pub dropout_rate: Option<f64>,
}

impl Layer {
    fn zeros(name: &str, rows: usize, cols: usize, bias: bool, activation: Activation) -> Self {
        Self {
            name: name.to_string(),
            rows,
            cols,
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; if bias { rows } else { 0 }],
            activation,
            dropout_rate: None,
        }
    }

    /// Redraws weights then biases from `uniform(±1/√fan_in)`.
    pub fn reinitialize(&mut self, rng: &mut TrainRng) {
        let bound = 1.0 / (self.cols as f64).sqrt();
        for w in self.weight.iter_mut().chain(self.bias.iter_mut()) {
            *w = rng.uniform_range(-bound, bound);
        }
    }

    pub fn reset(&mut self) {
        self.weight.iter_mut().for_each(|w| *w = 0.0);
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
}

/// Per-parameter buffers shaped like a [`ModelParams`]; used for gradients and velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBuffers {
    pub layers: Vec<LayerBuffer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBuffer {
    #[serde(with = "crate::floats")]
    pub weight: Vec<f64>,
    #[serde(with = "crate::floats")]
    pub bias: Vec<f64>,
}

impl ParamBuffers {
    pub fn zeros_like(model: &ModelParams) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerBuffer {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn from_flat(model: &ModelParams, flat: &[f64]) -> Self {
        let mut out = Self::zeros_like(model);
        let mut it = flat.iter().copied();
        for v in out.values_mut() {
            *v = it.next().expect("flat vector too short");
        }
        out
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    /// Global L2 norm over every entry, accumulated in parameter order.
    pub fn l2_norm(&self) -> f64 {
        self.values().fold(0.0, |acc, g| acc + g * g).sqrt()
    }

    pub fn same_shape(&self, model: &ModelParams) -> bool {
        self.layers.len() == model.layers.len()
            && self
                .layers
                .iter()
                .zip(&model.layers)
                .all(|(b, l)| b.weight.len() == l.weight.len() && b.bias.len() == l.bias.len())
    }

    fn add_assign(&mut self, other: &ParamBuffers) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }
}

impl ModelParams {
    /// Single scalar parameter `w` for the quadratic bowl.
    pub fn scalar(w0: f64) -> Self {
        let mut layer = Layer::zeros("w", 1, 1, false, Activation::Identity);
        layer.weight[0] = w0;
        Self { layers: vec![layer] }
    }

    /// `1 → hidden → 1` tanh MLP with hidden dropout, initialized from `rng`.
    pub fn mlp(hidden: usize, dropout: f64, rng: &mut TrainRng) -> Self {
        let mut h1 = Layer::zeros("h1", hidden, 1, true, Activation::Tanh);
        h1.dropout_rate = Some(dropout);
        let out = Layer::zeros("out", 1, hidden, true, Activation::Identity);
        let mut model = Self {
            layers: vec![h1, out],
        };
        for l in &mut model.layers {
            l.reinitialize(rng);
        }
        model
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Layer::is_finite)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = it.next().expect("flat vector too short");
            }
        }
    }

    /// Checks that consecutive layers chain `1 → … → 1`.
    fn check_mlp_shape(&self) -> Result<(), ModelError> {
        let mut width = 1;
        for l in &self.layers {
            if l.cols != width || l.weight.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(ModelError::Shape(format!("layer `{}` does not chain", l.name)));
            }
            width = l.rows;
        }
        if width != 1 {
            return Err(ModelError::Shape("output width must be 1".into()));
        }
        Ok(())
    }
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Objective {
    /// `½·λ·w²` over the single scalar parameter; ignores batches.
    Quadratic { lambda: f64 },
    /// Mean squared error of the MLP over a batch.
    Mse,
}

/// Inverted-dropout multipliers, one per hidden unit per example.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    /// `masks[layer][example * width + unit]`; empty for layers without dropout.
    pub masks: Vec<Vec<f64>>,
}

impl DropoutMasks {
    /// Draws masks for every layer whose dropout rate is positive. Layers
    /// with rate zero consume no randomness.
    pub fn draw(model: &ModelParams, batch_len: usize, rng: &mut TrainRng) -> Option<Self> {
        if !model.layers.iter().any(|l| l.dropout_rate.is_some_and(|p| p > 0.0)) {
            return None;
        }
        let masks = model
            .layers
            .iter()
            .map(|l| match l.dropout_rate {
                Some(p) if p > 0.0 => {
                    let keep = 1.0 / (1.0 - p);
                    (0..batch_len * l.rows)
                        .map(|_| if rng.uniform() < p { 0.0 } else { keep })
                        .collect()
                }
                _ => Vec::new(),
            })
            .collect();
        Some(Self { masks })
    }
}

/// Forward pass for one input, returning the output and every layer's
/// (pre-dropout) activation.
fn forward_one(model: &ModelParams, x: f64, masks: Option<(&DropoutMasks, usize)>) -> (f64, Vec<Vec<f64>>) {
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(model.layers.len() + 1);
    acts.push(vec![x]);
    let mut raw: Vec<Vec<f64>> = Vec::with_capacity(model.layers.len());
    for (li, l) in model.layers.iter().enumerate() {
        let input = acts.last().expect("input");
        let mut out = vec![0.0; l.rows];
        let mut pre_mask = vec![0.0; l.rows];
        for r in 0..l.rows {
            let mut z = 0.0;
            for c in 0..l.cols {
                z += l.weight[r * l.cols + c] * input[c];
            }
            z += l.bias[r];
            let a = match l.activation {
                Activation::Tanh => z.tanh(),
                Activation::Identity => z,
            };
            pre_mask[r] = a;
            out[r] = match masks {
                Some((m, ex)) if !m.masks[li].is_empty() => a * m.masks[li][ex * l.rows + r],
                _ => a,
            };
        }
        raw.push(pre_mask);
        acts.push(out);
    }
    let y = acts.last().expect("output")[0];
    // acts[i] is the (masked) input of layer i; raw[i] its unmasked activation.
    let mut all = acts;
    all.extend(raw);
    (y, all)
}

/// Accumulates `(ŷ - y)²` and its gradient for one example into `grads`.
fn backward_one(
    model: &ModelParams,
    x: f64,
    y: f64,
    masks: Option<(&DropoutMasks, usize)>,
    grads: &mut ParamBuffers,
) -> f64 {
    let n = model.layers.len();
    let (yhat, all) = forward_one(model, x, masks);
    let (acts, raw) = all.split_at(n + 1);
    let err = yhat - y;
    let mut delta = vec![2.0 * err];
    for li in (0..n).rev() {
        let l = &model.layers[li];
        let input = &acts[li];
        let g = &mut grads.layers[li];
        for r in 0..l.rows {
            for c in 0..l.cols {
                g.weight[r * l.cols + c] += delta[r] * input[c];
            }
            g.bias[r] += delta[r];
        }
        if li == 0 {
            break;
        }
        let prev = &model.layers[li - 1];
        let mut next = vec![0.0; l.cols];
        for (c, slot) in next.iter_mut().enumerate() {
            let mut s = 0.0;
            for r in 0..l.rows {
                s += l.weight[r * l.cols + c] * delta[r];
            }
            if let Some((m, ex)) = masks {
                if !m.masks[li - 1].is_empty() {
                    s *= m.masks[li - 1][ex * prev.rows + c];
                }
            }
            let a = raw[li - 1][c];
            *slot = match prev.activation {
                Activation::Tanh => s * (1.0 - a * a),
                Activation::Identity => s,
            };
        }
        delta = next;
    }
    err * err
}

/// Loss and exact analytic gradients.
///
/// For [`Objective::Mse`] the batch is split into [`CHUNK`]-sized pieces,
/// each piece summed sequentially, then pieces combined in order and the
/// totals divided by the batch size.
pub fn forward_backward(
    objective: Objective,
    model: &ModelParams,
    batch: &Batch,
    masks: Option<&DropoutMasks>,
    exec: Exec,
) -> Result<(f64, ParamBuffers), ModelError> {
    match objective {
        Objective::Quadratic { lambda } => {
            let w = model
                .layers
                .first()
                .filter(|l| model.layers.len() == 1 && l.weight.len() == 1 && l.bias.is_empty())
                .ok_or_else(|| ModelError::Shape("quadratic task needs one scalar parameter".into()))?
                .weight[0];
            if !w.is_finite() {
                return Err(ModelError::NonFinite("parameters"));
            }
            let loss = 0.5 * lambda * w * w;
            let mut grads = ParamBuffers::zeros_like(model);
            grads.layers[0].weight[0] = lambda * w;
            Ok((loss, grads))
        }
        Objective::Mse => {
            if batch.is_empty() {
                return Err(ModelError::EmptyBatch);
            }
            model.check_mlp_shape()?;
            if let Some(m) = masks {
                let ok = m.masks.len() == model.layers.len()
                    && m.masks
                        .iter()
                        .zip(&model.layers)
                        .all(|(v, l)| v.is_empty() || v.len() == batch.len() * l.rows);
                if !ok {
                    return Err(ModelError::Shape("dropout masks do not match batch".into()));
                }
            }
            if batch.items.iter().any(|i| !i.x.is_finite() || !i.y.is_finite()) {
                return Err(ModelError::NonFinite("batch"));
            }
            let indexed: Vec<usize> = (0..batch.len()).collect();
            let partials = par::map_chunks(exec, &indexed, CHUNK, |chunk| {
                let mut g = ParamBuffers::zeros_like(model);
                let mut loss = 0.0;
                for &i in chunk {
                    let item = &batch.items[i];
                    loss += backward_one(model, item.x, item.y, masks.map(|m| (m, i)), &mut g);
                }
                (loss, g)
            });
            let mut loss = 0.0;
            let mut grads = ParamBuffers::zeros_like(model);
            for (l, g) in &partials {
                loss += l;
                grads.add_assign(g);
            }
            let n = batch.len() as f64;
            loss /= n;
            grads.values_mut().for_each(|g| *g /= n);
            Ok((loss, grads))
        }
    }
}

/// Mean squared error over `examples` with dropout disabled.
pub fn mse(model: &ModelParams, examples: &[Example], exec: Exec) -> f64 {
    let partials = par::map_chunks(exec, examples, CHUNK, |chunk| {
        chunk.iter().fold(0.0, |acc, e| {
            let (yhat, _) = forward_one(model, e.x, None);
            let err = yhat - e.y;
            acc + err * err
        })
    });
    partials.into_iter().fold(0.0, |a, b| a + b) / examples.len() as f64
}

/// Scales `grads` in place so their global norm is at most `threshold`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut ParamBuffers, threshold: f64) -> Result<f64, ModelError> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(ModelError::InvalidValue {
            param: "grad_clip".into(),
            reason: "threshold must be positive".into(),
        });
    }
    let norm = grads.l2_norm();
    if !norm.is_finite() {
        return Err(ModelError::NonFinite("gradients"));
    }
    if norm > threshold {
        let scale = threshold / norm;
        grads.values_mut().for_each(|g| *g *= scale);
        // Rounding can leave the rescaled norm a few ulps above the threshold.
        while grads.l2_norm() > threshold {
            grads.values_mut().for_each(|g| *g *= 1.0 - f64::EPSILON);
        }
    }
    Ok(norm)
}

/// `v ← μ·v + g + λ_wd·p`, `p ← p − lr·v`. Nothing is written when any
/// updated value would be non-finite.
pub fn sgd_momentum_step(
    model: &mut ModelParams,
    velocity: &mut ParamBuffers,
    grads: &ParamBuffers,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), ModelError> {
    if !velocity.same_shape(model) || !grads.same_shape(model) {
        return Err(ModelError::Shape("buffers do not match parameters".into()));
    }
    let params = model.to_flat();
    let mut v = velocity.to_flat();
    let mut p = params;
    for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(grads.values()) {
        *vi = momentum * *vi + gi + weight_decay * *pi;
        *pi -= lr * *vi;
    }
    if p.iter().chain(&v).any(|x| !x.is_finite()) {
        return Err(ModelError::NonFinite("update"));
    }
    model.set_flat(&p);
    *velocity = ParamBuffers::from_flat(model, &v);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BatchItem;
    use std::sync::Arc;

    fn batch(points: &[(f64, f64)]) -> Batch {
        Batch {
            items: points
                .iter()
                .map(|&(x, y)| BatchItem {
                    x,
                    y,
                    source: Arc::from("t"),
                    generation: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn quadratic_closed_form() {
        let m = ModelParams::scalar(1.0);
        let (loss, g) =
            forward_backward(Objective::Quadratic { lambda: 500.0 }, &m, &batch(&[]), None, Exec::Sequential)
                .unwrap();
        assert_eq!(loss, 250.0);
        assert_eq!(g.to_flat(), vec![500.0]);
    }

    #[test]
    fn zero_mlp_on_zero_targets() {
        let mut rng = TrainRng::seed_from_u64(0);
        let mut m = ModelParams::mlp(8, 0.0, &mut rng);
        m.layers.iter_mut().for_each(Layer::reset);
        let b = batch(&[(0.3, 0.0), (-0.7, 0.0), (1.0, 0.0)]);
        let (loss, g) = forward_backward(Objective::Mse, &m, &b, None, Exec::Parallel).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.values().all(|v| *v == 0.0));
    }

    #[test]
    fn mse_rejects_bad_input() {
        let mut rng = TrainRng::seed_from_u64(0);
        let m = ModelParams::mlp(4, 0.0, &mut rng);
        assert_eq!(
            forward_backward(Objective::Mse, &m, &batch(&[]), None, Exec::Sequential),
            Err(ModelError::EmptyBatch)
        );
        assert_eq!(
            forward_backward(Objective::Mse, &m, &batch(&[(f64::NAN, 0.0)]), None, Exec::Sequential),
            Err(ModelError::NonFinite("batch"))
        );
        let mut broken = m.clone();
        broken.layers[1].cols = 3;
        assert!(matches!(
            forward_backward(Objective::Mse, &broken, &batch(&[(0.0, 0.0)]), None, Exec::Sequential),
            Err(ModelError::Shape(_))
        ));
    }

    #[test]
    fn parallel_and_sequential_bitwise_equal() {
        let mut rng = TrainRng::seed_from_u64(4);
        let m = ModelParams::mlp(16, 0.25, &mut rng);
        let pts: Vec<(f64, f64)> = (0..517).map(|_| (rng.uniform_range(-1.0, 1.0), rng.normal())).collect();
        let b = batch(&pts);
        let masks = DropoutMasks::draw(&m, b.len(), &mut rng);
        assert!(masks.is_some());
        let (l1, g1) = forward_backward(Objective::Mse, &m, &b, masks.as_ref(), Exec::Sequential).unwrap();
        let (l2, g2) = forward_backward(Objective::Mse, &m, &b, masks.as_ref(), Exec::Parallel).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert!(g1.values().zip(g2.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn clip_three_four_five() {
        let m = ModelParams {
            layers: vec![Layer::zeros("g", 2, 1, false, Activation::Identity)],
        };
        let mut g = ParamBuffers::from_flat(&m, &[3.0, 4.0]);
        assert_eq!(clip_gradients(&mut g, 2.5).unwrap(), 5.0);
        assert_eq!(g.to_flat(), vec![1.5, 2.0]);
        let mut g = ParamBuffers::from_flat(&m, &[3.0, 4.0]);
        assert_eq!(clip_gradients(&mut g, 10.0).unwrap(), 5.0);
        assert_eq!(g.to_flat(), vec![3.0, 4.0]);
        let mut g = ParamBuffers::from_flat(&m, &[f64::NAN, 4.0]);
        assert_eq!(clip_gradients(&mut g, 1.0), Err(ModelError::NonFinite("gradients")));
    }

    #[test]
    fn sgd_plain_step() {
        // f(w) = w², grad 2w.
        let mut m = ModelParams::scalar(1.0);
        let mut v = ParamBuffers::zeros_like(&m);
        let g = ParamBuffers::from_flat(&m, &[2.0]);
        sgd_momentum_step(&mut m, &mut v, &g, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(m.to_flat(), vec![0.8]);

        let before = m.clone();
        let zero = ParamBuffers::zeros_like(&m);
        let mut v = ParamBuffers::zeros_like(&m);
        sgd_momentum_step(&mut m, &mut v, &zero, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn non_finite_update_leaves_state_untouched() {
        let mut m = ModelParams::scalar(1.0);
        let mut v = ParamBuffers::zeros_like(&m);
        let g = ParamBuffers::from_flat(&m, &[f64::MAX]);
        let (m0, v0) = (m.clone(), v.clone());
        assert!(sgd_momentum_step(&mut m, &mut v, &g, 10.0, 0.0, 0.0).is_err());
        assert_eq!((m, v), (m0, v0));
    }

    #[test]
    fn momentum_and_weight_decay() {
        let mut m = ModelParams::scalar(2.0);
        let mut v = ParamBuffers::from_flat(&m, &[1.0]);
        let g = ParamBuffers::from_flat(&m, &[0.5]);
        sgd_momentum_step(&mut m, &mut v, &g, 0.1, 0.9, 0.01).unwrap();
        // v = 0.9 + 0.5 + 0.02 = 1.42; w = 2 - 0.142
        assert!((v.to_flat()[0] - 1.42).abs() < 1e-15);
        assert!((m.to_flat()[0] - 1.858).abs() < 1e-15);
    }

    #[test]
    fn perfect_fit_has_zero_mse() {
        let mut rng = TrainRng::seed_from_u64(2);
        let m = ModelParams::mlp(4, 0.0, &mut rng);
        let examples: Vec<Example> = (0..50)
            .map(|i| {
                let x = i as f64 / 25.0 - 1.0;
                Example {
                    x,
                    y: forward_one(&m, x, None).0,
                }
            })
            .collect();
        assert_eq!(mse(&m, &examples, Exec::Parallel), 0.0);
    }
}
