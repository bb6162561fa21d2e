//! The fast reasoner: a two-layer perceptron with a classification head and
//! an integration head, trained per task on frozen convolutional features.
//!
//! The integration head regresses the summed one-hot shape/color count
//! vectors of the sample's concept graph, weighted by `lambda` against the
//! cross-entropy term. All math is generic over f32/f64 so that gradient
//! checks run the identical code path in double precision.

mod conv;

pub mod checkpoint;

pub use conv::{ExtractorMode, FeatureExtractor, CONV1_OUT, CONV2_OUT, FEATURE_DIM, KERNEL};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decompose::ConceptGraph;
use crate::error::{Error, Result};

/// Width of the embedding produced by the trunk layer.
pub const HIDDEN_DIM: usize = 256;
/// Integration target width: 4 shape counts + 7 color counts.
pub const ATTR_DIM: usize = 11;

/// Scalar type for the differentiable stack.
pub trait Real:
    num_traits::Float + ndarray::LinalgScalar + Send + Sync + std::fmt::Debug + 'static
{
    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn into_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Count summary of a concept graph: how many nodes of each shape and color.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSummary {
    pub shape_counts: [u32; 4],
    pub color_counts: [u32; 7],
}

impl AttributeSummary {
    /// The 11-dimensional regression target, shapes then colors.
    pub fn target<T: Real>(&self) -> [T; ATTR_DIM] {
        let mut out = [T::zero(); ATTR_DIM];
        for (i, &c) in self.shape_counts.iter().enumerate() {
            out[i] = T::from_f64(f64::from(c));
        }
        for (i, &c) in self.color_counts.iter().enumerate() {
            out[4 + i] = T::from_f64(f64::from(c));
        }
        out
    }
}

/// Per-node one-hot shape and color vectors, summed over the graph.
pub fn summarize_attributes(graph: &ConceptGraph) -> AttributeSummary {
    let mut shape_counts = [0u32; 4];
    let mut color_counts = [0u32; 7];
    for node in &graph.nodes {
        shape_counts[node.shape.code() as usize] += 1;
        color_counts[node.color.code() as usize] += 1;
    }
    AttributeSummary { shape_counts, color_counts }
}

/// Trainable parameters: trunk (theta_n), classification head (W, b), and
/// integration head (theta_i). The frozen feature extractor lives elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T: Real> {
    pub trunk_w: Array2<T>,
    pub trunk_b: Array1<T>,
    pub head_w: Array2<T>,
    pub head_b: Array1<T>,
    pub integ_w: Array2<T>,
    pub integ_b: Array1<T>,
}

fn uniform_fan_in<T: Real>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<T> {
    let bound = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| T::from_f64(rng.gen_range(-bound..bound)))
}

fn uniform_bias<T: Real>(len: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Array1<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array1::from_shape_fn(len, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

impl<T: Real> MlpParams<T> {
    /// Fresh parameters for `classes` output classes over `feature_dim`
    /// inputs, uniform fan-in initialization.
    pub fn init(feature_dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> MlpParams<T> {
        MlpParams {
            trunk_w: uniform_fan_in(HIDDEN_DIM, feature_dim, rng),
            trunk_b: uniform_bias(HIDDEN_DIM, feature_dim, rng),
            head_w: uniform_fan_in(classes, HIDDEN_DIM, rng),
            head_b: uniform_bias(classes, HIDDEN_DIM, rng),
            integ_w: uniform_fan_in(ATTR_DIM, HIDDEN_DIM, rng),
            integ_b: uniform_bias(ATTR_DIM, HIDDEN_DIM, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.head_w.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk_w.ncols()
    }

    /// Flat view of all parameter tensors, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, Vec<T>)> {
        vec![
            ("trunk_w", vec![self.trunk_w.nrows(), self.trunk_w.ncols()], self.trunk_w.iter().copied().collect()),
            ("trunk_b", vec![self.trunk_b.len()], self.trunk_b.to_vec()),
            ("head_w", vec![self.head_w.nrows(), self.head_w.ncols()], self.head_w.iter().copied().collect()),
            ("head_b", vec![self.head_b.len()], self.head_b.to_vec()),
            ("integ_w", vec![self.integ_w.nrows(), self.integ_w.ncols()], self.integ_w.iter().copied().collect()),
            ("integ_b", vec![self.integ_b.len()], self.integ_b.to_vec()),
        ]
    }
}

/// Re-initialize every trainable group; the feature extractor is untouched
/// because it is not part of these parameters. Draw order is fixed (trunk,
/// head, integration), so equal seeds give equal parameters.
pub fn reset_heads<T: Real>(params: &MlpParams<T>, rng: &mut ChaCha8Rng) -> MlpParams<T> {
    MlpParams::init(params.feature_dim(), params.classes(), rng)
}

/// One training batch: rows of features, task-local labels, and the
/// integration targets derived from each sample's concept graph.
#[derive(Debug, Clone)]
pub struct Batch<T: Real> {
    pub features: Array2<T>,
    pub labels: Vec<usize>,
    pub attr_targets: Array2<T>,
}

/// Forward pass: logits and attribute predictions for a batch of features.
pub fn forward<T: Real>(
    params: &MlpParams<T>,
    features: &Array2<T>,
) -> Result<(Array2<T>, Array2<T>)> {
    let (logits, attr, _) = forward_cached(params, features)?;
    Ok((logits, attr))
}

struct ForwardCache<T: Real> {
    pre: Array2<T>,
    hidden: Array2<T>,
}

fn forward_cached<T: Real>(
    params: &MlpParams<T>,
    features: &Array2<T>,
) -> Result<(Array2<T>, Array2<T>, ForwardCache<T>)> {
    if features.ncols() != params.feature_dim() {
        return Err(Error::ShapeMismatch {
            context: format!(
                "features have {} columns, parameters expect {}",
                features.ncols(),
                params.feature_dim()
            ),
        });
    }
    let pre = features.dot(&params.trunk_w.t()) + &params.trunk_b;
    let hidden = pre.mapv(|x| if x > T::zero() { x } else { T::zero() });
    let logits = hidden.dot(&params.head_w.t()) + &params.head_b;
    let attr = hidden.dot(&params.integ_w.t()) + &params.integ_b;
    Ok((logits, attr, ForwardCache { pre, hidden }))
}

/// Row-wise softmax probabilities.
pub fn softmax<T: Real>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

/// Gradients for every trainable group, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct Grads<T: Real> {
    pub trunk_w: Array2<T>,
    pub trunk_b: Array1<T>,
    pub head_w: Array2<T>,
    pub head_b: Array1<T>,
    pub integ_w: Array2<T>,
    pub integ_b: Array1<T>,
}

/// Loss value and gradients on one batch.
///
/// Loss = mean cross-entropy of logits vs labels
///      + lambda * mean squared error of attribute predictions (mean over
///        batch and the 11 components).
pub fn loss<T: Real>(
    params: &MlpParams<T>,
    batch: &Batch<T>,
    lambda: f64,
) -> Result<(T, Grads<T>)> {
    let n = batch.labels.len();
    if n == 0 || batch.features.nrows() != n || batch.attr_targets.nrows() != n {
        return Err(Error::ShapeMismatch { context: "batch rows disagree".into() });
    }
    let (logits, attr, cache) = forward_cached(params, &batch.features)?;
    let nf = T::from_f64(n as f64);
    let lam = T::from_f64(lambda);

    // Cross entropy with stable log-sum-exp.
    let mut ce = T::zero();
    let mut dlogits = softmax(&logits);
    for (i, &label) in batch.labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&x| (x - max).exp()).fold(T::zero(), |a, b| a + b).ln() + max;
        ce = ce + lse - row[label];
        dlogits[(i, label)] = dlogits[(i, label)] - T::one();
    }
    ce = ce / nf;
    dlogits.mapv_inplace(|x| x / nf);

    // Squared error on attribute counts.
    let diff = &attr - &batch.attr_targets;
    let attr_count = T::from_f64((n * ATTR_DIM) as f64);
    let mse = diff.mapv(|x| x * x).sum() / attr_count;
    let two = T::from_f64(2.0);
    let dattr = diff.mapv(|x| lam * two * x / attr_count);

    let total = ce + lam * mse;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0, trace: Vec::new() });
    }

    // Backpropagation through the two heads and the trunk.
    let head_w_grad = dlogits.t().dot(&cache.hidden);
    let head_b_grad = dlogits.sum_axis(Axis(0));
    let integ_w_grad = dattr.t().dot(&cache.hidden);
    let integ_b_grad = dattr.sum_axis(Axis(0));
    let mut dhidden = dlogits.dot(&params.head_w) + dattr.dot(&params.integ_w);
    ndarray::Zip::from(&mut dhidden).and(&cache.pre).for_each(|g, &p| {
        if p <= T::zero() {
            *g = T::zero();
        }
    });
    let trunk_w_grad = dhidden.t().dot(&batch.features);
    let trunk_b_grad = dhidden.sum_axis(Axis(0));

    Ok((
        total,
        Grads {
            trunk_w: trunk_w_grad,
            trunk_b: trunk_b_grad,
            head_w: head_w_grad,
            head_b: head_b_grad,
            integ_w: integ_w_grad,
            integ_b: integ_b_grad,
        },
    ))
}

/// Optimizer settings and the task training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 200,
            batch_size: 32,
            lambda: 1.5,
            seed: 0,
        }
    }
}

/// Adam state for one tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> AdamState<T> {
        AdamState { m: vec![T::zero(); len], v: vec![T::zero(); len] }
    }

    /// Grow the state with zeros when a tensor gains parameters.
    pub fn grow(&mut self, len: usize) {
        self.m.resize(len, T::zero());
        self.v.resize(len, T::zero());
    }
}

/// Adam over a fixed ordered set of tensors; `step` counts updates applied.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub config: TrainConfig,
    pub step: u64,
    pub states: Vec<AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: &TrainConfig, lens: &[usize]) -> Adam<T> {
        Adam {
            config: config.clone(),
            step: 0,
            states: lens.iter().map(|&l| AdamState::new(l)).collect(),
        }
    }

    /// Apply one update across tensors; gradient slices pair with parameter
    /// slices in the order the optimizer was built with.
    pub fn update(&mut self, tensors: &mut [&mut [T]], grads: &[&[T]]) {
        self.step += 1;
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let lr = T::from_f64(self.config.learning_rate);
        let eps = T::from_f64(self.config.epsilon);
        let one = T::one();
        let bc1 = one - T::from_f64(self.config.beta1.powi(self.step as i32));
        let bc2 = one - T::from_f64(self.config.beta2.powi(self.step as i32));
        for ((tensor, grad), state) in tensors.iter_mut().zip(grads).zip(&mut self.states) {
            debug_assert_eq!(tensor.len(), grad.len());
            for i in 0..tensor.len() {
                let g = grad[i];
                state.m[i] = b1 * state.m[i] + (one - b1) * g;
                state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                tensor[i] = tensor[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// The full task data, already featurized.
#[derive(Debug, Clone)]
pub struct TaskTensors<T: Real> {
    pub features: Array2<T>,
    pub labels: Vec<usize>,
    pub attr_targets: Array2<T>,
}

impl<T: Real> TaskTensors<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch<T> {
        let features = self.features.select(Axis(0), indices);
        let attr_targets = self.attr_targets.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Batch { features, labels, attr_targets }
    }
}

fn adam_slices<'a, T: Real>(params: &'a mut MlpParams<T>) -> Vec<&'a mut [T]> {
    vec![
        params.trunk_w.as_slice_mut().unwrap(),
        params.trunk_b.as_slice_mut().unwrap(),
        params.head_w.as_slice_mut().unwrap(),
        params.head_b.as_slice_mut().unwrap(),
        params.integ_w.as_slice_mut().unwrap(),
        params.integ_b.as_slice_mut().unwrap(),
    ]
}

fn grad_slices<'a, T: Real>(grads: &'a Grads<T>) -> Vec<&'a [T]> {
    vec![
        grads.trunk_w.as_slice().unwrap(),
        grads.trunk_b.as_slice().unwrap(),
        grads.head_w.as_slice().unwrap(),
        grads.head_b.as_slice().unwrap(),
        grads.integ_w.as_slice().unwrap(),
        grads.integ_b.as_slice().unwrap(),
    ]
}

/// Shuffled minibatch index order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = crate::rng::stream(seed, "epoch-shuffle", &[u64::from(epoch)]);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Train on one task with Adam for `epochs` passes of shuffled minibatches.
/// Returns the final parameters and the per-epoch mean loss trace.
pub fn train_task<T: Real>(
    params: MlpParams<T>,
    data: &TaskTensors<T>,
    config: &TrainConfig,
) -> Result<(MlpParams<T>, Vec<f64>)> {
    let mut params = params;
    let lens: Vec<usize> = params.tensors().iter().map(|(_, _, v)| v.len()).collect();
    let mut adam = Adam::<T>::new(config, &lens);
    let mut trace = Vec::with_capacity(config.epochs as usize);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let order = epoch_order(data.len(), config.seed, epoch);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0.0f64;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch = data.batch(chunk);
            let (value, grads) = loss(&params, &batch, config.lambda).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step, trace: trace.clone() },
                other => other,
            })?;
            adam.update(&mut adam_slices(&mut params), &grad_slices(&grads));
            epoch_loss += value.into_f64();
            batches += 1.0;
            step += 1;
        }
        trace.push(epoch_loss / batches.max(1.0));
    }
    Ok((params, trace))
}

#[cfg(test)]
mod tests;
