//! Neural continual-learning baselines over a shared frozen extractor:
//! fine-tuning, joint multi-task training, experience replay, weight
//! consolidation (EWC), synaptic intelligence (SI), distillation (LWF), and
//! episodic gradient projection (GEM).
//!
//! All methods share the same trunk initialization, head-row initialization,
//! and shuffled data order for a given seed, so accuracy differences are
//! attributable to the continual-learning mechanism alone. Training is
//! single-head task-incremental: the classifier grows rows per task and both
//! training and evaluation mask logits to one task's rows.

pub mod gem;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::AccuracyMatrix;
use crate::neural::{epoch_order, softmax, Adam, Real, TrainConfig, HIDDEN_DIM};
use crate::rng;

/// Method-specific hyperparameters (the shared optimizer schedule lives in
/// `TrainConfig`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Replay buffer capacity per class (experience replay).
    pub buffer_per_class: usize,
    /// Penalty strength for weight consolidation.
    pub lambda_ewc: f64,
    /// Penalty strength for synaptic intelligence.
    pub c_si: f64,
    /// Damping added to squared parameter displacement in SI consolidation.
    pub xi_si: f64,
    /// Weight of the distillation term.
    pub lambda_lwf: f64,
    /// Softmax temperature for distillation.
    pub temperature: f64,
    /// Stored samples per past task for gradient projection.
    pub mem_per_task: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            buffer_per_class: 5,
            lambda_ewc: 100.0,
            c_si: 0.1,
            xi_si: 1e-3,
            lambda_lwf: 1.0,
            temperature: 2.0,
            mem_per_task: 32,
        }
    }
}

/// One task's featurized data with task-local labels.
#[derive(Debug, Clone)]
pub struct TaskSplit<T: Real> {
    pub train_features: Array2<T>,
    pub train_labels: Vec<usize>,
    pub test_features: Array2<T>,
    pub test_labels: Vec<usize>,
    pub class_count: usize,
}

/// Single-head network whose classifier grows by one row block per task.
/// Evaluation masks logits to the queried task's rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowingNet<T: Real> {
    pub trunk_w: Array2<T>,
    pub trunk_b: Array1<T>,
    pub head_w: Array2<T>,
    pub head_b: Array1<T>,
    pub task_ranges: Vec<(usize, usize)>,
}

fn uniform<T: Real>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<T> {
    let bound = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| T::from_f64(rng.gen_range(-bound..bound)))
}

impl<T: Real> GrowingNet<T> {
    pub fn new(feature_dim: usize, seed: u64) -> GrowingNet<T> {
        let mut r = rng::stream(seed, "baseline-trunk", &[]);
        let bound = 1.0 / (feature_dim as f64).sqrt();
        GrowingNet {
            trunk_w: uniform(HIDDEN_DIM, feature_dim, &mut r),
            trunk_b: Array1::from_shape_fn(HIDDEN_DIM, |_| {
                T::from_f64(r.gen_range(-bound..bound))
            }),
            head_w: Array2::zeros((0, HIDDEN_DIM)),
            head_b: Array1::zeros(0),
            task_ranges: Vec::new(),
        }
    }

    /// Append one task's head rows, initialized from the given seed stream.
    pub fn add_task_rows(&mut self, classes: usize, seed: u64, task: u64) {
        let mut r = rng::stream(seed, "baseline-head", &[task]);
        let fresh_w: Array2<T> = uniform(classes, HIDDEN_DIM, &mut r);
        let bound = 1.0 / (HIDDEN_DIM as f64).sqrt();
        let fresh_b: Array1<T> =
            Array1::from_shape_fn(classes, |_| T::from_f64(r.gen_range(-bound..bound)));
        let lo = self.head_w.nrows();
        self.head_w = ndarray::concatenate(Axis(0), &[self.head_w.view(), fresh_w.view()])
            .expect("row append");
        self.head_b = ndarray::concatenate(Axis(0), &[self.head_b.view(), fresh_b.view()])
            .expect("row append");
        self.task_ranges.push((lo, lo + classes));
    }

    pub fn hidden(&self, features: &Array2<T>) -> (Array2<T>, Array2<T>) {
        let pre = features.dot(&self.trunk_w.t()) + &self.trunk_b;
        let hidden = pre.mapv(|x| if x > T::zero() { x } else { T::zero() });
        (pre, hidden)
    }

    fn range_logits(&self, hidden: &Array2<T>, range: (usize, usize)) -> Array2<T> {
        let w = self.head_w.slice(ndarray::s![range.0..range.1, ..]);
        let b = self.head_b.slice(ndarray::s![range.0..range.1]);
        hidden.dot(&w.t()) + &b
    }

    /// Task-masked predictions: local label indices within the task's rows.
    pub fn predict(&self, features: &Array2<T>, task: usize) -> Vec<usize> {
        let (_, hidden) = self.hidden(features);
        let logits = self.range_logits(&hidden, self.task_ranges[task]);
        logits
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn accuracy(&self, features: &Array2<T>, labels: &[usize], task: usize) -> f64 {
        let predictions = self.predict(features, task);
        let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
        hits as f64 / labels.len().max(1) as f64
    }

    fn tensor_lens(&self) -> Vec<usize> {
        vec![self.trunk_w.len(), self.trunk_b.len(), self.head_w.len(), self.head_b.len()]
    }

    fn flat(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.tensor_lens().iter().sum());
        v.extend(self.trunk_w.iter());
        v.extend(self.trunk_b.iter());
        v.extend(self.head_w.iter());
        v.extend(self.head_b.iter());
        v
    }
}

/// Gradient block matching `GrowingNet`'s tensors.
#[derive(Debug, Clone)]
pub struct NetGrads<T: Real> {
    pub trunk_w: Array2<T>,
    pub trunk_b: Array1<T>,
    pub head_w: Array2<T>,
    pub head_b: Array1<T>,
}

impl<T: Real> NetGrads<T> {
    fn zeros_like(net: &GrowingNet<T>) -> NetGrads<T> {
        NetGrads {
            trunk_w: Array2::zeros(net.trunk_w.raw_dim()),
            trunk_b: Array1::zeros(net.trunk_b.raw_dim()),
            head_w: Array2::zeros(net.head_w.raw_dim()),
            head_b: Array1::zeros(net.head_b.raw_dim()),
        }
    }

    fn flat(&self) -> Vec<T> {
        let mut v = Vec::new();
        v.extend(self.trunk_w.iter());
        v.extend(self.trunk_b.iter());
        v.extend(self.head_w.iter());
        v.extend(self.head_b.iter());
        v
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for g in self
            .trunk_w
            .iter_mut()
            .chain(self.trunk_b.iter_mut())
            .chain(self.head_w.iter_mut())
            .chain(self.head_b.iter_mut())
        {
            *g = T::from_f64(*it.next().expect("flat length"));
        }
    }
}

/// Mean masked cross-entropy over possibly mixed-task groups, with gradients.
/// Rows outside each group's range receive no gradient.
pub fn masked_ce_grads<T: Real>(
    net: &GrowingNet<T>,
    groups: &[(Array2<T>, Vec<usize>, (usize, usize))],
) -> (T, NetGrads<T>) {
    let total: usize = groups.iter().map(|(_, l, _)| l.len()).sum();
    let nf = T::from_f64(total as f64);
    let mut grads = NetGrads::zeros_like(net);
    let mut value = T::zero();
    for (features, labels, range) in groups {
        let (pre, hidden) = net.hidden(features);
        let logits = net.range_logits(&hidden, *range);
        let mut dlogits = softmax(&logits);
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse =
                row.iter().map(|&x| (x - max).exp()).fold(T::zero(), |a, b| a + b).ln() + max;
            value = value + lse - row[label];
            dlogits[(i, label)] = dlogits[(i, label)] - T::one();
        }
        dlogits.mapv_inplace(|x| x / nf);

        let w = net.head_w.slice(ndarray::s![range.0..range.1, ..]);
        let dw = dlogits.t().dot(&hidden);
        grads
            .head_w
            .slice_mut(ndarray::s![range.0..range.1, ..])
            .zip_mut_with(&dw, |a, &b| *a = *a + b);
        let db = dlogits.sum_axis(Axis(0));
        grads
            .head_b
            .slice_mut(ndarray::s![range.0..range.1])
            .zip_mut_with(&db, |a, &b| *a = *a + b);

        let mut dhidden = dlogits.dot(&w);
        ndarray::Zip::from(&mut dhidden).and(&pre).for_each(|g, &p| {
            if p <= T::zero() {
                *g = T::zero();
            }
        });
        grads.trunk_w.zip_mut_with(&dhidden.t().dot(features), |a, &b| *a = *a + b);
        grads.trunk_b.zip_mut_with(&dhidden.sum_axis(Axis(0)), |a, &b| *a = *a + b);
    }
    (value / nf, grads)
}

/// `scale * sum(importance * (theta - anchor)^2)` and its gradient
/// contribution `2 * scale * importance * (theta - anchor)`, applied over the
/// anchor's extent (parameters added after the anchor was taken are free).
pub fn quadratic_penalty<T: Real>(
    theta: &[T],
    anchor: &[T],
    importance: &[T],
    scale: T,
    grad_out: &mut [T],
) -> T {
    let mut value = T::zero();
    let two = T::from_f64(2.0);
    for i in 0..anchor.len() {
        let d = theta[i] - anchor[i];
        value = value + importance[i] * d * d;
        grad_out[i] = grad_out[i] + two * scale * importance[i] * d;
    }
    value * scale
}

struct SnapshotBlock<T: Real> {
    tensors: Vec<Vec<T>>, // trunk_w, trunk_b, head_w, head_b at capture time
}

impl<T: Real> SnapshotBlock<T> {
    fn capture(net: &GrowingNet<T>) -> SnapshotBlock<T> {
        SnapshotBlock {
            tensors: vec![
                net.trunk_w.iter().copied().collect(),
                net.trunk_b.to_vec(),
                net.head_w.iter().copied().collect(),
                net.head_b.to_vec(),
            ],
        }
    }
}

fn penalty_over_block<T: Real>(
    net: &GrowingNet<T>,
    anchor: &SnapshotBlock<T>,
    importance: &SnapshotBlock<T>,
    scale: T,
    grads: &mut NetGrads<T>,
) -> T {
    let theta: [&[T]; 4] = [
        net.trunk_w.as_slice().unwrap(),
        net.trunk_b.as_slice().unwrap(),
        net.head_w.as_slice().unwrap(),
        net.head_b.as_slice().unwrap(),
    ];
    let mut value = T::zero();
    let grad_slices: [&mut [T]; 4] = [
        grads.trunk_w.as_slice_mut().unwrap(),
        grads.trunk_b.as_slice_mut().unwrap(),
        grads.head_w.as_slice_mut().unwrap(),
        grads.head_b.as_slice_mut().unwrap(),
    ];
    for (((t, a), imp), g) in theta
        .into_iter()
        .zip(&anchor.tensors)
        .zip(&importance.tensors)
        .zip(grad_slices)
    {
        value = value + quadratic_penalty(t, a, imp, scale, g);
    }
    value
}

fn adam_update<T: Real>(adam: &mut Adam<T>, net: &mut GrowingNet<T>, grads: &NetGrads<T>) {
    adam.update(
        &mut [
            net.trunk_w.as_slice_mut().unwrap(),
            net.trunk_b.as_slice_mut().unwrap(),
            net.head_w.as_slice_mut().unwrap(),
            net.head_b.as_slice_mut().unwrap(),
        ],
        &[
            grads.trunk_w.as_slice().unwrap(),
            grads.trunk_b.as_slice().unwrap(),
            grads.head_w.as_slice().unwrap(),
            grads.head_b.as_slice().unwrap(),
        ],
    );
}

fn grow_adam<T: Real>(adam: &mut Adam<T>, net: &GrowingNet<T>) {
    for (state, len) in adam.states.iter_mut().zip(net.tensor_lens()) {
        state.grow(len);
    }
}

fn shuffle_seed(seed: u64, task: usize) -> u64 {
    rng::stream(seed, "baseline-shuffle", &[task as u64]).gen()
}

fn evaluate_all<T: Real>(
    net: &GrowingNet<T>,
    tasks: &[TaskSplit<T>],
    upto: usize,
    matrix: &mut AccuracyMatrix,
) {
    for i in 0..=upto {
        let acc = net.accuracy(&tasks[i].test_features, &tasks[i].test_labels, i);
        matrix.set(i, upto, acc);
    }
}

/// Which anti-forgetting mechanism a sequential run applies.
enum Mechanism<T: Real> {
    None,
    Replay {
        buffer: Vec<(Vec<T>, usize, usize)>, // features, local label, task
        per_class: usize,
    },
    Ewc {
        anchors: Vec<(SnapshotBlock<T>, SnapshotBlock<T>)>, // (theta*, fisher)
        lambda: f64,
    },
    Si {
        omega: Vec<f64>,
        consolidated: Option<(SnapshotBlock<T>, SnapshotBlock<T>)>, // (theta*, Omega)
        task_start: Vec<T>,
        c: f64,
        xi: f64,
    },
    Lwf {
        snapshot: Option<GrowingNet<T>>,
        lambda: f64,
        temperature: f64,
    },
    Gem {
        memory: Vec<(Array2<T>, Vec<usize>, (usize, usize))>,
        per_task: usize,
    },
}

/// Sequential single-head training with a pluggable mechanism; shared by
/// fine-tuning, ER, EWC, SI, LWF, and GEM so every method sees identical
/// initialization and data order.
fn run_sequential<T: Real>(
    tasks: &[TaskSplit<T>],
    train: &TrainConfig,
    mut mechanism: Mechanism<T>,
) -> Result<AccuracyMatrix> {
    let seed = train.seed;
    let feature_dim = tasks[0].train_features.ncols();
    let mut net: GrowingNet<T> = GrowingNet::new(feature_dim, seed);
    let mut adam: Adam<T> = Adam::new(train, &net.tensor_lens());
    let mut matrix = AccuracyMatrix::new(tasks.len());

    for (t, task) in tasks.iter().enumerate() {
        net.add_task_rows(task.class_count, seed, t as u64);
        grow_adam(&mut adam, &net);
        let range = net.task_ranges[t];

        if let Mechanism::Si { omega, task_start, .. } = &mut mechanism {
            omega.resize(net.flat().len(), 0.0);
            *task_start = net.flat();
        }
        if let Mechanism::Lwf { snapshot, .. } = &mut mechanism {
            *snapshot = if t > 0 { Some(net.clone()) } else { None };
        }

        let order_seed = shuffle_seed(seed, t);
        for epoch in 0..train.epochs {
            let order = epoch_order(task.train_labels.len(), order_seed, epoch);
            for (step_in_epoch, chunk) in order.chunks(train.batch_size.max(1)).enumerate() {
                let current_features = task.train_features.select(Axis(0), chunk);
                let current_labels: Vec<usize> =
                    chunk.iter().map(|&i| task.train_labels[i]).collect();

                let mut groups: Vec<(Array2<T>, Vec<usize>, (usize, usize))> = Vec::new();

                // Experience replay mixes half a batch from the buffer.
                if let Mechanism::Replay { buffer, .. } = &mechanism {
                    if buffer.is_empty() {
                        groups.push((current_features, current_labels, range));
                    } else {
                        let half = (chunk.len() / 2).max(1);
                        let keep = chunk.len() - half;
                        let mut r = rng::stream(
                            seed,
                            "er-replay",
                            &[t as u64, u64::from(epoch), step_in_epoch as u64],
                        );
                        let mut by_task: std::collections::BTreeMap<
                            usize,
                            (Vec<Vec<T>>, Vec<usize>),
                        > = std::collections::BTreeMap::new();
                        for _ in 0..half {
                            let (f, label, btask) = &buffer[r.gen_range(0..buffer.len())];
                            let entry = by_task.entry(*btask).or_default();
                            entry.0.push(f.clone());
                            entry.1.push(*label);
                        }
                        groups.push((
                            task.train_features.select(Axis(0), &chunk[..keep]),
                            chunk[..keep].iter().map(|&i| task.train_labels[i]).collect(),
                            range,
                        ));
                        for (btask, (rows, labels)) in by_task {
                            let mut features = Array2::zeros((rows.len(), feature_dim));
                            for (i, row) in rows.iter().enumerate() {
                                features
                                    .row_mut(i)
                                    .assign(&ndarray::ArrayView1::from(row.as_slice()));
                            }
                            groups.push((features, labels, net.task_ranges[btask]));
                        }
                    }
                } else {
                    groups.push((current_features, current_labels, range));
                }

                let (_, mut grads) = masked_ce_grads(&net, &groups);

                match &mut mechanism {
                    Mechanism::Ewc { anchors, lambda } => {
                        for (theta_star, fisher) in anchors.iter() {
                            penalty_over_block(
                                &net,
                                theta_star,
                                fisher,
                                T::from_f64(*lambda / 2.0),
                                &mut grads,
                            );
                        }
                    }
                    Mechanism::Si { consolidated, c, .. } => {
                        if let Some((theta_star, omega_big)) = consolidated {
                            penalty_over_block(
                                &net,
                                theta_star,
                                omega_big,
                                T::from_f64(*c),
                                &mut grads,
                            );
                        }
                    }
                    Mechanism::Lwf { snapshot: Some(snap), lambda, temperature } => {
                        let features = task.train_features.select(Axis(0), chunk);
                        distill_grads(&net, snap, &features, t, *lambda, *temperature, &mut grads);
                    }
                    Mechanism::Gem { memory, .. } => {
                        if !memory.is_empty() {
                            let g: Vec<f64> =
                                grads.flat().iter().map(|x| x.into_f64()).collect();
                            let references: Vec<Vec<f64>> = memory
                                .iter()
                                .map(|(f, l, r)| {
                                    let (_, g_k) =
                                        masked_ce_grads(&net, &[(f.clone(), l.clone(), *r)]);
                                    g_k.flat().iter().map(|x| x.into_f64()).collect()
                                })
                                .collect();
                            let projected = gem::project(&g, &references);
                            grads.assign_flat(&projected);
                        }
                    }
                    _ => {}
                }

                if let Mechanism::Si { omega, .. } = &mut mechanism {
                    let before = net.flat();
                    let g_flat = grads.flat();
                    adam_update(&mut adam, &mut net, &grads);
                    let after = net.flat();
                    for i in 0..omega.len() {
                        omega[i] -=
                            g_flat[i].into_f64() * (after[i].into_f64() - before[i].into_f64());
                    }
                } else {
                    adam_update(&mut adam, &mut net, &grads);
                }
            }
        }

        // Post-task consolidation / memory bookkeeping.
        match &mut mechanism {
            Mechanism::Replay { buffer, per_class } => {
                if *per_class > 0 {
                    let mut stored: std::collections::BTreeMap<usize, usize> =
                        std::collections::BTreeMap::new();
                    for (i, &label) in task.train_labels.iter().enumerate() {
                        let count = stored.entry(label).or_insert(0);
                        if *count < *per_class {
                            buffer.push((
                                task.train_features.row(i).to_vec(),
                                label,
                                t,
                            ));
                            *count += 1;
                        }
                    }
                }
            }
            Mechanism::Ewc { anchors, .. } => {
                let fisher = fisher_diagonal(&net, task, range);
                anchors.push((SnapshotBlock::capture(&net), fisher));
            }
            Mechanism::Si { omega, consolidated, task_start, xi, .. } => {
                let end = net.flat();
                let mut omega_big = match consolidated.take() {
                    Some((_, mut prev)) => {
                        // Grow each tensor's importance to the new sizes.
                        let lens = net.tensor_lens();
                        for (tensor, len) in prev.tensors.iter_mut().zip(lens) {
                            tensor.resize(len, T::zero());
                        }
                        prev
                    }
                    None => SnapshotBlock {
                        tensors: net.tensor_lens().iter().map(|&l| vec![T::zero(); l]).collect(),
                    },
                };
                let mut idx = 0usize;
                for tensor in &mut omega_big.tensors {
                    for v in tensor.iter_mut() {
                        let delta = end[idx].into_f64() - task_start[idx].into_f64();
                        let gain = omega[idx].max(0.0) / (delta * delta + *xi);
                        *v = *v + T::from_f64(gain);
                        idx += 1;
                    }
                }
                omega.iter_mut().for_each(|w| *w = 0.0);
                *consolidated = Some((SnapshotBlock::capture(&net), omega_big));
            }
            Mechanism::Gem { memory, per_task } => {
                let count = (*per_task).min(task.train_labels.len());
                let indices: Vec<usize> = (0..count).collect();
                memory.push((
                    task.train_features.select(Axis(0), &indices),
                    indices.iter().map(|&i| task.train_labels[i]).collect(),
                    range,
                ));
            }
            _ => {}
        }

        evaluate_all(&net, tasks, t, &mut matrix);
    }
    Ok(matrix)
}

/// Distillation toward a snapshot's outputs on old-task rows, evaluated on
/// current-task inputs. Adds `lambda * mean over past tasks` of the
/// temperature-scaled cross-entropy to the gradients.
fn distill_grads<T: Real>(
    net: &GrowingNet<T>,
    snapshot: &GrowingNet<T>,
    features: &Array2<T>,
    current_task: usize,
    lambda: f64,
    temperature: f64,
    grads: &mut NetGrads<T>,
) -> T {
    let past = current_task;
    if past == 0 {
        return T::zero();
    }
    let n = features.nrows();
    let nf = T::from_f64(n as f64);
    let temp = T::from_f64(temperature);
    let weight = T::from_f64(lambda / past as f64);

    let (pre, hidden) = net.hidden(features);
    let (_, snap_hidden) = snapshot.hidden(features);
    let mut value = T::zero();
    let mut dhidden_total: Array2<T> = Array2::zeros(hidden.raw_dim());

    for k in 0..past {
        let range = net.task_ranges[k];
        let cur = net.range_logits(&hidden, range).mapv(|x| x / temp);
        let snap = snapshot.range_logits(&snap_hidden, range).mapv(|x| x / temp);
        let q = softmax(&cur);
        let s = softmax(&snap);
        for i in 0..n {
            for c in 0..range.1 - range.0 {
                value = value - s[(i, c)] * q[(i, c)].max(T::from_f64(1e-30)).ln();
            }
        }
        // d/d z_cur of CE(s, softmax(z/T)) = (q - s) / T, per row; averaged.
        let dlogits = (&q - &s).mapv(|x| weight * x / (temp * nf));
        let w = net.head_w.slice(ndarray::s![range.0..range.1, ..]);
        let dw = dlogits.t().dot(&hidden);
        grads
            .head_w
            .slice_mut(ndarray::s![range.0..range.1, ..])
            .zip_mut_with(&dw, |a, &b| *a = *a + b);
        let db = dlogits.sum_axis(Axis(0));
        grads
            .head_b
            .slice_mut(ndarray::s![range.0..range.1])
            .zip_mut_with(&db, |a, &b| *a = *a + b);
        dhidden_total.zip_mut_with(&dlogits.dot(&w), |a, &b| *a = *a + b);
    }

    let mut dhidden = dhidden_total;
    ndarray::Zip::from(&mut dhidden).and(&pre).for_each(|g, &p| {
        if p <= T::zero() {
            *g = T::zero();
        }
    });
    grads.trunk_w.zip_mut_with(&dhidden.t().dot(features), |a, &b| *a = *a + b);
    grads.trunk_b.zip_mut_with(&dhidden.sum_axis(Axis(0)), |a, &b| *a = *a + b);

    value * weight / nf
}

/// Diagonal Fisher estimate: mean squared per-sample gradient of the true
/// label's log-likelihood under the task-masked softmax, at the current
/// (converged) parameters.
fn fisher_diagonal<T: Real>(
    net: &GrowingNet<T>,
    task: &TaskSplit<T>,
    range: (usize, usize),
) -> SnapshotBlock<T> {
    let n = task.train_labels.len();
    let mut accum: Vec<Vec<f64>> =
        net.tensor_lens().iter().map(|&l| vec![0.0; l]).collect();
    for i in 0..n {
        let features = task.train_features.select(Axis(0), &[i]);
        let labels = vec![task.train_labels[i]];
        let (_, grads) = masked_ce_grads(net, &[(features, labels, range)]);
        for (acc, tensor) in accum.iter_mut().zip([
            grads.trunk_w.as_slice().unwrap(),
            grads.trunk_b.as_slice().unwrap(),
            grads.head_w.as_slice().unwrap(),
            grads.head_b.as_slice().unwrap(),
        ]) {
            for (a, g) in acc.iter_mut().zip(tensor) {
                let gf = g.into_f64();
                *a += gf * gf;
            }
        }
    }
    SnapshotBlock {
        tensors: accum
            .into_iter()
            .map(|tensor| tensor.into_iter().map(|v| T::from_f64(v / n as f64)).collect())
            .collect(),
    }
}

/// Naive sequential fine-tuning: no anti-forgetting mechanism.
pub fn train_finetune<T: Real>(
    tasks: &[TaskSplit<T>],
    train: &TrainConfig,
) -> Result<AccuracyMatrix> {
    run_sequential(tasks, train, Mechanism::<T>::None)
}

/// Experience replay with a fixed-per-class buffer.
pub fn train_er<T: Real>(
    tasks: &[TaskSplit<T>],
    train: &TrainConfig,
    config: &BaselineConfig,
) -> Result<AccuracyMatrix> {
    run_sequential(
        tasks,
        train,
        Mechanism::Replay { buffer: Vec::new(), per_class: config.buffer_per_class },
    )
}

/// Elastic weight consolidation with a diagonal Fisher penalty per past task.
pub fn train_ewc<T: Real>(
    tasks: &[TaskSplit<T>],
    train: &TrainConfig,
    config: &BaselineConfig,
) -> Result<AccuracyMatrix> {
    run_sequential(
        tasks,
        train,
        Mechanism::Ewc { anchors: Vec::new(), lambda: config.lambda_ewc },
    )
}

/// Synaptic intelligence: online path-integral importance.
pub fn train_si<T: Real>(
    tasks: &[TaskSplit<T>],
    train: &TrainConfig,
    config: &BaselineConfig,
) -> Result<AccuracyMatrix> {
    run_sequential(
        tasks,
        train,
        Mechanism::Si {
            omega: Vec::new(),
            consolidated: None,
            task_start: Vec::new(),
            c: config.c_si,
            xi: config.xi_si,
        },
    )
}

/// Learning without forgetting: distillation toward the pre-task snapshot.
pub fn train_lwf<T: Real>(
    tasks: &[TaskSplit<T>],
    train: &TrainConfig,
    config: &BaselineConfig,
) -> Result<AccuracyMatrix> {
    run_sequential(
        tasks,
        train,
        Mechanism::Lwf {
            snapshot: None,
            lambda: config.lambda_lwf,
            temperature: config.temperature,
        },
    )
}

/// Gradient episodic memory: per-step projection against stored task
/// gradients.
pub fn train_gem<T: Real>(
    tasks: &[TaskSplit<T>],
    train: &TrainConfig,
    config: &BaselineConfig,
) -> Result<AccuracyMatrix> {
    run_sequential(
        tasks,
        train,
        Mechanism::Gem { memory: Vec::new(), per_task: config.mem_per_task },
    )
}

/// Joint training over the union of all tasks with per-task heads; the upper
/// bound. Every matrix column holds the final model's accuracies.
pub fn train_multitask<T: Real>(
    tasks: &[TaskSplit<T>],
    train: &TrainConfig,
) -> Result<AccuracyMatrix> {
    let seed = train.seed;
    let feature_dim = tasks[0].train_features.ncols();
    let mut net: GrowingNet<T> = GrowingNet::new(feature_dim, seed);
    for (t, task) in tasks.iter().enumerate() {
        net.add_task_rows(task.class_count, seed, t as u64);
    }
    let mut adam: Adam<T> = Adam::new(train, &net.tensor_lens());

    let index: Vec<(usize, usize)> = tasks
        .iter()
        .enumerate()
        .flat_map(|(t, task)| (0..task.train_labels.len()).map(move |i| (t, i)))
        .collect();
    let order_seed = shuffle_seed(seed, usize::MAX - 1);
    for epoch in 0..train.epochs {
        let order = epoch_order(index.len(), order_seed, epoch);
        for chunk in order.chunks(train.batch_size.max(1)) {
            let mut by_task: std::collections::BTreeMap<usize, Vec<usize>> =
                std::collections::BTreeMap::new();
            for &i in chunk {
                let (t, row) = index[i];
                by_task.entry(t).or_default().push(row);
            }
            let groups: Vec<(Array2<T>, Vec<usize>, (usize, usize))> = by_task
                .into_iter()
                .map(|(t, rows)| {
                    (
                        tasks[t].train_features.select(Axis(0), &rows),
                        rows.iter().map(|&i| tasks[t].train_labels[i]).collect(),
                        net.task_ranges[t],
                    )
                })
                .collect();
            let (_, grads) = masked_ce_grads(&net, &groups);
            adam_update(&mut adam, &mut net, &grads);
        }
    }

    let mut matrix = AccuracyMatrix::new(tasks.len());
    for i in 0..tasks.len() {
        let acc = net.accuracy(&tasks[i].test_features, &tasks[i].test_labels, i);
        for j in i..tasks.len() {
            matrix.set(i, j, acc);
        }
    }
    Ok(matrix)
}
