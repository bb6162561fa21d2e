//! Frozen convolutional feature extractor.
//!
//! Two 5x5 convolutions (3 -> 8 -> 16 channels, same padding), each followed
//! by a rectifier and 2x2 max pooling; the flattened 16x16x16 map is the
//! 4096-dimensional feature vector. Weights are fixed for the life of an
//! episode: either random from a seed, or pretrained on the stream's
//! pretraining split with a throwaway classifier head and then frozen.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{epoch_order, softmax, Adam, MlpParams, TrainConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::scenegen::{Raster, CANVAS};

pub const KERNEL: usize = 5;
pub const CONV1_OUT: usize = 8;
pub const CONV2_OUT: usize = 16;
/// 16 channels over a 16x16 pooled map.
pub const FEATURE_DIM: usize = CONV2_OUT * 16 * 16;

const PAD: usize = KERNEL / 2;
const SIDE1: usize = CANVAS as usize; // conv1 spatial side
const SIDE2: usize = SIDE1 / 2; // after first pool
const SIDE3: usize = SIDE2 / 2; // after second pool

/// How the extractor weights were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorMode {
    RandomFrozen,
    Pretrained,
}

/// Frozen two-layer convolutional feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub mode: ExtractorMode,
    /// conv1 weights, [CONV1_OUT, 3 * KERNEL * KERNEL].
    pub w1: Array2<f32>,
    pub b1: Array1<f32>,
    /// conv2 weights, [CONV2_OUT, CONV1_OUT * KERNEL * KERNEL].
    pub w2: Array2<f32>,
    pub b2: Array1<f32>,
}

fn conv_init(out_c: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> (Array2<f32>, Array1<f32>) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = Array2::from_shape_fn((out_c, fan_in), |_| rng.gen_range(-bound..bound) as f32);
    let b = Array1::from_shape_fn(out_c, |_| rng.gen_range(-bound..bound) as f32);
    (w, b)
}

/// Raster to a [3, H, W] channel-major float image in [0, 1].
fn raster_to_input(raster: &Raster) -> Result<Vec<f32>> {
    if raster.width != CANVAS || raster.height != CANVAS {
        return Err(Error::ShapeMismatch {
            context: format!("raster {}x{}, expected {CANVAS}x{CANVAS}", raster.width, raster.height),
        });
    }
    let hw = SIDE1 * SIDE1;
    let mut input = vec![0f32; 3 * hw];
    for y in 0..SIDE1 {
        for x in 0..SIDE1 {
            let [r, g, b] = raster.get(x as u32, y as u32);
            input[y * SIDE1 + x] = f32::from(r) / 255.0;
            input[hw + y * SIDE1 + x] = f32::from(g) / 255.0;
            input[2 * hw + y * SIDE1 + x] = f32::from(b) / 255.0;
        }
    }
    Ok(input)
}

/// im2col for same-padded 5x5 convolution: rows are output pixels, columns
/// are (channel, ky, kx).
fn im2col(input: &[f32], channels: usize, side: usize) -> Array2<f32> {
    let mut col = Array2::<f32>::zeros((side * side, channels * KERNEL * KERNEL));
    for y in 0..side {
        for x in 0..side {
            let row = y * side + x;
            let mut c_idx = 0;
            for c in 0..channels {
                let plane = &input[c * side * side..(c + 1) * side * side];
                for ky in 0..KERNEL {
                    let sy = y as isize + ky as isize - PAD as isize;
                    for kx in 0..KERNEL {
                        let sx = x as isize + kx as isize - PAD as isize;
                        if sy >= 0 && sy < side as isize && sx >= 0 && sx < side as isize {
                            col[(row, c_idx)] = plane[sy as usize * side + sx as usize];
                        }
                        c_idx += 1;
                    }
                }
            }
        }
    }
    col
}

/// Scatter a column-gradient back to the padded input (transpose of im2col).
fn col2im(dcol: &Array2<f32>, channels: usize, side: usize) -> Vec<f32> {
    let mut dinput = vec![0f32; channels * side * side];
    for y in 0..side {
        for x in 0..side {
            let row = y * side + x;
            let mut c_idx = 0;
            for c in 0..channels {
                for ky in 0..KERNEL {
                    let sy = y as isize + ky as isize - PAD as isize;
                    for kx in 0..KERNEL {
                        let sx = x as isize + kx as isize - PAD as isize;
                        if sy >= 0 && sy < side as isize && sx >= 0 && sx < side as isize {
                            dinput[c * side * side + sy as usize * side + sx as usize] +=
                                dcol[(row, c_idx)];
                        }
                        c_idx += 1;
                    }
                }
            }
        }
    }
    dinput
}

/// 2x2 max pooling over an activation laid out as [side*side, channels].
/// Returns the pooled map and the winning source row per (cell, channel).
fn maxpool(act: &Array2<f32>, side: usize) -> (Array2<f32>, Vec<u32>) {
    let channels = act.ncols();
    let out_side = side / 2;
    let mut pooled = Array2::<f32>::zeros((out_side * out_side, channels));
    let mut argmax = vec![0u32; out_side * out_side * channels];
    for oy in 0..out_side {
        for ox in 0..out_side {
            let out_row = oy * out_side + ox;
            for c in 0..channels {
                let mut best = f32::NEG_INFINITY;
                let mut best_row = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let row = (2 * oy + dy) * side + (2 * ox + dx);
                        let v = act[(row, c)];
                        if v > best {
                            best = v;
                            best_row = row;
                        }
                    }
                }
                pooled[(out_row, c)] = best;
                argmax[out_row * channels + c] = best_row as u32;
            }
        }
    }
    (pooled, argmax)
}

/// Everything the backward pass needs from one sample's forward pass.
struct ConvCache {
    col1: Array2<f32>,
    pre1: Array2<f32>,
    argmax1: Vec<u32>,
    col2: Array2<f32>,
    pre2: Array2<f32>,
    argmax2: Vec<u32>,
}

impl FeatureExtractor {
    /// Random frozen weights from a seed.
    pub fn random_frozen(seed: u64) -> FeatureExtractor {
        let mut r = rng::stream(seed, "extractor-init", &[]);
        let (w1, b1) = conv_init(CONV1_OUT, 3 * KERNEL * KERNEL, &mut r);
        let (w2, b2) = conv_init(CONV2_OUT, CONV1_OUT * KERNEL * KERNEL, &mut r);
        FeatureExtractor { mode: ExtractorMode::RandomFrozen, w1, b1, w2, b2 }
    }

    fn forward_sample(&self, raster: &Raster) -> Result<(Vec<f32>, ConvCache)> {
        let input = raster_to_input(raster)?;
        let col1 = im2col(&input, 3, SIDE1);
        let mut pre1 = col1.dot(&self.w1.t());
        pre1 += &self.b1;
        let act1 = pre1.mapv(|x| x.max(0.0));
        let (pool1, argmax1) = maxpool(&act1, SIDE1);

        let pool1_planes = to_planes(&pool1);
        let col2 = im2col(&pool1_planes, CONV1_OUT, SIDE2);
        let mut pre2 = col2.dot(&self.w2.t());
        pre2 += &self.b2;
        let act2 = pre2.mapv(|x| x.max(0.0));
        let (pool2, argmax2) = maxpool(&act2, SIDE2);

        let features = pool2.into_raw_vec_and_offset().0;
        Ok((features, ConvCache { col1, pre1, argmax1, col2, pre2, argmax2 }))
    }

    /// Features for one raster.
    pub fn extract_features(&self, raster: &Raster) -> Result<Vec<f32>> {
        Ok(self.forward_sample(raster)?.0)
    }

    /// Features for a batch of rasters as a [n, FEATURE_DIM] matrix.
    /// Parallel across samples; the result does not depend on thread order.
    pub fn extract_batch(&self, rasters: &[&Raster]) -> Result<Array2<f32>> {
        let rows: Vec<Vec<f32>> = rasters
            .par_iter()
            .map(|r| self.extract_features(r))
            .collect::<Result<_>>()?;
        let mut out = Array2::<f32>::zeros((rasters.len(), FEATURE_DIM));
        for (i, row) in rows.into_iter().enumerate() {
            out.row_mut(i).assign(&Array1::from_vec(row));
        }
        Ok(out)
    }

    /// Stable hash of the weights; constant across an episode by contract.
    pub fn weight_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for tensor in [&self.w1, &self.w2] {
            for v in tensor.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        for tensor in [&self.b1, &self.b2] {
            for v in tensor.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Jointly train conv layers and a throwaway classifier on the
    /// pretraining split with plain cross-entropy, then freeze.
    pub fn pretrain(
        samples: &[(&Raster, usize)],
        num_classes: usize,
        epochs: u32,
        seed: u64,
    ) -> Result<FeatureExtractor> {
        let mut extractor = FeatureExtractor::random_frozen(seed);
        let mut head: MlpParams<f32> =
            MlpParams::init(FEATURE_DIM, num_classes, &mut rng::stream(seed, "pretrain-head", &[]));
        let config = TrainConfig { epochs, lambda: 0.0, seed, ..TrainConfig::default() };
        let lens = vec![
            extractor.w1.len(),
            extractor.b1.len(),
            extractor.w2.len(),
            extractor.b2.len(),
            head.trunk_w.len(),
            head.trunk_b.len(),
            head.head_w.len(),
            head.head_b.len(),
        ];
        let mut adam = Adam::<f32>::new(&config, &lens);

        for epoch in 0..epochs {
            let order = epoch_order(samples.len(), seed, epoch);
            for chunk in order.chunks(config.batch_size) {
                let step = pretrain_step(&extractor, &head, samples, chunk)?;
                adam.update(
                    &mut [
                        extractor.w1.as_slice_mut().unwrap(),
                        extractor.b1.as_slice_mut().unwrap(),
                        extractor.w2.as_slice_mut().unwrap(),
                        extractor.b2.as_slice_mut().unwrap(),
                        head.trunk_w.as_slice_mut().unwrap(),
                        head.trunk_b.as_slice_mut().unwrap(),
                        head.head_w.as_slice_mut().unwrap(),
                        head.head_b.as_slice_mut().unwrap(),
                    ],
                    &[
                        step.dw1.as_slice().unwrap(),
                        step.db1.as_slice().unwrap(),
                        step.dw2.as_slice().unwrap(),
                        step.db2.as_slice().unwrap(),
                        step.dtrunk_w.as_slice().unwrap(),
                        step.dtrunk_b.as_slice().unwrap(),
                        step.dhead_w.as_slice().unwrap(),
                        step.dhead_b.as_slice().unwrap(),
                    ],
                );
            }
        }
        extractor.mode = ExtractorMode::Pretrained;
        Ok(extractor)
    }
}

/// [rows, channels] activation to channel-major planes.
fn to_planes(act: &Array2<f32>) -> Vec<f32> {
    let rows = act.nrows();
    let channels = act.ncols();
    let mut planes = vec![0f32; rows * channels];
    for r in 0..rows {
        for c in 0..channels {
            planes[c * rows + r] = act[(r, c)];
        }
    }
    planes
}

struct PretrainGrads {
    dw1: Array2<f32>,
    db1: Array1<f32>,
    dw2: Array2<f32>,
    db2: Array1<f32>,
    dtrunk_w: Array2<f32>,
    dtrunk_b: Array1<f32>,
    dhead_w: Array2<f32>,
    dhead_b: Array1<f32>,
}

/// Forward + backward over one pretraining minibatch (conv included).
fn pretrain_step(
    extractor: &FeatureExtractor,
    head: &MlpParams<f32>,
    samples: &[(&Raster, usize)],
    chunk: &[usize],
) -> Result<PretrainGrads> {
    let n = chunk.len();
    let nf = n as f32;

    // Forward conv per sample (parallel), keep caches.
    let forwards: Vec<(Vec<f32>, ConvCache)> = chunk
        .par_iter()
        .map(|&i| extractor.forward_sample(samples[i].0))
        .collect::<Result<_>>()?;

    let mut features = Array2::<f32>::zeros((n, FEATURE_DIM));
    for (row, (f, _)) in forwards.iter().enumerate() {
        features.row_mut(row).assign(&ndarray::ArrayView1::from(&f[..]));
    }

    // MLP head forward/backward on the batch.
    let pre = features.dot(&head.trunk_w.t()) + &head.trunk_b;
    let hidden = pre.mapv(|x| x.max(0.0));
    let logits = hidden.dot(&head.head_w.t()) + &head.head_b;
    let mut dlogits = softmax(&logits);
    for (row, &i) in chunk.iter().enumerate() {
        let label = samples[i].1;
        dlogits[(row, label)] -= 1.0;
    }
    dlogits.mapv_inplace(|x| x / nf);
    if dlogits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteLoss { step: 0, trace: Vec::new() });
    }

    let dhead_w = dlogits.t().dot(&hidden);
    let dhead_b = dlogits.sum_axis(Axis(0));
    let mut dhidden = dlogits.dot(&head.head_w);
    ndarray::Zip::from(&mut dhidden).and(&pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    let dtrunk_w = dhidden.t().dot(&features);
    let dtrunk_b = dhidden.sum_axis(Axis(0));
    let dfeatures = dhidden.dot(&head.trunk_w);

    // Conv backward per sample (parallel), sum weight grads.
    let per_sample: Vec<(Array2<f32>, Array1<f32>, Array2<f32>, Array1<f32>)> = (0..n)
        .into_par_iter()
        .map(|row| {
            let cache = &forwards[row].1;
            let dfeat = dfeatures.row(row);

            // Unpool 2 + relu 2.
            let mut dpre2 = Array2::<f32>::zeros((SIDE2 * SIDE2, CONV2_OUT));
            for out_row in 0..SIDE3 * SIDE3 {
                for c in 0..CONV2_OUT {
                    let src = cache.argmax2[out_row * CONV2_OUT + c] as usize;
                    dpre2[(src, c)] += dfeat[out_row * CONV2_OUT + c];
                }
            }
            ndarray::Zip::from(&mut dpre2).and(&cache.pre2).for_each(|g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });

            let dw2 = dpre2.t().dot(&cache.col2);
            let db2 = dpre2.sum_axis(Axis(0));

            // Into pool1 output, unpool 1, relu 1.
            let dcol2 = dpre2.dot(&extractor.w2);
            let dpool1_planes = col2im(&dcol2, CONV1_OUT, SIDE2);
            let mut dpre1 = Array2::<f32>::zeros((SIDE1 * SIDE1, CONV1_OUT));
            for out_row in 0..SIDE2 * SIDE2 {
                for c in 0..CONV1_OUT {
                    let src = cache.argmax1[out_row * CONV1_OUT + c] as usize;
                    dpre1[(src, c)] += dpool1_planes[c * SIDE2 * SIDE2 + out_row];
                }
            }
            ndarray::Zip::from(&mut dpre1).and(&cache.pre1).for_each(|g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
            let dw1 = dpre1.t().dot(&cache.col1);
            let db1 = dpre1.sum_axis(Axis(0));
            (dw1, db1, dw2, db2)
        })
        .collect();

    let mut dw1 = Array2::<f32>::zeros((CONV1_OUT, 3 * KERNEL * KERNEL));
    let mut db1 = Array1::<f32>::zeros(CONV1_OUT);
    let mut dw2 = Array2::<f32>::zeros((CONV2_OUT, CONV1_OUT * KERNEL * KERNEL));
    let mut db2 = Array1::<f32>::zeros(CONV2_OUT);
    for (a, b, c, d) in per_sample {
        dw1 += &a;
        db1 += &b;
        dw2 += &c;
        db2 += &d;
    }

    Ok(PretrainGrads { dw1, db1, dw2, db2, dtrunk_w, dtrunk_b, dhead_w, dhead_b })
}

/// Convenience PNG-independent check used in tests and the self test.
pub fn feature_dim_matches_canvas() -> bool {
    SIDE3 * SIDE3 * CONV2_OUT == FEATURE_DIM
}
