use super::*;
use crate::rng;
use crate::scenegen::{ColorKind, ShapeKind};
use ndarray::Array2;

fn tiny_params(feature_dim: usize, classes: usize, seed: u64) -> MlpParams<f64> {
    MlpParams::init(feature_dim, classes, &mut rng::stream(seed, "test-params", &[]))
}

fn tiny_batch(feature_dim: usize, classes: usize, n: usize, seed: u64) -> Batch<f64> {
    use rand::Rng;
    let mut r = rng::stream(seed, "test-batch", &[]);
    let features = Array2::from_shape_fn((n, feature_dim), |_| r.gen_range(-1.0..1.0));
    let labels = (0..n).map(|i| i % classes).collect();
    let attr_targets = Array2::from_shape_fn((n, ATTR_DIM), |_| f64::from(r.gen_range(0..3u32)));
    Batch { features, labels, attr_targets }
}

#[test]
fn summarize_counts_nodes() {
    use crate::decompose::{build_graph, Detection};
    let empty = build_graph(&[]);
    let s = summarize_attributes(&empty);
    assert_eq!(s.shape_counts, [0; 4]);
    assert_eq!(s.color_counts, [0; 7]);

    let detections = vec![
        Detection {
            bbox: (0.0, 0.0, 1.0, 1.0),
            shape: ShapeKind::Circle,
            color: ColorKind::Blue,
            centroid: (5.0, 5.0),
        },
        Detection {
            bbox: (0.0, 0.0, 1.0, 1.0),
            shape: ShapeKind::Circle,
            color: ColorKind::Red,
            centroid: (25.0, 5.0),
        },
    ];
    let s = summarize_attributes(&build_graph(&detections));
    assert_eq!(s.shape_counts[ShapeKind::Circle.code() as usize], 2);
    assert_eq!(s.color_counts[ColorKind::Blue.code() as usize], 1);
    assert_eq!(s.color_counts[ColorKind::Red.code() as usize], 1);
    assert_eq!(s.shape_counts.iter().sum::<u32>(), 2);
    assert_eq!(s.color_counts.iter().sum::<u32>(), 2);
}

#[test]
fn forward_shapes_and_zero_params_give_uniform_softmax() {
    let mut params = tiny_params(6, 4, 1);
    for tensor in [&mut params.trunk_w, &mut params.head_w, &mut params.integ_w] {
        tensor.fill(0.0);
    }
    params.trunk_b.fill(0.0);
    params.head_b.fill(0.0);
    params.integ_b.fill(0.0);
    let features = Array2::from_elem((3, 6), 0.7);
    let (logits, attr) = forward(&params, &features).unwrap();
    assert_eq!(logits.shape(), &[3, 4]);
    assert_eq!(attr.shape(), &[3, ATTR_DIM]);
    assert!(logits.iter().all(|&x| x == 0.0));
    let probs = softmax(&logits);
    for row in probs.rows() {
        for &p in row {
            assert!((p - 0.25).abs() < 1e-12);
        }
        assert!((row.sum() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn forward_rows_are_independent_and_head_rows_local() {
    let params = tiny_params(6, 4, 2);
    let batch = tiny_batch(6, 4, 5, 3);
    let (logits, _) = forward(&params, &batch.features).unwrap();
    // Row independence: forward of a single row equals the batch row.
    for i in 0..5 {
        let single = batch.features.select(ndarray::Axis(0), &[i]);
        let (row_logits, _) = forward(&params, &single).unwrap();
        assert_eq!(row_logits.row(0), logits.row(i));
    }
    // Perturbing head row k changes only logit k.
    let mut perturbed = params.clone();
    perturbed.head_w.row_mut(2).mapv_inplace(|x| x + 0.5);
    let (logits2, _) = forward(&perturbed, &batch.features).unwrap();
    for i in 0..5 {
        for k in 0..4 {
            if k == 2 {
                assert_ne!(logits2[(i, k)], logits[(i, k)]);
            } else {
                assert_eq!(logits2[(i, k)], logits[(i, k)]);
            }
        }
    }
}

#[test]
fn shape_mismatch_is_reported() {
    let params = tiny_params(6, 4, 1);
    let features = Array2::<f64>::zeros((2, 7));
    assert!(matches!(forward(&params, &features), Err(crate::Error::ShapeMismatch { .. })));
}

#[test]
fn loss_at_lambda_zero_is_plain_cross_entropy() {
    let params = tiny_params(6, 3, 4);
    let batch = tiny_batch(6, 3, 8, 5);
    let (value, _) = loss(&params, &batch, 0.0).unwrap();
    let (logits, _) = forward(&params, &batch.features).unwrap();
    let mut expected = 0.0;
    for (i, &label) in batch.labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
        expected += lse - row[label];
    }
    expected /= batch.labels.len() as f64;
    assert!((value - expected).abs() < 1e-12);
}

#[test]
fn confident_correct_predictions_drive_loss_to_zero() {
    let mut params = tiny_params(4, 2, 6);
    params.trunk_w.fill(0.0);
    params.trunk_b.fill(0.0);
    // Hidden is the bias; make it one-hot-ish huge logits by hand.
    params.trunk_b[0] = 1.0;
    params.head_w.fill(0.0);
    params.head_w[(0, 0)] = 60.0;
    params.head_w[(1, 0)] = -60.0;
    params.head_b.fill(0.0);
    params.integ_w.fill(0.0);
    params.integ_b.fill(0.0);
    let features = Array2::from_elem((1, 4), 0.0);
    let attr_targets = Array2::from_elem((1, ATTR_DIM), 0.0);
    let batch = Batch { features, labels: vec![0], attr_targets };
    let (value, _) = loss(&params, &batch, 1.5).unwrap();
    assert!(value.abs() < 1e-9, "loss {value}");
}

fn param_group_slices<'a>(p: &'a mut MlpParams<f64>) -> Vec<(&'static str, &'a mut [f64])> {
    vec![
        ("trunk_w", p.trunk_w.as_slice_mut().unwrap()),
        ("trunk_b", p.trunk_b.as_slice_mut().unwrap()),
        ("head_w", p.head_w.as_slice_mut().unwrap()),
        ("head_b", p.head_b.as_slice_mut().unwrap()),
        ("integ_w", p.integ_w.as_slice_mut().unwrap()),
        ("integ_b", p.integ_b.as_slice_mut().unwrap()),
    ]
}

/// Central finite differences against the analytic gradient, every parameter
/// group, both loss weights.
#[test]
fn gradients_match_finite_differences() {
    let feature_dim = 7;
    let classes = 3;
    let batch = tiny_batch(feature_dim, classes, 6, 11);
    for lambda in [0.0, 1.5] {
        let params = tiny_params(feature_dim, classes, 12);
        let (_, grads) = loss(&params, &batch, lambda).unwrap();
        let analytic: Vec<(&str, Vec<f64>)> = vec![
            ("trunk_w", grads.trunk_w.iter().copied().collect()),
            ("trunk_b", grads.trunk_b.to_vec()),
            ("head_w", grads.head_w.iter().copied().collect()),
            ("head_b", grads.head_b.to_vec()),
            ("integ_w", grads.integ_w.iter().copied().collect()),
            ("integ_b", grads.integ_b.to_vec()),
        ];
        let step = 1e-4;
        for (gi, (name, grad)) in analytic.iter().enumerate() {
            for idx in 0..grad.len() {
                let mut plus = params.clone();
                param_group_slices(&mut plus)[gi].1[idx] += step;
                let mut minus = params.clone();
                param_group_slices(&mut minus)[gi].1[idx] -= step;
                let (lp, _) = loss(&plus, &batch, lambda).unwrap();
                let (lm, _) = loss(&minus, &batch, lambda).unwrap();
                let fd = (lp - lm) / (2.0 * step);
                let a = grad[idx];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    rel < 1e-4,
                    "{name}[{idx}] lambda={lambda}: analytic {a} vs fd {fd} (rel {rel})"
                );
            }
        }
    }
}

/// With lambda = 0 the integration branch contributes exactly zero gradient,
/// so the trunk and classification head trajectories are identical to a
/// model trained with cross-entropy alone, and the integration head never
/// moves.
#[test]
fn lambda_zero_training_matches_cross_entropy_only_model() {
    let feature_dim = 9;
    let classes = 3;
    let n = 24;
    let mut data_rng = rng::stream(31, "lz-data", &[]);
    use rand::Rng;
    let features = Array2::from_shape_fn((n, feature_dim), |_| data_rng.gen_range(-1.0..1.0));
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let attr_targets =
        Array2::from_shape_fn((n, ATTR_DIM), |_| f64::from(data_rng.gen_range(0..3u32)));
    let data = TaskTensors { features, labels, attr_targets };
    let config = TrainConfig { epochs: 5, batch_size: 8, lambda: 0.0, seed: 77, ..TrainConfig::default() };

    let init = tiny_params(feature_dim, classes, 13);
    let (trained, _) = train_task(init.clone(), &data, &config).unwrap();

    // Cross-entropy-only reference: same init, Adam, and batch order, but the
    // integration head does not exist.
    let mut reference = init.clone();
    let lens = vec![
        reference.trunk_w.len(),
        reference.trunk_b.len(),
        reference.head_w.len(),
        reference.head_b.len(),
    ];
    let mut adam = Adam::<f64>::new(&config, &lens);
    for epoch in 0..config.epochs {
        let order = epoch_order(data.len(), config.seed, epoch);
        for chunk in order.chunks(config.batch_size) {
            let batch = data.batch(chunk);
            let pre = batch.features.dot(&reference.trunk_w.t()) + &reference.trunk_b;
            let hidden = pre.mapv(|x: f64| x.max(0.0));
            let logits = hidden.dot(&reference.head_w.t()) + &reference.head_b;
            let mut dlogits = softmax(&logits);
            for (i, &label) in batch.labels.iter().enumerate() {
                dlogits[(i, label)] -= 1.0;
            }
            dlogits.mapv_inplace(|x| x / batch.labels.len() as f64);
            let dhead_w = dlogits.t().dot(&hidden);
            let dhead_b = dlogits.sum_axis(ndarray::Axis(0));
            let mut dhidden = dlogits.dot(&reference.head_w);
            ndarray::Zip::from(&mut dhidden).and(&pre).for_each(|g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
            let dtrunk_w = dhidden.t().dot(&batch.features);
            let dtrunk_b = dhidden.sum_axis(ndarray::Axis(0));
            adam.update(
                &mut [
                    reference.trunk_w.as_slice_mut().unwrap(),
                    reference.trunk_b.as_slice_mut().unwrap(),
                    reference.head_w.as_slice_mut().unwrap(),
                    reference.head_b.as_slice_mut().unwrap(),
                ],
                &[
                    dtrunk_w.as_slice().unwrap(),
                    dtrunk_b.as_slice().unwrap(),
                    dhead_w.as_slice().unwrap(),
                    dhead_b.as_slice().unwrap(),
                ],
            );
        }
    }

    assert_eq!(trained.trunk_w, reference.trunk_w);
    assert_eq!(trained.trunk_b, reference.trunk_b);
    assert_eq!(trained.head_w, reference.head_w);
    assert_eq!(trained.head_b, reference.head_b);
    assert_eq!(trained.integ_w, init.integ_w, "integration head must not move at lambda 0");
    assert_eq!(trained.integ_b, init.integ_b);
}

#[test]
fn zero_epochs_return_parameters_unchanged() {
    let params = tiny_params(5, 2, 9);
    let data = TaskTensors {
        features: Array2::zeros((4, 5)),
        labels: vec![0, 1, 0, 1],
        attr_targets: Array2::zeros((4, ATTR_DIM)),
    };
    let config = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let (out, trace) = train_task(params.clone(), &data, &config).unwrap();
    assert_eq!(out, params);
    assert!(trace.is_empty());
}

#[test]
fn loss_trace_is_non_increasing_on_a_separable_task() {
    let classes = 3;
    let feature_dim = 12;
    let n = 60;
    let mut r = rng::stream(41, "sep", &[]);
    use rand::Rng;
    let mut features = Array2::<f64>::zeros((n, feature_dim));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class);
        for j in 0..feature_dim {
            let base = if j % classes == class { 4.0 } else { 0.0 };
            features[(i, j)] = base + r.gen_range(-0.2..0.2);
        }
    }
    let data = TaskTensors {
        features,
        labels,
        attr_targets: Array2::zeros((n, ATTR_DIM)),
    };
    let config = TrainConfig { epochs: 40, batch_size: 10, lambda: 0.0, seed: 3, ..TrainConfig::default() };
    let (_, trace) = train_task(tiny_params(feature_dim, classes, 21), &data, &config).unwrap();
    for w in trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "trace increased: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn reset_heads_is_seeded_and_changes_outputs() {
    let params = tiny_params(6, 3, 2);
    let a = reset_heads(&params, &mut rng::stream(5, "reset", &[]));
    let b = reset_heads(&params, &mut rng::stream(5, "reset", &[]));
    assert_eq!(a, b);
    let features = tiny_batch(6, 3, 2, 8).features;
    let (before, _) = forward(&params, &features).unwrap();
    let (after, _) = forward(&a, &features).unwrap();
    assert_ne!(before, after);
}

#[test]
fn extractor_is_deterministic_and_local() {
    use crate::scenegen::{self, StreamConfig};
    let extractor = FeatureExtractor::random_frozen(7);
    let config = StreamConfig {
        num_tasks: 1,
        classes_per_task: 1,
        train_per_class: 1,
        test_per_class: 0,
        pretrain_classes: 0,
        master_seed: 3,
        ..StreamConfig::default()
    };
    let stream = scenegen::build_task_stream(&config).unwrap();
    let raster = &stream.tasks[0].train[0].raster;

    let f1 = extractor.extract_features(raster).unwrap();
    let f2 = extractor.extract_features(raster).unwrap();
    assert_eq!(f1, f2);
    assert_eq!(f1.len(), FEATURE_DIM);

    // Flat black raster: output depends only on biases; still deterministic.
    let black = crate::scenegen::Raster::filled(64, 64, [0, 0, 0]);
    let z1 = extractor.extract_features(&black).unwrap();
    let z2 = extractor.extract_features(&black).unwrap();
    assert_eq!(z1, z2);
    assert!(z1.iter().all(|v| v.is_finite()));

    // Single-pixel change only reaches features within its receptive field.
    let (px, py) = (33u32, 20u32);
    let mut changed = raster.clone();
    let idx = ((py * changed.width + px) * 3) as usize;
    changed.data[idx] = changed.data[idx].wrapping_add(128);
    let f3 = extractor.extract_features(&changed).unwrap();
    let y_lo = (f64::from(py) - 9.0) / 4.0;
    let y_hi = (f64::from(py) + 6.0) / 4.0;
    let x_lo = (f64::from(px) - 9.0) / 4.0;
    let x_hi = (f64::from(px) + 6.0) / 4.0;
    for (i, (a, b)) in f1.iter().zip(&f3).enumerate() {
        if a != b {
            let cell = i / CONV2_OUT;
            let (y3, x3) = ((cell / 16) as f64, (cell % 16) as f64);
            assert!(
                y3 >= y_lo.ceil() && y3 <= y_hi.floor() && x3 >= x_lo.ceil() && x3 <= x_hi.floor(),
                "feature {i} at cell ({y3},{x3}) outside receptive window"
            );
        }
    }

    // Wrong raster size is rejected.
    let small = crate::scenegen::Raster::filled(32, 32, [0, 0, 0]);
    assert!(matches!(
        extractor.extract_features(&small),
        Err(crate::Error::ShapeMismatch { .. })
    ));
}

#[test]
fn extractor_hash_is_stable() {
    let e = FeatureExtractor::random_frozen(9);
    let h1 = e.weight_hash();
    let h2 = e.weight_hash();
    assert_eq!(h1, h2);
    assert_ne!(h1, FeatureExtractor::random_frozen(10).weight_hash());
}
