//! End-to-end continual episodes.
//!
//! One episode: build the stream, fix the feature extractor, decompose and
//! featurize every sample once, then run the configured method over the task
//! sequence, filling the accuracy matrix. The hybrid method trains the neural
//! reasoner on the newest task (after a head reset) and answers the newest
//! task with it, while every earlier task is answered by the symbolic
//! reasoner over the knowledge base, masked to that task's classes.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{metrics, AccuracyMatrix, DecompMode, EpisodeConfig, EpisodeMetrics, Method};
use crate::baselines::{self, TaskSplit};
use crate::decompose::{build_graph, detect_objects, oracle_detect, ConceptGraph};
use crate::error::{Error, Result};
use crate::neural::{
    forward, summarize_attributes, train_task, ExtractorMode, FeatureExtractor, MlpParams,
    TaskTensors, TrainConfig, ATTR_DIM, FEATURE_DIM,
};
use crate::rng;
use crate::scenegen::{build_task_stream, Sample, TaskStream};
use crate::symbolic::{classify_masked, kb_update, KnowledgeBase, MAX_GED_NODES};

/// Per-task featurized data and graphs shared by every seed of an episode.
pub struct EpisodeTaskData {
    pub class_ids: Vec<u32>,
    pub train: TaskTensors<f32>,
    pub test_features: Array2<f32>,
    pub test_labels_local: Vec<usize>,
    pub train_graphs: Vec<(u32, ConceptGraph)>,
    pub test_graphs: Vec<ConceptGraph>,
}

/// Everything derived from the stream that seeds can share read-only.
pub struct EpisodeData {
    pub tasks: Vec<EpisodeTaskData>,
    pub splits: Option<Vec<TaskSplit<f32>>>,
}

/// Wall-clock accounting for one seed's run, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TimingReport {
    pub train_neural_s: f64,
    pub train_symbolic_s: f64,
    /// Feature extraction + perceptron forward, one sample at a time.
    pub neural_infer_per_sample_s: f64,
    /// Perceptron forward alone on precomputed features.
    pub neural_forward_per_sample_s: f64,
    /// Raster/scene to concept graph.
    pub decompose_per_sample_s: f64,
    /// Similarity softmax against the knowledge base (task-masked).
    pub symbolic_classify_per_sample_s: f64,
    /// Decomposition + classification, the full symbolic path.
    pub symbolic_infer_per_sample_s: f64,
    pub timed_samples: usize,
}

/// One seed's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    pub metrics: EpisodeMetrics,
    pub timing: Option<TimingReport>,
    pub wall_s: f64,
}

/// All seeds of one config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub config_hash: String,
    pub per_seed: Vec<SeedResult>,
}

/// Graph for one sample under the configured decomposition mode. Classical
/// detections are capped to the largest `MAX_GED_NODES` components so the
/// exact edit distance stays applicable.
pub fn parse_graph(mode: DecompMode, sample: &Sample) -> ConceptGraph {
    let mut detections = match mode {
        DecompMode::Oracle => oracle_detect(&sample.scene),
        DecompMode::Classical => detect_objects(&sample.raster),
    };
    if detections.len() > MAX_GED_NODES {
        detections.sort_by(|a, b| {
            let area = |d: &crate::decompose::Detection| {
                (d.bbox.2 - d.bbox.0) * (d.bbox.3 - d.bbox.1)
            };
            area(b).partial_cmp(&area(a)).unwrap()
        });
        detections.truncate(MAX_GED_NODES);
    }
    build_graph(&detections)
}

/// Build or pretrain the frozen feature extractor for this config.
pub fn prepare_extractor(
    config: &EpisodeConfig,
    stream: &TaskStream,
) -> Result<FeatureExtractor> {
    match config.extractor {
        ExtractorMode::RandomFrozen => {
            Ok(FeatureExtractor::random_frozen(config.stream.master_seed))
        }
        ExtractorMode::Pretrained => {
            if stream.pretrain.is_empty() {
                return Err(Error::InvalidConfig(
                    "pretrained extractor requires a non-empty pretraining split".into(),
                ));
            }
            let base = config.stream.num_continual_classes();
            let samples: Vec<(&crate::scenegen::Raster, usize)> = stream
                .pretrain
                .iter()
                .map(|s| (&s.raster, (s.label - base) as usize))
                .collect();
            FeatureExtractor::pretrain(
                &samples,
                config.stream.pretrain_classes as usize,
                config.pretrain_epochs,
                config.stream.master_seed,
            )
        }
    }
}

fn featurize(
    extractor: &FeatureExtractor,
    samples: &[Sample],
) -> Result<Array2<f32>> {
    let rasters: Vec<&crate::scenegen::Raster> = samples.iter().map(|s| &s.raster).collect();
    extractor.extract_batch(&rasters)
}

/// Decompose and featurize the whole stream once.
pub fn prepare_episode_data(
    config: &EpisodeConfig,
    stream: &TaskStream,
    extractor: &FeatureExtractor,
) -> Result<EpisodeData> {
    let mut tasks = Vec::with_capacity(stream.tasks.len());
    for task in &stream.tasks {
        let class_ids = task.class_ids.clone();
        let lookup = class_ids.clone();
        let local = move |label: u32| -> usize {
            lookup.iter().position(|&c| c == label).expect("label in task")
        };

        let train_graphs: Vec<(u32, ConceptGraph)> = task
            .train
            .par_iter()
            .map(|s| (s.label, parse_graph(config.decomp, s)))
            .collect();
        let test_graphs: Vec<ConceptGraph> =
            task.test.par_iter().map(|s| parse_graph(config.decomp, s)).collect();

        let train_features = featurize(extractor, &task.train)?;
        let test_features = featurize(extractor, &task.test)?;

        let mut attr_targets = Array2::<f32>::zeros((task.train.len(), ATTR_DIM));
        for (i, (_, graph)) in train_graphs.iter().enumerate() {
            let target = summarize_attributes(graph).target::<f32>();
            for (j, v) in target.iter().enumerate() {
                attr_targets[(i, j)] = *v;
            }
        }

        let train = TaskTensors {
            features: train_features,
            labels: task.train.iter().map(|s| local(s.label)).collect(),
            attr_targets,
        };
        tasks.push(EpisodeTaskData {
            class_ids,
            train,
            test_features,
            test_labels_local: task.test.iter().map(|s| local(s.label)).collect(),
            train_graphs,
            test_graphs,
        });
    }

    let splits = if config.method.uses_decomposition() {
        None
    } else {
        Some(
            tasks
                .iter()
                .map(|t| TaskSplit {
                    train_features: t.train.features.clone(),
                    train_labels: t.train.labels.clone(),
                    test_features: t.test_features.clone(),
                    test_labels: t.test_labels_local.clone(),
                    class_count: t.class_ids.len(),
                })
                .collect(),
        )
    };

    Ok(EpisodeData { tasks, splits })
}

fn symbolic_task_accuracy(
    kb: &KnowledgeBase,
    task: &EpisodeTaskData,
    costs: &crate::symbolic::GedCosts,
) -> Result<f64> {
    let predictions: Vec<u32> = task
        .test_graphs
        .par_iter()
        .map(|g| classify_masked(kb, g, costs, &task.class_ids).map(|d| d.argmax()))
        .collect::<Result<_>>()?;
    let hits = predictions
        .iter()
        .zip(&task.test_labels_local)
        .filter(|(&p, &l)| p == task.class_ids[l])
        .count();
    Ok(hits as f64 / task.test_labels_local.len().max(1) as f64)
}

fn neural_accuracy(
    params: &MlpParams<f32>,
    features: &Array2<f32>,
    labels_local: &[usize],
) -> Result<f64> {
    let (logits, _) = forward(params, features)?;
    let hits = logits
        .rows()
        .into_iter()
        .zip(labels_local)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best == label
        })
        .count();
    Ok(hits as f64 / labels_local.len().max(1) as f64)
}

fn nesybicl_seed(
    config: &EpisodeConfig,
    stream: &TaskStream,
    extractor: &FeatureExtractor,
    data: &EpisodeData,
    seed: u64,
    with_neural: bool,
) -> Result<(AccuracyMatrix, Option<TimingReport>)> {
    let t_count = data.tasks.len();
    let costs = &config.ged_costs;
    let mut matrix = AccuracyMatrix::new(t_count);
    let mut kb = KnowledgeBase::new();
    let mut timing = TimingReport::default();
    let mut final_params: Option<MlpParams<f32>> = None;

    for (t, task) in data.tasks.iter().enumerate() {
        let clock = Instant::now();
        let mut task_graphs: BTreeMap<u32, Vec<ConceptGraph>> = BTreeMap::new();
        for (label, graph) in &task.train_graphs {
            task_graphs.entry(*label).or_default().push(graph.clone());
        }
        kb = kb_update(&kb, &task_graphs, costs)?;
        timing.train_symbolic_s += clock.elapsed().as_secs_f64();

        if with_neural {
            let clock = Instant::now();
            let mut reset_rng = rng::stream(seed, "hybrid-reset", &[t as u64]);
            let params =
                MlpParams::<f32>::init(FEATURE_DIM, task.class_ids.len(), &mut reset_rng);
            let shuffle_seed: u64 = rng::stream(seed, "hybrid-shuffle", &[t as u64]).gen();
            let task_train = TrainConfig { seed: shuffle_seed, ..config.train.clone() };
            let (params, _trace) = train_task(params, &task.train, &task_train)?;
            timing.train_neural_s += clock.elapsed().as_secs_f64();
            final_params = Some(params);
        }

        for i in 0..=t {
            let acc = if i == t && with_neural {
                let params = final_params.as_ref().expect("trained this task");
                neural_accuracy(params, &data.tasks[i].test_features, &data.tasks[i].test_labels_local)?
            } else {
                symbolic_task_accuracy(&kb, &data.tasks[i], costs)?
            };
            matrix.set(i, t, acc);
        }
    }

    let timing = if with_neural {
        let last = t_count - 1;
        let samples = &stream.tasks[last].test;
        let timed: Vec<&Sample> = samples.iter().take(200).collect();
        let n = timed.len().max(1);
        let params = final_params.as_ref().expect("episode trained");

        let clock = Instant::now();
        let mut graphs = Vec::with_capacity(n);
        for s in &timed {
            graphs.push(parse_graph(config.decomp, s));
        }
        timing.decompose_per_sample_s = clock.elapsed().as_secs_f64() / n as f64;

        let clock = Instant::now();
        for g in &graphs {
            let _ = classify_masked(&kb, g, costs, &data.tasks[last].class_ids)?;
        }
        timing.symbolic_classify_per_sample_s = clock.elapsed().as_secs_f64() / n as f64;
        timing.symbolic_infer_per_sample_s =
            timing.decompose_per_sample_s + timing.symbolic_classify_per_sample_s;

        let clock = Instant::now();
        let mut feature_rows = Vec::with_capacity(n);
        for s in &timed {
            feature_rows.push(extractor.extract_features(&s.raster)?);
        }
        let extract_s = clock.elapsed().as_secs_f64() / n as f64;

        let clock = Instant::now();
        for row in &feature_rows {
            let features =
                Array2::from_shape_vec((1, FEATURE_DIM), row.clone()).expect("feature row");
            let _ = forward(params, &features)?;
        }
        timing.neural_forward_per_sample_s = clock.elapsed().as_secs_f64() / n as f64;
        timing.neural_infer_per_sample_s = extract_s + timing.neural_forward_per_sample_s;
        timing.timed_samples = n;
        Some(timing)
    } else {
        None
    };

    Ok((matrix, timing))
}

/// Run one seed of the configured method over prepared episode data.
pub fn run_seed(
    config: &EpisodeConfig,
    stream: &TaskStream,
    extractor: &FeatureExtractor,
    data: &EpisodeData,
    seed: u64,
) -> Result<SeedResult> {
    let clock = Instant::now();
    let (matrix, timing) = match config.method {
        Method::Symbolic => nesybicl_seed(config, stream, extractor, data, seed, false)?,
        Method::Nesybicl => nesybicl_seed(config, stream, extractor, data, seed, true)?,
        baseline => {
            let splits = data.splits.as_ref().ok_or_else(|| {
                Error::InvalidConfig("baseline method without prepared splits".into())
            })?;
            let train = TrainConfig { seed, lambda: 0.0, ..config.train.clone() };
            let matrix = match baseline {
                Method::Finetune => baselines::train_finetune(splits, &train)?,
                Method::Multitask => baselines::train_multitask(splits, &train)?,
                Method::Er => baselines::train_er(splits, &train, &config.baseline)?,
                Method::Ewc => baselines::train_ewc(splits, &train, &config.baseline)?,
                Method::Si => baselines::train_si(splits, &train, &config.baseline)?,
                Method::Lwf => baselines::train_lwf(splits, &train, &config.baseline)?,
                Method::Gem => baselines::train_gem(splits, &train, &config.baseline)?,
                Method::Symbolic | Method::Nesybicl => unreachable!(),
            };
            (matrix, None)
        }
    };
    let metrics = metrics(&matrix)?;
    Ok(SeedResult { seed, matrix, metrics, timing, wall_s: clock.elapsed().as_secs_f64() })
}

/// Run every seed of an episode config.
pub fn run_episode(config: &EpisodeConfig) -> Result<EpisodeResult> {
    config.validate()?;
    let stream = build_task_stream(&config.stream)?;
    let extractor = prepare_extractor(config, &stream)?;
    let data = prepare_episode_data(config, &stream, &extractor)?;
    let seeds: Vec<u64> =
        (0..config.seeds).map(|k| config.train.seed.wrapping_add(u64::from(k))).collect();
    let per_seed: Result<Vec<SeedResult>> = seeds
        .par_iter()
        .map(|&s| run_seed(config, &stream, &extractor, &data, s))
        .collect();
    Ok(EpisodeResult { config_hash: config.hash(), per_seed: per_seed? })
}
