//! Episode orchestration: configurations, accuracy matrices, metrics, run
//! and sweep drivers, and result persistence.

mod episode;
pub mod io;
mod sweep;

pub use episode::{
    prepare_episode_data, prepare_extractor, run_episode, run_seed, EpisodeData, EpisodeResult,
    SeedResult, TimingReport,
};
pub use sweep::{sweep, sweep_csv, SweepKind, SweepPoint};

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineConfig;
use crate::error::{Error, Result};
use crate::neural::{ExtractorMode, TrainConfig};
use crate::scenegen::StreamConfig;
use crate::symbolic::GedCosts;

/// Lower-triangular record of accuracies: entry (i, j) is the accuracy on
/// task i's test set after learning task j, defined for i <= j.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub size: usize,
    /// Row-major size x size cells; entries with i > j stay unused.
    pub cells: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(size: usize) -> AccuracyMatrix {
        AccuracyMatrix { size, cells: vec![None; size * size] }
    }

    pub fn set(&mut self, task: usize, after_task: usize, accuracy: f64) {
        assert!(task <= after_task && after_task < self.size);
        assert!((0.0..=1.0).contains(&accuracy), "accuracy out of range: {accuracy}");
        self.cells[task * self.size + after_task] = Some(accuracy);
    }

    pub fn get(&self, task: usize, after_task: usize) -> Option<f64> {
        self.cells[task * self.size + after_task]
    }

    fn require(&self, task: usize, after_task: usize) -> Result<f64> {
        self.get(task, after_task).ok_or(Error::IncompleteMatrix { task, after_task })
    }

    /// CSV form with the stable header `task,after_task,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,after_task,accuracy\n");
        for i in 0..self.size {
            for j in i..self.size {
                if let Some(v) = self.get(i, j) {
                    out.push_str(&format!("{i},{j},{v:.10}\n"));
                }
            }
        }
        out
    }
}

/// Episode metrics in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Mean accuracy over all tasks at the end of the episode.
    pub a_all: f64,
    /// Mean accuracy on each task immediately after learning it.
    pub a_last: f64,
}

/// `A_all = 100 * mean_i R[i][T-1]`, `A_last = 100 * mean_i R[i][i]`.
pub fn metrics(matrix: &AccuracyMatrix) -> Result<EpisodeMetrics> {
    let t = matrix.size;
    if t == 0 {
        return Err(Error::IncompleteMatrix { task: 0, after_task: 0 });
    }
    let mut a_all = 0.0;
    let mut a_last = 0.0;
    for i in 0..t {
        a_all += matrix.require(i, t - 1)?;
        a_last += matrix.require(i, i)?;
    }
    Ok(EpisodeMetrics { a_all: 100.0 * a_all / t as f64, a_last: 100.0 * a_last / t as f64 })
}

/// Aggregate of one method's runs across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Method,
    pub config_hash: String,
    pub per_seed: Vec<SeedMetrics>,
    pub a_all_mean: f64,
    pub a_all_std: f64,
    pub a_last_mean: f64,
    pub a_last_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub a_all: f64,
    pub a_last: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn from_seeds(method: Method, config_hash: String, per_seed: Vec<SeedMetrics>) -> Self {
        let a_all: Vec<f64> = per_seed.iter().map(|s| s.a_all).collect();
        let a_last: Vec<f64> = per_seed.iter().map(|s| s.a_last).collect();
        let (a_all_mean, a_all_std) = mean_std(&a_all);
        let (a_last_mean, a_last_std) = mean_std(&a_last);
        MetricsReport { method, config_hash, per_seed, a_all_mean, a_all_std, a_last_mean, a_last_std }
    }
}

/// The learner under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Nesybicl,
    Symbolic,
    Finetune,
    Multitask,
    Er,
    Ewc,
    Si,
    Lwf,
    Gem,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Nesybicl,
        Method::Symbolic,
        Method::Finetune,
        Method::Multitask,
        Method::Er,
        Method::Ewc,
        Method::Si,
        Method::Lwf,
        Method::Gem,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Nesybicl => "nesybicl",
            Method::Symbolic => "symbolic",
            Method::Finetune => "finetune",
            Method::Multitask => "multitask",
            Method::Er => "er",
            Method::Ewc => "ewc",
            Method::Si => "si",
            Method::Lwf => "lwf",
            Method::Gem => "gem",
        }
    }

    pub fn uses_decomposition(self) -> bool {
        matches!(self, Method::Nesybicl | Method::Symbolic)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method '{s}'")))
    }
}

/// How concept graphs are obtained from samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecompMode {
    /// Ground-truth scene metadata.
    Oracle,
    /// Palette segmentation + contour shape classification on the raster.
    Classical,
}

impl std::str::FromStr for DecompMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<DecompMode> {
        match s {
            "oracle" => Ok(DecompMode::Oracle),
            "classical" => Ok(DecompMode::Classical),
            other => Err(Error::InvalidConfig(format!("unknown decomposition mode '{other}'"))),
        }
    }
}

/// Full description of one episode run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub method: Method,
    pub decomp: DecompMode,
    pub stream: StreamConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub ged_costs: GedCosts,
    pub extractor: ExtractorMode,
    /// Epochs for the joint conv+classifier pretraining pass.
    pub pretrain_epochs: u32,
    /// Number of repeated runs; run k uses seed `train.seed + k`.
    pub seeds: u32,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            method: Method::Symbolic,
            decomp: DecompMode::Oracle,
            stream: StreamConfig::default(),
            train: TrainConfig::default(),
            baseline: BaselineConfig::default(),
            ged_costs: GedCosts::default(),
            extractor: ExtractorMode::Pretrained,
            pretrain_epochs: 50,
            seeds: 4,
        }
    }
}

impl EpisodeConfig {
    /// The desk-scale layout used by the acceptance runs: 5 tasks of 5
    /// classes, 100 train / 20 test per class, 2 px jitter, oracle
    /// decomposition, 4 seeds.
    pub fn desk_scale(method: Method) -> EpisodeConfig {
        EpisodeConfig {
            method,
            stream: StreamConfig {
                num_tasks: 5,
                classes_per_task: 5,
                train_per_class: 100,
                test_per_class: 20,
                noise_scale: 2.0,
                master_seed: 2024,
                pretrain_classes: 50,
            },
            extractor: ExtractorMode::RandomFrozen,
            ..EpisodeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        if self.seeds < 1 {
            return Err(Error::InvalidConfig("seeds must be >= 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Short stable hash of the canonical JSON form; names run directories.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..6])
    }
}
