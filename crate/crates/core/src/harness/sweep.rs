//! Parameter sweeps: one full episode (all seeds) per grid point.

use serde::{Deserialize, Serialize};

use super::{run_episode, EpisodeConfig, EpisodeResult};
use crate::error::{Error, Result};

/// Which configuration axis the grid varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Translational noise strength `u`.
    Uncertainty,
    /// Training samples per class.
    SamplesPerClass,
    /// Integration loss weight.
    Lambda,
    /// Number of tasks.
    LongEpisode,
}

impl std::str::FromStr for SweepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<SweepKind> {
        match s {
            "uncertainty" => Ok(SweepKind::Uncertainty),
            "samples_per_class" => Ok(SweepKind::SamplesPerClass),
            "lambda" => Ok(SweepKind::Lambda),
            "long_episode" => Ok(SweepKind::LongEpisode),
            other => Err(Error::InvalidConfig(format!("unknown sweep kind '{other}'"))),
        }
    }
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Uncertainty => "uncertainty",
            SweepKind::SamplesPerClass => "samples_per_class",
            SweepKind::Lambda => "lambda",
            SweepKind::LongEpisode => "long_episode",
        }
    }

    /// The base config with the swept axis set to `value`.
    pub fn apply(self, base: &EpisodeConfig, value: f64) -> Result<EpisodeConfig> {
        let mut config = base.clone();
        match self {
            SweepKind::Uncertainty => {
                if value < 0.0 {
                    return Err(Error::InvalidConfig("noise must be >= 0".into()));
                }
                config.stream.noise_scale = value;
            }
            SweepKind::SamplesPerClass => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::InvalidConfig("samples grid must be positive integers".into()));
                }
                config.stream.train_per_class = value as u32;
            }
            SweepKind::Lambda => {
                if value < 0.0 {
                    return Err(Error::InvalidConfig("lambda must be >= 0".into()));
                }
                config.train.lambda = value;
            }
            SweepKind::LongEpisode => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::InvalidConfig("task grid must be positive integers".into()));
                }
                config.stream.num_tasks = value as u32;
            }
        }
        Ok(config)
    }
}

/// Outcome of one grid point; failures are recorded and the sweep continues.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub config_hash: Option<String>,
    pub result: Option<EpisodeResult>,
    pub error: Option<String>,
}

/// Run the grid. Empty grids are rejected.
pub fn sweep(kind: SweepKind, grid: &[f64], base: &EpisodeConfig) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("sweep grid is empty".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &value in grid {
        let point = match kind.apply(base, value) {
            Ok(config) => match run_episode(&config) {
                Ok(result) => SweepPoint {
                    value,
                    config_hash: Some(config.hash()),
                    result: Some(result),
                    error: None,
                },
                Err(e) => SweepPoint {
                    value,
                    config_hash: Some(config.hash()),
                    result: None,
                    error: Some(e.to_string()),
                },
            },
            Err(e) => SweepPoint { value, config_hash: None, result: None, error: Some(e.to_string()) },
        };
        points.push(point);
    }
    Ok(points)
}

/// Combined CSV over all grid points and seeds.
pub fn sweep_csv(kind: SweepKind, points: &[SweepPoint]) -> String {
    let mut out = String::from("sweep,value,seed,a_all,a_last,error\n");
    for p in points {
        match &p.result {
            Some(result) => {
                for seed in &result.per_seed {
                    out.push_str(&format!(
                        "{},{},{},{:.4},{:.4},\n",
                        kind.name(),
                        p.value,
                        seed.seed,
                        seed.metrics.a_all,
                        seed.metrics.a_last
                    ));
                }
            }
            None => {
                out.push_str(&format!(
                    "{},{},,,,{}\n",
                    kind.name(),
                    p.value,
                    p.error.clone().unwrap_or_default()
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_grid_is_rejected() {
        let base = EpisodeConfig::default();
        assert!(sweep(SweepKind::Uncertainty, &[], &base).is_err());
    }

    #[test]
    fn apply_sets_the_right_axis() {
        let base = EpisodeConfig::default();
        assert_eq!(SweepKind::Uncertainty.apply(&base, 4.0).unwrap().stream.noise_scale, 4.0);
        assert_eq!(
            SweepKind::SamplesPerClass.apply(&base, 10.0).unwrap().stream.train_per_class,
            10
        );
        assert_eq!(SweepKind::Lambda.apply(&base, 0.5).unwrap().train.lambda, 0.5);
        assert_eq!(SweepKind::LongEpisode.apply(&base, 50.0).unwrap().stream.num_tasks, 50);
        assert!(SweepKind::SamplesPerClass.apply(&base, 2.5).is_err());
    }
}
