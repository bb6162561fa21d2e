//! Result persistence: `runs/<config-hash>/seed<k>/result.json` +
//! `matrix.csv`, and aggregated `report.csv` / `report.md`.
//!
//! Files are written atomically (temp file + rename) so partial runs never
//! leave half-written artifacts behind.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    mean_std, AccuracyMatrix, EpisodeConfig, EpisodeMetrics, Method, SeedResult, TimingReport,
};
use crate::error::Result;

/// The on-disk record for one seed's run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format_version: u32,
    pub method: Method,
    pub config: EpisodeConfig,
    pub config_hash: String,
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    pub a_all: f64,
    pub a_last: f64,
    pub timing: Option<TimingReport>,
    pub wall_s: f64,
}

impl RunRecord {
    pub fn new(config: &EpisodeConfig, result: &SeedResult) -> RunRecord {
        RunRecord {
            format_version: 1,
            method: config.method,
            config: config.clone(),
            config_hash: config.hash(),
            seed: result.seed,
            matrix: result.matrix.clone(),
            a_all: result.metrics.a_all,
            a_last: result.metrics.a_last,
            timing: result.timing.clone(),
            wall_s: result.wall_s,
        }
    }

    pub fn metrics(&self) -> EpisodeMetrics {
        EpisodeMetrics { a_all: self.a_all, a_last: self.a_last }
    }
}

/// Atomic write: temp file in the target directory, then rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_default()
    ));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Directory for one seed's artifacts under the run root.
pub fn seed_dir(out_dir: &Path, config: &EpisodeConfig, seed: u64) -> PathBuf {
    out_dir.join("runs").join(config.hash()).join(format!("seed{seed}"))
}

/// Persist one seed: `result.json` + `matrix.csv`.
pub fn write_seed_result(out_dir: &Path, config: &EpisodeConfig, result: &SeedResult) -> Result<PathBuf> {
    let dir = seed_dir(out_dir, config, result.seed);
    let record = RunRecord::new(config, result);
    write_atomic(&dir.join("result.json"), serde_json::to_string_pretty(&record)?.as_bytes())?;
    write_atomic(&dir.join("matrix.csv"), result.matrix.to_csv().as_bytes())?;
    Ok(dir)
}

/// Recursively collect `result.json` records under the given roots.
pub fn collect_records(roots: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    for root in roots {
        collect_into(root, &mut records)?;
    }
    records.sort_by(|a, b| {
        (a.method.name(), &a.config_hash, a.seed).cmp(&(b.method.name(), &b.config_hash, b.seed))
    });
    Ok(records)
}

fn collect_into(path: &Path, records: &mut Vec<RunRecord>) -> Result<()> {
    if path.is_file() {
        if path.file_name().is_some_and(|n| n == "result.json") {
            let record: RunRecord = serde_json::from_str(&fs::read_to_string(path)?)?;
            records.push(record);
        }
        return Ok(());
    }
    if path.is_dir() {
        let mut entries: Vec<PathBuf> =
            fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for entry in entries {
            collect_into(&entry, records)?;
        }
    }
    Ok(())
}

/// One aggregated row: a (method, config) group over its seeds.
#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub method: String,
    pub config_hash: String,
    pub seeds: usize,
    pub a_all_mean: f64,
    pub a_all_std: f64,
    pub a_last_mean: f64,
    pub a_last_std: f64,
}

/// Group records by (method, config hash) and aggregate, sorted by method
/// name then hash.
pub fn aggregate(records: &[RunRecord]) -> Vec<ReportRow> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.method.name().to_string(), r.config_hash.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, config_hash), rs)| {
            let a_all: Vec<f64> = rs.iter().map(|r| r.a_all).collect();
            let a_last: Vec<f64> = rs.iter().map(|r| r.a_last).collect();
            let (a_all_mean, a_all_std) = mean_std(&a_all);
            let (a_last_mean, a_last_std) = mean_std(&a_last);
            ReportRow {
                method,
                config_hash,
                seeds: rs.len(),
                a_all_mean,
                a_all_std,
                a_last_mean,
                a_last_std,
            }
        })
        .collect()
}

/// `report.csv` bytes for aggregated rows.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out =
        String::from("method,config_hash,seeds,a_all_mean,a_all_std,a_last_mean,a_last_std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4}\n",
            r.method, r.config_hash, r.seeds, r.a_all_mean, r.a_all_std, r.a_last_mean, r.a_last_std
        ));
    }
    out
}

/// `report.md` bytes: a table in the usual benchmark layout.
pub fn report_md(rows: &[ReportRow]) -> String {
    let mut out = String::from("| Method | Config | Seeds | A_all (%) | A_last (%) |\n");
    out.push_str("|---|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {:.1} ± {:.1} | {:.1} ± {:.1} |\n",
            r.method, r.config_hash, r.seeds, r.a_all_mean, r.a_all_std, r.a_last_mean, r.a_last_std
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::SeedMetrics;

    fn record(method: Method, seed: u64, a_all: f64, a_last: f64) -> RunRecord {
        let mut config = EpisodeConfig::default();
        config.method = method;
        let mut matrix = AccuracyMatrix::new(1);
        matrix.set(0, 0, a_all / 100.0);
        RunRecord {
            format_version: 1,
            method,
            config_hash: config.hash(),
            config,
            seed,
            matrix,
            a_all,
            a_last,
            timing: None,
            wall_s: 0.0,
        }
    }

    #[test]
    fn aggregation_means_and_single_seed_std() {
        let records = vec![
            record(Method::Er, 0, 40.0, 80.0),
            record(Method::Er, 1, 60.0, 90.0),
            record(Method::Finetune, 0, 20.0, 85.0),
        ];
        let rows = aggregate(&records);
        assert_eq!(rows.len(), 2);
        // Sorted by method name: er before finetune.
        assert_eq!(rows[0].method, "er");
        assert_eq!(rows[0].seeds, 2);
        assert!((rows[0].a_all_mean - 50.0).abs() < 1e-12);
        assert!((rows[0].a_all_std - 10.0).abs() < 1e-12);
        assert_eq!(rows[1].method, "finetune");
        assert_eq!(rows[1].a_all_std, 0.0, "single seed reports zero std");
        let _ = SeedMetrics { seed: 0, a_all: 0.0, a_last: 0.0 };
    }

    #[test]
    fn seed_results_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let config = EpisodeConfig::default();
        let mut matrix = AccuracyMatrix::new(2);
        matrix.set(0, 0, 1.0);
        matrix.set(0, 1, 0.5);
        matrix.set(1, 1, 0.75);
        let result = SeedResult {
            seed: 3,
            metrics: crate::harness::metrics(&matrix).unwrap(),
            matrix,
            timing: None,
            wall_s: 1.5,
        };
        let seed_path = write_seed_result(dir.path(), &config, &result).unwrap();
        assert!(seed_path.join("result.json").is_file());
        assert!(seed_path.join("matrix.csv").is_file());
        let records = collect_records(&[dir.path().to_path_buf()]).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].seed, 3);
        assert_eq!(records[0].matrix, result.matrix);
    }
}
