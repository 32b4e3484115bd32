//! Run artifacts: manifest, metrics, trace and partition tables.
//!
//! Everything written here except `timing.json` is a pure function of the
//! config and seeds, so two invocations produce identical bytes.
//!
//! `trace.csv` columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `seed` | run seed |
//! | `task` | 1-based task index |
//! | `round` | 1-based round within the task |
//! | `correct`, `total` | seen-class test accuracy as a fraction |
//! | `accuracy` | `correct / total` |
//! | `mean_client_loss` | mean last-epoch loss over trained clients |
//! | `residual_norm` | sum over adapted matrices of `‖W_res‖_F` |
//! | `bytes_up`, `bytes_down` | payload of the round in bytes |
//! | `grad_norm_sq` | squared global gradient norm, empty unless tracked |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fedsim::{ExperimentOutcome, RoundTrace, TaskData};
use crate::metrics::{self, AccuracyMatrix};
use crate::partition::partition_stats;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const TIMING_FILE: &str = "timing.json";
pub const CONFIG_FILE: &str = "config.toml";

pub const TRACE_COLUMNS: [&str; 11] = [
    "seed",
    "task",
    "round",
    "correct",
    "total",
    "accuracy",
    "mean_client_loss",
    "residual_norm",
    "bytes_up",
    "bytes_down",
    "grad_norm_sq",
];

pub fn partition_file(task: usize) -> String {
    format!("partition_t{task}.csv")
}

/// Written before a run starts; lists what the run will produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig, output_dir: &Path) -> Self {
        let files = [CONFIG_FILE, MANIFEST_FILE, METRICS_FILE, TRACE_FILE, TIMING_FILE]
            .iter()
            .map(|s| s.to_string())
            .collect();
        RunManifest {
            version: ARTIFACT_VERSION.to_string(),
            config: config.clone(),
            seeds: config.seeds.clone(),
            output_dir: output_dir.to_path_buf(),
            files,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line() as u64,
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    #[serde(rename = "S")]
    pub s: Vec<Vec<f64>>,
    #[serde(rename = "FAA")]
    pub faa: f64,
    #[serde(rename = "AIA")]
    pub aia: f64,
    pub forgetting: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(rename = "FAA")]
    pub faa: f64,
    #[serde(rename = "AIA")]
    pub aia: f64,
}

/// Contents of `metrics.json`. Seeds are keyed by their decimal value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: String,
    pub per_seed: BTreeMap<String, SeedMetrics>,
    pub mean: Summary,
    /// Sample standard deviation over seeds; zero for a single seed.
    pub std: Summary,
}

pub fn seed_metrics(s: &AccuracyMatrix) -> Result<SeedMetrics> {
    Ok(SeedMetrics {
        s: s.values(),
        faa: metrics::to_f64(&metrics::faa(s)?),
        aia: metrics::to_f64(&metrics::aia(s)?),
        forgetting: metrics::forgetting(s)?.iter().map(metrics::to_f64).collect(),
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn from_outcome(outcome: &ExperimentOutcome) -> Result<Self> {
        if outcome.seeds.is_empty() {
            return Err(Error::Validation("no seeds to report".into()));
        }
        let mut per_seed = BTreeMap::new();
        let mut faas = Vec::new();
        let mut aias = Vec::new();
        for o in &outcome.seeds {
            let m = seed_metrics(&o.accuracy)?;
            faas.push(m.faa);
            aias.push(m.aia);
            per_seed.insert(o.seed.to_string(), m);
        }
        let (mf, sf) = mean_std(&faas);
        let (ma, sa) = mean_std(&aias);
        Ok(MetricsReport {
            strategy: outcome.strategy.name().to_string(),
            per_seed,
            mean: Summary { faa: mf, aia: ma },
            std: Summary { faa: sf, aia: sa },
        })
    }

    pub fn to_json(&self) -> Result<String> {
        json(self)
    }
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Error::Validation(format!("cannot serialize report: {e}")))
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

/// One CSV line per round of every seed.
pub fn trace_csv(outcome: &ExperimentOutcome) -> String {
    let mut out = TRACE_COLUMNS.join(",");
    out.push('\n');
    for o in &outcome.seeds {
        for t in &o.traces {
            trace_line(&mut out, o.seed, t);
        }
    }
    out
}

fn trace_line(out: &mut String, seed: u64, t: &RoundTrace) {
    let losses: Vec<f64> = t.client_losses.iter().flatten().copied().collect();
    let mean_loss = if losses.is_empty() {
        String::new()
    } else {
        float(losses.iter().sum::<f64>() / losses.len() as f64)
    };
    let grad = t.grad_norm_sq.map(float).unwrap_or_default();
    let _ = writeln!(
        out,
        "{seed},{},{},{},{},{},{mean_loss},{},{},{},{grad}",
        t.task,
        t.round,
        t.accuracy_seen.correct,
        t.accuracy_seen.total,
        float(t.accuracy_seen.value()),
        float(t.residual_norm_total()),
        t.bytes_up,
        t.bytes_down,
    );
}

/// Wall-clock timing, kept apart from the deterministic outputs.
pub fn timing_json(outcome: &ExperimentOutcome) -> Result<String> {
    let per_seed: BTreeMap<String, f64> = outcome
        .seeds
        .iter()
        .map(|o| (o.seed.to_string(), o.traces.iter().map(|t| t.wall_seconds).sum()))
        .collect();
    json(&serde_json::json!({ "seconds_per_seed": per_seed }))
}

/// `client × class` sample counts of one task, header `client,class_0,..`.
pub fn partition_csv(data: &TaskData, task: usize) -> Result<String> {
    let shards = data
        .shards
        .get(task)
        .ok_or_else(|| Error::Validation(format!("no task {}", task + 1)))?;
    let c = data.train.num_classes;
    let stats = partition_stats(shards, &data.train.labels, c)?;
    let mut out = String::from("client");
    for j in 0..c {
        let _ = write!(out, ",class_{j}");
    }
    out.push('\n');
    for (k, row) in stats.counts.iter().enumerate() {
        out.push_str(&k.to_string());
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Writes `contents` to `dir/name`.
pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedsim::{prepare_data, run_experiment, RunOptions};

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seeds = vec![5, 6];
        cfg.dataset.num_classes = 4;
        cfg.dataset.input_dim = 8;
        cfg.dataset.train_per_class = 20;
        cfg.dataset.test_per_class = 5;
        cfg.tasks.count = 2;
        cfg.clients.count = 2;
        cfg.train.rounds = 2;
        cfg.train.local_epochs = 1;
        cfg.model.arch = crate::model::Architecture::Mlp;
        cfg.model.hidden = 8;
        cfg.lora.rank = 2;
        cfg
    }

    #[test]
    fn metrics_json_has_fixed_fields() {
        let out = run_experiment(&small(), &RunOptions::default()).unwrap();
        let report = MetricsReport::from_outcome(&out).unwrap();
        let v: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        for seed in ["5", "6"] {
            let s = &v["per_seed"][seed];
            for key in ["S", "FAA", "AIA", "forgetting"] {
                assert!(!s[key].is_null(), "missing {key}");
            }
            assert_eq!(s["S"].as_array().unwrap().len(), 2);
        }
        assert!(v["mean"]["FAA"].is_f64() && v["std"]["AIA"].is_f64());
    }

    #[test]
    fn std_uses_sample_variance() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }

    #[test]
    fn trace_rows_match_rounds() {
        let cfg = small();
        let out = run_experiment(&cfg, &RunOptions::default()).unwrap();
        let text = trace_csv(&out);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TRACE_COLUMNS.join(","));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 2 * 2 * 2);
        assert!(rows.iter().all(|r| r.split(',').count() == TRACE_COLUMNS.len()));
        assert!(rows[0].starts_with("5,1,1,"));
    }

    #[test]
    fn partition_table_sums_to_shards() {
        let cfg = small();
        let data = prepare_data(&cfg, 5).unwrap();
        let text = partition_csv(&data, 1).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "client,class_0,class_1,class_2,class_3");
        let total: u64 = lines
            .map(|l| l.split(',').skip(1).map(|v| v.parse::<u64>().unwrap()).sum::<u64>())
            .sum();
        assert_eq!(total, data.shards[1].iter().map(|s| s.len() as u64).sum::<u64>());
    }

    #[test]
    fn manifest_round_trips() {
        let cfg = small();
        let m = RunManifest::new(&cfg, Path::new("out"));
        let back = RunManifest::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.config, cfg);
    }
}
