//! Experiment records and their on-disk forms.
//!
//! `results.jsonl` holds one record per line and is a pure function of the
//! config and seed. Wall-clock runtimes go to a separate `timings.jsonl` so
//! reruns can be compared byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::io::write_atomic;

/// A metric tracked over training steps (strictly increasing `steps`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub steps: Vec<usize>,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(name: impl Into<String>, steps: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if steps.len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} steps vs {} values",
                steps.len(),
                values.len()
            )));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("series steps must increase".into()));
        }
        Ok(Series {
            name: name.into(),
            steps,
            values,
        })
    }

    /// Means of consecutive `window`-step blocks of a per-step curve, keyed by
    /// the last step of each block (1-based). A short tail block is dropped.
    pub fn windowed(name: impl Into<String>, curve: &[f64], window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidArgument("window must be ≥ 1".into()));
        }
        let (steps, values) = curve
            .chunks_exact(window)
            .enumerate()
            .map(|(i, c)| ((i + 1) * window, c.iter().sum::<f64>() / window as f64))
            .unzip();
        Self::new(name, steps, values)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last(&self) -> Option<f64> {
        self.values.last().copied()
    }
}

/// Proxy metrics at one inference setting (ODE steps or decode iterations).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub iterations: usize,
    pub semantic_accuracy: f64,
    pub perceptual_similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub arm: String,
    pub config_digest: String,
    pub seed: u64,
    pub train_steps: usize,
    pub param_count: usize,
    pub series: Vec<Series>,
    pub metrics: Vec<MetricPoint>,
    /// Scalar facts specific to the experiment (final losses, counts).
    pub extra: BTreeMap<String, f64>,
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl ExperimentResult {
    pub fn new(name: &str, arm: &str, config_digest: &str, seed: u64) -> Self {
        ExperimentResult {
            name: name.into(),
            arm: arm.into(),
            config_digest: config_digest.into(),
            seed,
            train_steps: 0,
            param_count: 0,
            series: Vec::new(),
            metrics: Vec::new(),
            extra: BTreeMap::new(),
            runtime_secs: 0.0,
        }
    }

    pub fn metric_at(&self, iterations: usize) -> Option<&MetricPoint> {
        self.metrics.iter().find(|m| m.iterations == iterations)
    }

    pub fn series(&self, name: &str) -> Option<&Series> {
        self.series.iter().find(|s| s.name == name)
    }
}

/// One JSON record per line.
pub fn to_jsonl(results: &[ExperimentResult]) -> Result<String> {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<ExperimentResult>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Columns: `arm,series,step,value`.
pub fn series_csv(results: &[ExperimentResult]) -> String {
    let mut out = String::from("arm,series,step,value\n");
    for r in results {
        for s in &r.series {
            for (st, v) in s.steps.iter().zip(&s.values) {
                writeln!(out, "{},{},{},{:e}", r.arm, s.name, st, v).expect("string write");
            }
        }
    }
    out
}

/// Columns: `arm,iterations,semantic_accuracy,perceptual_similarity`.
pub fn metrics_csv(results: &[ExperimentResult]) -> String {
    let mut out = String::from("arm,iterations,semantic_accuracy,perceptual_similarity\n");
    for r in results {
        for m in &r.metrics {
            writeln!(
                out,
                "{},{},{:e},{:e}",
                r.arm, m.iterations, m.semantic_accuracy, m.perceptual_similarity
            )
            .expect("string write");
        }
    }
    out
}

/// Writes `<name>.jsonl`, `<name>_series.csv`, `<name>_metrics.csv` and
/// `<name>_timings.jsonl` under `dir`.
pub fn write_results(dir: &Path, name: &str, results: &[ExperimentResult]) -> Result<()> {
    write_atomic(&dir.join(format!("{name}.jsonl")), to_jsonl(results)?.as_bytes())?;
    write_atomic(&dir.join(format!("{name}_series.csv")), series_csv(results).as_bytes())?;
    write_atomic(&dir.join(format!("{name}_metrics.csv")), metrics_csv(results).as_bytes())?;
    let mut timings = String::new();
    for r in results {
        let rec = serde_json::json!({ "arm": r.arm, "runtime_secs": r.runtime_secs });
        timings.push_str(&rec.to_string());
        timings.push('\n');
    }
    write_atomic(&dir.join(format!("{name}_timings.jsonl")), timings.as_bytes())
}
