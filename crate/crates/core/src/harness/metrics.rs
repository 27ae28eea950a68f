use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// One evaluation point. Field order is the JSONL key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: usize,
    pub phase: String,
    /// Empirical pass@1 per problem id, unguided.
    pub per_problem_success: BTreeMap<usize, f64>,
    #[serde(rename = "J_easy")]
    pub j_easy: Option<f64>,
    #[serde(rename = "J_hard")]
    pub j_hard: Option<f64>,
    #[serde(rename = "J_guided")]
    pub j_guided: Option<f64>,
    /// Fraction of hard problems with empirical pass@k > 0, keyed by k.
    pub solvable_fraction: BTreeMap<usize, f64>,
    /// Same, on the guided versions of the hard problems.
    pub guided_solvable_fraction: Option<BTreeMap<usize, f64>>,
    pub mean_token_entropy: f64,
    pub loss: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub mean_kl: f64,
    /// Norm of the most recent step's gradient.
    pub grad_norm: f64,
    /// Groups with at least one nonzero advantage in the most recent step.
    pub nonzero_groups: usize,
}

impl MetricsRecord {
    pub fn check(&self, vocab: usize) -> Result<()> {
        let rates = self
            .per_problem_success
            .values()
            .chain(self.solvable_fraction.values())
            .chain(self.guided_solvable_fraction.iter().flat_map(|m| m.values()))
            .chain(self.j_easy.iter())
            .chain(self.j_hard.iter())
            .chain(self.j_guided.iter());
        for r in rates {
            if !(0.0..=1.0).contains(r) {
                return Err(LabError::Config(format!("rate {r} outside [0, 1] at step {}", self.step)));
            }
        }
        let hmax = (vocab as f64).ln() + 1e-9;
        if !(self.mean_token_entropy >= 0.0 && self.mean_token_entropy <= hmax) {
            return Err(LabError::Config(format!(
                "entropy {} outside [0, ln V] at step {}",
                self.mean_token_entropy, self.step
            )));
        }
        Ok(())
    }

    /// Solvable fraction at the smallest recorded k not below `k`.
    pub fn solvable_at(&self, k: usize) -> Option<f64> {
        self.solvable_fraction.get(&k).copied()
    }
}

/// Append-only JSONL writer; every record is flushed as a complete line.
pub struct MetricsSink {
    path: Option<PathBuf>,
    file: Option<File>,
}

impl MetricsSink {
    pub fn memory() -> Self {
        MetricsSink {
            path: None,
            file: None,
        }
    }

    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| LabError::io(path, e))?;
        Ok(MetricsSink {
            path: Some(path.to_path_buf()),
            file: Some(file),
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        if let (Some(f), Some(p)) = (self.file.as_mut(), self.path.as_ref()) {
            let mut line =
                serde_json::to_string(record).map_err(|e| LabError::json("metrics record", e))?;
            line.push('\n');
            f.write_all(line.as_bytes()).map_err(|e| LabError::io(p, e))?;
            f.flush().map_err(|e| LabError::io(p, e))?;
        }
        Ok(())
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).map_err(|e| LabError::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| LabError::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| LabError::json("metrics line", e))
        })
        .collect()
}

/// Plot-ready CSV: one row per record. Missing values are empty cells.
pub fn export_trajectory(records: &[MetricsRecord], k: usize) -> String {
    let mut out = String::from("step,J_easy,J_hard,entropy,solvable_fraction\n");
    let cell = |v: Option<f64>| v.map(fmt17).unwrap_or_default();
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step,
            cell(r.j_easy),
            cell(r.j_hard),
            fmt17(r.mean_token_entropy),
            cell(r.solvable_at(k)),
        ));
    }
    out
}

/// 17 significant digits, enough to round-trip any double.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}
