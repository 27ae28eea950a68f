//! Config grids. Each grid axis is a dotted path into the experiment config
//! JSON (`"loss.clip.eps_high"`, `"seed"`) with a list of values; every
//! combination becomes one run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::ExperimentConfig;
use super::metrics::read_jsonl;
use super::train::run_experiment;
use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Base config every run starts from.
    #[serde(default)]
    pub base: Value,
    pub grid: BTreeMap<String, Vec<Value>>,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| LabError::json("sweep spec", e))
    }

    /// All grid points in lexicographic axis order, last axis fastest.
    pub fn points(&self) -> Vec<Vec<(String, Value)>> {
        let mut points = vec![Vec::new()];
        for (path, values) in &self.grid {
            points = points
                .into_iter()
                .flat_map(|p: Vec<(String, Value)>| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((path.clone(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        points
    }

    pub fn configs(&self) -> Result<Vec<ExperimentConfig>> {
        self.points()
            .iter()
            .map(|point| {
                let mut v = if self.base.is_null() {
                    serde_json::to_value(ExperimentConfig::default())
                        .map_err(|e| LabError::json("default config", e))?
                } else {
                    self.base.clone()
                };
                for (path, value) in point {
                    set_path(&mut v, path, value.clone())?;
                }
                serde_json::from_value(v).map_err(|e| LabError::json("sweep point config", e))
            })
            .collect()
    }
}

/// Sets `root.a.b.c = value`, creating intermediate objects.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(LabError::Config(format!("empty segment in path {path:?}")));
        }
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Default::default());
            } else {
                return Err(LabError::Config(format!("{path:?} crosses a non-object value")));
            }
        }
        let obj = cur.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub enum Execution {
    Serial,
    /// Run up to `jobs` child processes of `exe train` at a time.
    Processes { exe: PathBuf, jobs: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run: String,
    pub point: BTreeMap<String, Value>,
    pub final_step: usize,
    pub final_entropy: f64,
    pub final_solvable_fraction: BTreeMap<usize, f64>,
}

/// Runs every grid point into `out/run_NNNN/` and writes `out/sweep.jsonl`
/// with one summary row per run, in grid order.
pub fn sweep(spec: &SweepSpec, out: &Path, exec: &Execution) -> Result<Vec<SweepRow>> {
    let configs = spec.configs()?;
    for c in &configs {
        c.validate()?;
    }
    std::fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    let dirs: Vec<PathBuf> = (0..configs.len()).map(|i| out.join(format!("run_{i:04}"))).collect();
    for (c, d) in configs.iter().zip(&dirs) {
        std::fs::create_dir_all(d).map_err(|e| LabError::io(d, e))?;
        let path = d.join("config.json");
        std::fs::write(&path, c.to_json()?).map_err(|e| LabError::io(&path, e))?;
    }
    match exec {
        Execution::Serial => {
            for (c, d) in configs.iter().zip(&dirs) {
                run_experiment(c, Some(d))?;
            }
        }
        Execution::Processes { exe, jobs } => {
            for batch in dirs.chunks((*jobs).max(1)) {
                let children = batch
                    .iter()
                    .map(|d| {
                        Command::new(exe)
                            .arg("train")
                            .arg("--config")
                            .arg(d.join("config.json"))
                            .arg("--out")
                            .arg(d)
                            .spawn()
                            .map(|c| (d, c))
                            .map_err(|e| LabError::io(exe, e))
                    })
                    .collect::<Result<Vec<_>>>()?;
                for (d, mut child) in children {
                    let status = child.wait().map_err(|e| LabError::io(exe, e))?;
                    if !status.success() {
                        return Err(LabError::Config(format!(
                            "sweep run {} exited with {status}",
                            d.display()
                        )));
                    }
                }
            }
        }
    }
    let mut rows = Vec::new();
    let mut lines = String::new();
    for (point, d) in spec.points().into_iter().zip(&dirs) {
        let records = read_jsonl(&d.join("metrics.jsonl"))?;
        let last = records
            .last()
            .ok_or_else(|| LabError::Config(format!("{} has no metrics", d.display())))?;
        let row = SweepRow {
            run: d.file_name().unwrap().to_string_lossy().into_owned(),
            point: point.into_iter().collect(),
            final_step: last.step,
            final_entropy: last.mean_token_entropy,
            final_solvable_fraction: last.solvable_fraction.clone(),
        };
        lines.push_str(&serde_json::to_string(&row).map_err(|e| LabError::json("sweep row", e))?);
        lines.push('\n');
        rows.push(row);
    }
    let path = out.join("sweep.jsonl");
    std::fs::write(&path, lines).map_err(|e| LabError::io(&path, e))?;
    Ok(rows)
}
