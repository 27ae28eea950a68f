use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use super::config::{ExperimentConfig, Method};
use super::didactic::{didactic_two_problem, DidacticConfig, Variant};
use super::sweep::{sweep, Execution, SweepSpec};
use super::train::{eval_solvability, run_experiment, RunCheckpoint};
use crate::envs::{self, Difficulty, ProblemSuite, SuiteConfig};
use crate::error::{LabError, Result};
use crate::passk::oracle::check_grid;
use crate::policy::{Checkpoint, PolicyParams};
use crate::rng::{stream, Stream};

#[derive(Debug, Parser)]
#[command(name = "popelab", about = "Exploration on hard combination-lock problems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Solvability of a checkpoint on the hard problems of a suite.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `suite.json` next to the checkpoint.
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "8,32")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.8)]
        temperature: f64,
    },
    /// The two-problem interference experiment.
    Didactic {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9")]
        seeds: Vec<u64>,
        /// Subset of hard-only, hard+easy-related, hard+easy-unrelated, hard+guide.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Write the full per-seed results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the pass@k estimator with brute-force enumeration.
    PasskCheck {
        #[arg(long)]
        n: usize,
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
    /// Run a grid of configs.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Parallel child processes; 1 runs serially in this process.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Generate a problem suite and write it as JSON.
    MakeSuite {
        /// Suite config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| LabError::json(format!("{what} {}", path.display()), e))
}

fn load_policy(path: &Path) -> Result<PolicyParams> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let ck = match serde_json::from_str::<RunCheckpoint>(&text) {
        Ok(run) => run.policy,
        Err(_) => serde_json::from_str::<Checkpoint>(&text)
            .map_err(|e| LabError::json(format!("checkpoint {}", path.display()), e))?,
    };
    PolicyParams::from_checkpoint(&ck)
}

/// Executes a parsed command, writing human output to `out`.
pub fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    let w = |out: &mut dyn Write, s: String| {
        out.write_all(s.as_bytes()).map_err(|e| LabError::io("<stdout>", e))
    };
    match cmd {
        Command::Train {
            config,
            seed,
            steps,
            method,
            out: dir,
            workers,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.total_steps = s;
            }
            if let Some(m) = method {
                cfg.method = m;
            }
            if let Some(wk) = workers {
                cfg.workers = wk;
            }
            let run = run_experiment(&cfg, dir.as_deref())?;
            let last = run.last();
            w(
                out,
                format!(
                    "{}\n",
                    json!({
                        "method": cfg.method.to_string(),
                        "seed": cfg.seed,
                        "step": run.step,
                        "solvable_fraction": last.solvable_fraction,
                        "mean_token_entropy": last.mean_token_entropy,
                    })
                ),
            )
        }
        Command::Eval {
            checkpoint,
            suite,
            n,
            k,
            seed,
            temperature,
        } => {
            let params = load_policy(&checkpoint)?;
            let suite_path = suite.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join("suite.json")
            });
            let suite = ProblemSuite::load(&suite_path)?;
            if k.is_empty() || k.iter().any(|&k| k == 0 || k > n) {
                return Err(LabError::Config(format!("every k must be in 1..={n}")));
            }
            let hard: Vec<_> = suite.by_class(Difficulty::Hard).cloned().collect();
            let res = eval_solvability(&params, &hard, n, &k, temperature, seed)?;
            for (k, s) in res {
                w(
                    out,
                    format!(
                        "{}\n",
                        json!({"k": k, "solvable_fraction": s.fraction, "per_problem": s.per_problem})
                    ),
                )?;
            }
            Ok(())
        }
        Command::Didactic {
            config,
            seeds,
            variants,
            out: path,
        } => {
            let cfg: DidacticConfig = match config {
                Some(p) => read_json(&p, "didactic config")?,
                None => DidacticConfig::default(),
            };
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<Vec<_>>>()?
            };
            let summary = didactic_two_problem(&cfg, &variants, &seeds)?;
            if let Some(p) = path {
                let text = serde_json::to_string_pretty(&summary)
                    .map_err(|e| LabError::json("didactic summary", e))?;
                std::fs::write(&p, text).map_err(|e| LabError::io(&p, e))?;
            }
            w(out, summary.table())
        }
        Command::PasskCheck { n, k } => {
            let ks = if k.is_empty() { (1..=n).collect() } else { k };
            let rows = check_grid(n, &ks)?;
            let mut s = format!(
                "{:>3} {:>3} {:>3} {:>22} {:>14} {:>14} {}\n",
                "n", "c", "k", "estimate", "exact", "enumerated", "agree"
            );
            for r in &rows {
                s.push_str(&format!(
                    "{:>3} {:>3} {:>3} {:>22.17} {:>14} {:>14} {}\n",
                    r.n, r.c, r.k, r.estimate, r.exact, r.enumerated, r.agree
                ));
            }
            w(out, s)?;
            if rows.iter().all(|r| r.agree) {
                Ok(())
            } else {
                Err(LabError::Config("estimator disagrees with enumeration".into()))
            }
        }
        Command::Sweep { spec, out: dir, jobs } => {
            let spec = SweepSpec::load(&spec)?;
            let exec = if jobs <= 1 {
                Execution::Serial
            } else {
                let exe = std::env::current_exe().map_err(|e| LabError::io("<current exe>", e))?;
                Execution::Processes { exe, jobs }
            };
            let rows = sweep(&spec, &dir, &exec)?;
            w(out, format!("{} runs written to {}\n", rows.len(), dir.display()))
        }
        Command::MakeSuite { config, seed, out: path } => {
            let cfg: SuiteConfig = match config {
                Some(p) => read_json(&p, "suite config")?,
                None => SuiteConfig::default(),
            };
            let suite = envs::make_suite(&cfg, &mut stream(seed, Stream::Suite, &[]))?;
            suite.save(&path)?;
            w(
                out,
                format!("{} problems written to {}\n", suite.problems.len(), path.display()),
            )
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Failures print one JSON line to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", json!({"error": "usage", "message": first}));
            return 2;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(cli.command, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            1
        }
    }
}
