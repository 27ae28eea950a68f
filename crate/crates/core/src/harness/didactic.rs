//! One hard problem trained alone or alongside one companion prompt: a
//! related easy problem, an unrelated easy problem, or its own guided
//! version.
//!
//! Every variant of a seed shares the same suite (the hard problem and both
//! easy problems), the same pretrained base and the same rollout streams, so
//! differences between variants come from the companion prompt alone. Each
//! step trains on one group of the hard problem plus one group of the
//! companion, which keeps the hard problem's rollout budget per step equal
//! across variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{OptimizerConfig, PolicyConfig, PretrainConfig};
use super::train::pretrain_base;
use crate::envs::{self, Difficulty, Problem, ProblemSuite, SuiteConfig};
use crate::error::{LabError, Result};
use crate::policy::{self, PolicyParams, PolicyShape, PolicySnapshot};
use crate::pope::{build_guided_set, GuidedProblem, SelectionConfig};
use crate::rlcore::{self, LossConfig, OptimState, RolloutGroup};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    HardOnly,
    HardEasyRelated,
    HardEasyUnrelated,
    HardGuide,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::HardOnly,
        Variant::HardEasyRelated,
        Variant::HardEasyUnrelated,
        Variant::HardGuide,
    ];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::HardOnly => "hard-only",
            Variant::HardEasyRelated => "hard+easy-related",
            Variant::HardEasyUnrelated => "hard+easy-unrelated",
            Variant::HardGuide => "hard+guide",
        })
    }
}

impl FromStr for Variant {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| LabError::Config(format!("unknown didactic variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DidacticConfig {
    pub vocab_size: usize,
    pub hard_len: usize,
    pub easy_len: usize,
    pub shared_prefix_len: usize,
    pub grammar_branching: Option<usize>,
    pub policy: PolicyConfig,
    pub base: Option<PretrainConfig>,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub rollouts_per_prompt: usize,
    pub temperature: f64,
    pub selection: SelectionConfig,
    pub max_steps: usize,
    pub eval_interval: usize,
    pub eval_n: usize,
    pub threshold: f64,
}

impl Default for DidacticConfig {
    fn default() -> Self {
        DidacticConfig {
            vocab_size: 16,
            hard_len: 6,
            easy_len: 2,
            shared_prefix_len: 2,
            grammar_branching: Some(3),
            policy: PolicyConfig {
                context_order: 6,
                ..PolicyConfig::default()
            },
            base: Some(PretrainConfig::default()),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                ..OptimizerConfig::default()
            },
            rollouts_per_prompt: 8,
            temperature: 0.8,
            selection: SelectionConfig {
                rollouts_per_candidate: 128,
                ..SelectionConfig::default()
            },
            max_steps: 2000,
            eval_interval: 10,
            eval_n: 64,
            threshold: 0.9,
        }
    }
}

/// Result of one variant on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DidacticRun {
    pub variant: String,
    pub seed: u64,
    /// First evaluation step with hard pass@1 ≥ threshold.
    pub steps_to_threshold: Option<usize>,
    /// Unguided hard rollouts sampled before the threshold was reached.
    pub hard_rollouts: Option<usize>,
    /// First evaluation step with the companion easy problem at threshold.
    pub easy_steps_to_threshold: Option<usize>,
    /// `(step, J_easy, J_hard)` at every evaluation, from eval pass@1.
    pub trajectory: Vec<(usize, Option<f64>, f64)>,
}

impl DidacticRun {
    /// Steps to threshold with censored runs counted as one interval past
    /// the budget.
    pub fn censored_steps(&self, cfg: &DidacticConfig) -> usize {
        self.steps_to_threshold
            .unwrap_or(cfg.max_steps + cfg.eval_interval)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub median_steps: f64,
    pub median_hard_rollouts: f64,
    pub reached: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DidacticSummary {
    pub runs: Vec<DidacticRun>,
    pub summary: Vec<VariantSummary>,
}

impl DidacticSummary {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<22} {:>12} {:>18} {:>8}\n",
            "variant", "median_steps", "median_hard_rolls", "reached"
        );
        for v in &self.summary {
            s.push_str(&format!(
                "{:<22} {:>12.1} {:>18.1} {:>5}/{}\n",
                v.variant, v.median_steps, v.median_hard_rollouts, v.reached, v.seeds
            ));
        }
        s
    }

    pub fn run(&self, variant: Variant, seed: u64) -> Option<&DidacticRun> {
        let name = variant.to_string();
        self.runs.iter().find(|r| r.variant == name && r.seed == seed)
    }
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Shared per-seed setup: the suite, the base policy and the guided
/// version of the hard problem.
struct SeedSetup {
    suite: ProblemSuite,
    base: PolicyParams,
    guided: GuidedProblem,
}

fn setup(cfg: &DidacticConfig, seed: u64) -> Result<SeedSetup> {
    let suite_cfg = SuiteConfig {
        vocab_size: cfg.vocab_size,
        hard_count: 1,
        hard_len: cfg.hard_len,
        easy_related: 1,
        easy_unrelated: 1,
        easy_len: cfg.easy_len,
        shared_prefix_len: cfg.shared_prefix_len,
        grammar_branching: cfg.grammar_branching,
        ..SuiteConfig::default()
    };
    let mut suite = envs::make_suite(&suite_cfg, &mut stream(seed, Stream::Suite, &[]))?;
    let shape = PolicyShape {
        num_problems: suite.problems.len(),
        embed_dim: cfg.policy.embed_dim,
        context_order: cfg.policy.context_order,
        vocab: suite.vocab.size,
        hidden: cfg.policy.hidden,
    };
    let mut base = PolicyParams::init(shape, &cfg.policy.init, &mut stream(seed, Stream::Init, &[]))?;
    if let Some(p) = &cfg.base {
        pretrain_base(&suite, &mut base, p, seed)?;
    }
    let (mut guided, _) = build_guided_set(
        &mut suite,
        &base,
        &cfg.selection,
        false,
        &mut stream(seed, Stream::PrefixSelect, &[]),
    )?;
    Ok(SeedSetup {
        suite,
        base,
        guided: guided.remove(0),
    })
}

fn companion(setup: &SeedSetup, variant: Variant) -> Option<&Problem> {
    let pick = |related: bool| {
        setup.suite.problems.iter().find(|p| {
            p.difficulty_class == Difficulty::Easy && p.relatedness_tag.is_some() == related
        })
    };
    match variant {
        Variant::HardEasyRelated => pick(true),
        Variant::HardEasyUnrelated => pick(false),
        _ => None,
    }
}

fn pass1(params: &PolicyParams, p: &Problem, n: usize, temp: f64, seed: u64, step: usize) -> Result<f64> {
    let mut rng = stream(seed, Stream::Eval, &[step as u64, p.id as u64]);
    let mut c = 0;
    for _ in 0..n {
        c += policy::sample_rollout(params, p, None, temp, &mut rng)?.reward as usize;
    }
    Ok(c as f64 / n as f64)
}

fn run_variant(cfg: &DidacticConfig, setup: &SeedSetup, variant: Variant, seed: u64) -> Result<DidacticRun> {
    let hard = &setup.guided.base;
    let easy = companion(setup, variant);
    let mut params = setup.base.clone();
    let mut opt = OptimState::new(cfg.optimizer.method, cfg.optimizer.learning_rate, &params)?;
    let mut trajectory = Vec::new();
    let mut easy_hit = None;
    let n = cfg.rollouts_per_prompt;
    for step in 0..=cfg.max_steps {
        if step % cfg.eval_interval == 0 {
            let jh = pass1(&params, hard, cfg.eval_n, cfg.temperature, seed, step)?;
            let je = easy
                .map(|e| pass1(&params, e, cfg.eval_n, cfg.temperature, seed, step))
                .transpose()?;
            trajectory.push((step, je, jh));
            if easy_hit.is_none() && je.is_some_and(|j| j >= cfg.threshold) {
                easy_hit = Some(step);
            }
            if jh >= cfg.threshold {
                return Ok(DidacticRun {
                    variant: variant.to_string(),
                    seed,
                    steps_to_threshold: Some(step),
                    hard_rollouts: Some(step * n),
                    easy_steps_to_threshold: easy_hit,
                    trajectory,
                });
            }
        }
        if step == cfg.max_steps {
            break;
        }
        let snap = PolicySnapshot::take(&params, step);
        let mut groups = Vec::with_capacity(2);
        let mut rng = stream(seed, Stream::Rollout, &[step as u64, 0]);
        groups.push(RolloutGroup::new(
            (0..n)
                .map(|_| policy::sample_rollout(&params, hard, None, cfg.temperature, &mut rng))
                .collect::<Result<Vec<_>>>()?,
        )?);
        let mut rng = stream(seed, Stream::Rollout, &[step as u64, 1]);
        match variant {
            Variant::HardOnly => {}
            Variant::HardGuide => groups.push(RolloutGroup::new(
                (0..n)
                    .map(|_| {
                        policy::sample_rollout(&params, hard, Some(&setup.guided.guidance), cfg.temperature, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?,
            )?),
            _ => {
                let e = easy.expect("easy variants have a companion");
                groups.push(RolloutGroup::new(
                    (0..n)
                        .map(|_| policy::sample_rollout(&params, e, None, cfg.temperature, &mut rng))
                        .collect::<Result<Vec<_>>>()?,
                )?);
            }
        }
        let (loss, grad, _) = rlcore::grpo_loss_and_grad(&params, &snap, &groups, &cfg.loss)?;
        if !loss.is_finite() {
            return Err(LabError::NonFiniteLoss {
                step,
                detail: format!("didactic {variant}"),
            });
        }
        rlcore::optimizer_step(&mut params, &grad, &mut opt)?;
    }
    Ok(DidacticRun {
        variant: variant.to_string(),
        seed,
        steps_to_threshold: None,
        hard_rollouts: None,
        easy_steps_to_threshold: easy_hit,
        trajectory,
    })
}

/// Runs the requested variants over the seeds and summarizes medians.
pub fn didactic_two_problem(
    cfg: &DidacticConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<DidacticSummary> {
    let mut runs = Vec::new();
    for &seed in seeds {
        let s = setup(cfg, seed)?;
        for &v in variants {
            runs.push(run_variant(cfg, &s, v, seed)?);
        }
    }
    let summary = variants
        .iter()
        .map(|v| {
            let name = v.to_string();
            let mine: Vec<&DidacticRun> = runs.iter().filter(|r| r.variant == name).collect();
            let mut steps: Vec<f64> = mine.iter().map(|r| r.censored_steps(cfg) as f64).collect();
            let mut rolls: Vec<f64> = mine
                .iter()
                .map(|r| (r.censored_steps(cfg) * cfg.rollouts_per_prompt) as f64)
                .collect();
            VariantSummary {
                variant: name,
                median_steps: median(&mut steps),
                median_hard_rollouts: median(&mut rolls),
                reached: mine.iter().filter(|r| r.steps_to_threshold.is_some()).count(),
                seeds: mine.len(),
            }
        })
        .collect();
    Ok(DidacticSummary { runs, summary })
}
