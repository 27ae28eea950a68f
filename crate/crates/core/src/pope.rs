//! Privileged on-policy exploration: prefix selection, the guided set,
//! mixture scheduling and guided group rollouts.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Difficulty, OracleSolution, Problem, ProblemSuite, Token};
use crate::error::{LabError, Result};
use crate::policy::{self, PolicyParams, SamplingConfig};
use crate::rlcore::RolloutGroup;
use crate::rng::LabRng;

/// Guidance attached to a prompt: a prefix of the oracle solution, plus
/// whether its content is hidden from the policy's context window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub problem_id: usize,
    pub prefix_tokens: Vec<Token>,
    pub masked: bool,
}

impl GuidanceSpec {
    pub fn from_oracle(oracle: &OracleSolution, prefix_len: usize, masked: bool) -> Result<Self> {
        if prefix_len == 0 || prefix_len > oracle.tokens.len() {
            return Err(LabError::Config(format!(
                "prefix length {prefix_len} outside [1, {}]",
                oracle.tokens.len()
            )));
        }
        Ok(GuidanceSpec {
            problem_id: oracle.problem_id,
            prefix_tokens: oracle.tokens[..prefix_len].to_vec(),
            masked,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedProblem {
    pub base: Problem,
    pub guidance: GuidanceSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Hard,
    Guided,
    Easy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSchedule {
    pub weights: BTreeMap<Pool, f64>,
    pub batch_size: usize,
}

impl MixtureSchedule {
    pub fn new(weights: &[(Pool, f64)], batch_size: usize) -> Self {
        MixtureSchedule {
            weights: weights.iter().cloned().collect(),
            batch_size,
        }
    }

    /// Pools with positive weight and their normalized probabilities.
    pub fn normalized(&self) -> Result<Vec<(Pool, f64)>> {
        if self.batch_size == 0 {
            return Err(LabError::Mixture("batch size must be positive".into()));
        }
        if self.weights.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(LabError::Mixture("weights must be finite and non-negative".into()));
        }
        let total: f64 = self.weights.values().sum();
        if total <= 0.0 {
            return Err(LabError::Mixture("at least one weight must be positive".into()));
        }
        Ok(self
            .weights
            .iter()
            .filter(|(_, &w)| w > 0.0)
            .map(|(&p, &w)| (p, w / total))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub candidate_fractions: [f64; 4],
    pub rollouts_per_candidate: usize,
    pub temperature: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            candidate_fractions: [0.125, 0.25, 0.5, 0.75],
            rollouts_per_candidate: 16,
            temperature: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionTrial {
    pub candidate_len: usize,
    pub successes: usize,
}

/// Outcome of prefix selection for one problem, also the guided-set export
/// record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub problem_id: usize,
    pub prefix_len: usize,
    pub selection_trials: Vec<SelectionTrial>,
    pub fallback_used: bool,
}

/// Shortest candidate prefix under which at least one guided rollout
/// succeeds; otherwise a random length below a quarter of the oracle.
pub fn select_prefix(
    params: &PolicyParams,
    problem: &Problem,
    oracle: &mut OracleSolution,
    candidate_fractions: &[f64],
    rollouts_per_candidate: usize,
    temperature: f64,
    rng: &mut LabRng,
) -> Result<SelectionRecord> {
    if candidate_fractions.is_empty() {
        return Err(LabError::EmptyCandidates);
    }
    if candidate_fractions.windows(2).any(|w| w[0] > w[1])
        || candidate_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0))
    {
        return Err(LabError::Config(
            "candidate fractions must be ascending and in (0, 1]".into(),
        ));
    }
    let len = oracle.tokens.len();
    let mut trials = Vec::new();
    for &f in candidate_fractions {
        let candidate_len = ((f * len as f64).ceil() as usize).clamp(1, len);
        if trials.iter().any(|t: &SelectionTrial| t.candidate_len == candidate_len) {
            continue;
        }
        let g = GuidanceSpec::from_oracle(oracle, candidate_len, false)?;
        let mut successes = 0;
        for _ in 0..rollouts_per_candidate {
            let r = policy::sample_rollout_with(
                params,
                problem,
                Some(&g),
                SamplingConfig::new(temperature),
                rng,
            )?;
            successes += r.reward as usize;
        }
        trials.push(SelectionTrial {
            candidate_len,
            successes,
        });
        if successes > 0 {
            oracle.set_selected_prefix_len(candidate_len)?;
            return Ok(SelectionRecord {
                problem_id: problem.id,
                prefix_len: candidate_len,
                selection_trials: trials,
                fallback_used: false,
            });
        }
    }
    let prefix_len = fallback_prefix(oracle, rng)?;
    oracle.set_selected_prefix_len(prefix_len)?;
    Ok(SelectionRecord {
        problem_id: problem.id,
        prefix_len,
        selection_trials: trials,
        fallback_used: true,
    })
}

/// Uniform draw from `[1, ⌊len/4⌋]`.
pub fn fallback_prefix(oracle: &OracleSolution, rng: &mut LabRng) -> Result<usize> {
    let len = oracle.tokens.len();
    if len < 4 {
        return Err(LabError::OracleTooShort(len));
    }
    Ok(rng.gen_range(1..=len / 4))
}

/// One guided problem per hard problem, with prefixes selected under
/// `params`. Selected lengths are written back into the suite's oracles.
pub fn build_guided_set(
    suite: &mut ProblemSuite,
    params: &PolicyParams,
    cfg: &SelectionConfig,
    masked: bool,
    rng: &mut LabRng,
) -> Result<(Vec<GuidedProblem>, Vec<SelectionRecord>)> {
    let mut guided = Vec::new();
    let mut records = Vec::new();
    let hard: Vec<Problem> = suite.by_class(Difficulty::Hard).cloned().collect();
    for problem in hard {
        let oracle = suite
            .oracles
            .get_mut(&problem.id)
            .ok_or(LabError::MissingOracle(problem.id))?;
        let rec = select_prefix(
            params,
            &problem,
            oracle,
            &cfg.candidate_fractions,
            cfg.rollouts_per_candidate,
            cfg.temperature,
            rng,
        )?;
        let guidance = GuidanceSpec::from_oracle(oracle, rec.prefix_len, masked)?;
        guided.push(GuidedProblem {
            base: problem,
            guidance,
        });
        records.push(rec);
    }
    Ok((guided, records))
}

/// Guided set with a fixed prefix length for every hard problem.
pub fn fixed_guided_set(
    suite: &ProblemSuite,
    prefix_len: usize,
    masked: bool,
) -> Result<Vec<GuidedProblem>> {
    suite
        .by_class(Difficulty::Hard)
        .map(|p| {
            let oracle = suite.oracle(p.id)?;
            Ok(GuidedProblem {
                base: p.clone(),
                guidance: GuidanceSpec::from_oracle(oracle, prefix_len.min(oracle.tokens.len()), masked)?,
            })
        })
        .collect()
}

/// Guided-set export document.
pub fn guided_set_to_json(records: &[SelectionRecord]) -> Result<String> {
    serde_json::to_string_pretty(records).map_err(|e| LabError::json("guided set", e))
}

/// Draws `batch_size` items i.i.d.: a pool by normalized weight, then a
/// uniform element of that pool.
pub fn mixture_sampler<T: Clone>(
    schedule: &MixtureSchedule,
    pools: &BTreeMap<Pool, Vec<T>>,
    rng: &mut LabRng,
) -> Result<Vec<(Pool, T)>> {
    let norm = schedule.normalized()?;
    for (pool, _) in &norm {
        if pools.get(pool).is_none_or(|v| v.is_empty()) {
            return Err(LabError::Mixture(format!(
                "positive weight on empty pool {pool:?}"
            )));
        }
    }
    let mut out = Vec::with_capacity(schedule.batch_size);
    for _ in 0..schedule.batch_size {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = norm[norm.len() - 1].0;
        for &(pool, w) in &norm {
            acc += w;
            if u < acc {
                chosen = pool;
                break;
            }
        }
        let items = &pools[&chosen];
        let item = items[rng.gen_range(0..items.len())].clone();
        out.push((chosen, item));
    }
    Ok(out)
}

/// `n` guided rollouts of one guided problem, grouped with advantages.
pub fn guided_group_rollout(
    params: &PolicyParams,
    guided: &GuidedProblem,
    n: usize,
    temperature: f64,
    rng: &mut LabRng,
) -> Result<RolloutGroup> {
    if n < 2 {
        return Err(LabError::GroupTooSmall { need: 2, got: n });
    }
    let rollouts = (0..n)
        .map(|_| policy::sample_rollout(params, &guided.base, Some(&guided.guidance), temperature, rng))
        .collect::<Result<Vec<_>>>()?;
    RolloutGroup::new(rollouts)
}
