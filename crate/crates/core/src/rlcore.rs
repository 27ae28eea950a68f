//! Group advantages, the token-level clipped surrogate with entropy bonus and
//! KL penalty, the optimizer, and the supervised baselines.

use serde::{Deserialize, Serialize};

use crate::envs::{OracleSolution, Problem, Token};
use crate::error::{LabError, Result};
use crate::policy::{
    self, entropy_of, log_softmax_into, PolicyParams, PolicySnapshot, Rollout, SamplingConfig,
};
use crate::pope::GuidanceSpec;
use crate::rng::LabRng;

/// Rollouts of one prompt variant with their group-relative advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub problem_id: usize,
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(rollouts: Vec<Rollout>) -> Result<Self> {
        let rewards: Vec<u8> = rollouts.iter().map(|r| r.reward).collect();
        let advantages = group_advantages(&rewards)?;
        let first = &rollouts[0];
        if rollouts.iter().any(|r| {
            r.problem_id != first.problem_id
                || r.guidance_flag != first.guidance_flag
                || r.forced_prefix_len != first.forced_prefix_len
        }) {
            return Err(LabError::Config(
                "a rollout group must share one prompt variant".into(),
            ));
        }
        Ok(RolloutGroup {
            problem_id: first.problem_id,
            rollouts,
            advantages,
        })
    }

    pub fn mean_reward(&self) -> f64 {
        self.rollouts.iter().map(|r| f64::from(r.reward)).sum::<f64>() / self.rollouts.len() as f64
    }

    pub fn is_guided(&self) -> bool {
        self.rollouts[0].guidance_flag == 1
    }
}

/// `A_i = r_i − mean(r)`.
pub fn group_advantages(rewards: &[u8]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(LabError::GroupTooSmall {
            need: 2,
            got: rewards.len(),
        });
    }
    let mean = rewards.iter().map(|&r| f64::from(r)).sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|&r| f64::from(r) - mean).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            eps_low: 0.2,
            eps_high: 0.28,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low >= 0.0 && self.eps_low <= 1.0 && self.eps_high >= 0.0)
            || !self.eps_high.is_finite()
        {
            return Err(LabError::Config(format!("bad clip config {self:?}")));
        }
        Ok(())
    }
}

/// `min(ratio·A, clamp(ratio, 1−eps_low, 1+eps_high)·A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: ClipConfig) -> f64 {
    let clamped = ratio.clamp(1.0 - clip.eps_low, 1.0 + clip.eps_high);
    (ratio * advantage).min(clamped * advantage)
}

/// Derivative of [`clipped_surrogate`] with respect to the ratio, plus
/// whether the clipped branch is the active one.
fn surrogate_slope(ratio: f64, advantage: f64, clip: ClipConfig) -> (f64, bool) {
    let clamped = ratio.clamp(1.0 - clip.eps_low, 1.0 + clip.eps_high);
    if ratio * advantage <= clamped * advantage || clamped == ratio {
        (advantage, false)
    } else {
        (0.0, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Aggregation {
    #[default]
    TokenMean,
    SequenceMeanThenBatchMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub clip: ClipConfig,
    pub entropy_coef: f64,
    pub kl_coef: f64,
    pub aggregation: Aggregation,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            clip: ClipConfig::default(),
            entropy_coef: 0.0,
            kl_coef: 0.0,
            aggregation: Aggregation::TokenMean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.clip.validate()?;
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite())
            || !(self.kl_coef >= 0.0 && self.kl_coef.is_finite())
        {
            return Err(LabError::Config(format!("bad loss coefficients {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub mean_entropy: f64,
    pub mean_kl: f64,
    pub tokens: usize,
}

/// Sums behind [`Diagnostics`], kept separate so per-group results can be
/// reduced in a fixed order.
#[derive(Debug, Clone, Copy, Default)]
pub struct DiagnosticSums {
    pub clipped: usize,
    pub ratio: f64,
    pub entropy: f64,
    pub kl: f64,
    pub tokens: usize,
}

impl DiagnosticSums {
    pub fn merge(&mut self, o: &DiagnosticSums) {
        self.clipped += o.clipped;
        self.ratio += o.ratio;
        self.entropy += o.entropy;
        self.kl += o.kl;
        self.tokens += o.tokens;
    }

    pub fn finish(&self) -> Diagnostics {
        let n = self.tokens.max(1) as f64;
        Diagnostics {
            clip_fraction: self.clipped as f64 / n,
            mean_ratio: self.ratio / n,
            mean_entropy: self.entropy / n,
            mean_kl: self.kl / n,
            tokens: self.tokens,
        }
    }
}

/// Unnormalized contribution of one group: the objective and gradient are
/// sums of per-token weights times per-token objectives, where the weight
/// of each token comes from [`aggregation_weights`].
#[derive(Debug, Clone)]
pub struct GroupTerm {
    pub objective: f64,
    pub grad: PolicyParams,
    pub sums: DiagnosticSums,
}

/// Number of free tokens in a rollout.
fn free_tokens(r: &Rollout) -> usize {
    r.tokens.len() - r.forced_prefix_len
}

/// Per-rollout token weight so that the aggregate equals the configured
/// mean. Returned values are indexed `[group][rollout]`.
pub fn aggregation_weights(groups: &[RolloutGroup], agg: Aggregation) -> Vec<Vec<f64>> {
    match agg {
        Aggregation::TokenMean => {
            let total: usize = groups.iter().flat_map(|g| &g.rollouts).map(free_tokens).sum();
            let w = if total == 0 { 0.0 } else { 1.0 / total as f64 };
            groups.iter().map(|g| vec![w; g.rollouts.len()]).collect()
        }
        Aggregation::SequenceMeanThenBatchMean => {
            let seqs = groups
                .iter()
                .flat_map(|g| &g.rollouts)
                .filter(|r| free_tokens(r) > 0)
                .count()
                .max(1) as f64;
            groups
                .iter()
                .map(|g| {
                    g.rollouts
                        .iter()
                        .map(|r| match free_tokens(r) {
                            0 => 0.0,
                            t => 1.0 / (t as f64 * seqs),
                        })
                        .collect()
                })
                .collect()
        }
    }
}

/// Objective and gradient (of the objective, not the loss) for one group
/// with the given per-rollout token weights.
pub fn grpo_group_term(
    params: &PolicyParams,
    snapshot: &PolicySnapshot,
    group: &RolloutGroup,
    token_weights: &[f64],
    cfg: &LossConfig,
) -> Result<GroupTerm> {
    let old = snapshot.params();
    params.check_same_shape(old)?;
    let v = params.shape().vocab;
    let mut hidden = vec![0.0; params.shape().hidden];
    let mut zq = vec![0.0; v];
    let mut lq = vec![0.0; v];
    let mut lpt = vec![0.0; v];
    let mut grad = params.zeros_like();
    let mut objective = 0.0;
    let mut sums = DiagnosticSums::default();
    for ((r, &adv), &w) in group.rollouts.iter().zip(&group.advantages).zip(token_weights) {
        if r.per_token_logprob_old.len() != r.tokens.len() {
            return Err(LabError::EpisodeLength {
                expected: r.tokens.len(),
                got: r.per_token_logprob_old.len(),
            });
        }
        let temp = r.logprob_temperature;
        let flag = r.flag();
        policy::visit_free_positions(params, r, Some(&mut grad), |tv, dl| {
            // Log-probability of the emitted token at the temperature the
            // old log-probability was recorded at.
            let (lp, probs_t): (f64, Option<&[f64]>) = if temp == 1.0 {
                (tv.logprobs[tv.token], None)
            } else {
                log_softmax_into(tv.logits, temp, &mut lpt);
                (lpt[tv.token], Some(&lpt))
            };
            let ratio = (lp - r.per_token_logprob_old[tv.position]).exp();
            let surrogate = clipped_surrogate(ratio, adv, cfg.clip);
            let (slope, clipped) = surrogate_slope(ratio, adv, cfg.clip);

            let h = entropy_of(tv.probs);
            old.forward_into(r.problem_id, tv.context, flag, &mut hidden, &mut zq);
            log_softmax_into(&zq, 1.0, &mut lq);
            let kl: f64 = tv
                .probs
                .iter()
                .zip(tv.logprobs)
                .zip(&lq)
                .map(|((p, lp), lq)| if *p > 0.0 { p * (lp - lq) } else { 0.0 })
                .sum();

            sums.tokens += 1;
            sums.clipped += usize::from(clipped);
            sums.ratio += ratio;
            sums.entropy += h;
            sums.kl += kl;
            objective += w * (surrogate + cfg.entropy_coef * h - cfg.kl_coef * kl);

            let c = w * slope * ratio;
            let beta = w * cfg.entropy_coef;
            let kappa = w * cfg.kl_coef;
            if c == 0.0 && beta == 0.0 && kappa == 0.0 {
                return Ok(false);
            }
            // d ratio / d z = ratio · (onehot − p_T) / T
            if c != 0.0 {
                match probs_t {
                    None => {
                        for (d, p) in dl.iter_mut().zip(tv.probs) {
                            *d -= c * p;
                        }
                        dl[tv.token] += c;
                    }
                    Some(lpt) => {
                        let s = c / temp;
                        for (d, l) in dl.iter_mut().zip(lpt) {
                            *d -= s * l.exp();
                        }
                        dl[tv.token] += s;
                    }
                }
            }
            for (i, d) in dl.iter_mut().enumerate() {
                let p = tv.probs[i];
                let lp = tv.logprobs[i];
                if beta != 0.0 {
                    *d -= beta * p * (lp + h);
                }
                if kappa != 0.0 {
                    *d -= kappa * p * ((lp - lq[i]) - kl);
                }
            }
            Ok(true)
        })?;
    }
    Ok(GroupTerm {
        objective,
        grad,
        sums,
    })
}

/// Negated GRPO objective over a batch of groups, its gradient, and
/// diagnostics.
pub fn grpo_loss_and_grad(
    params: &PolicyParams,
    snapshot: &PolicySnapshot,
    groups: &[RolloutGroup],
    cfg: &LossConfig,
) -> Result<(f64, PolicyParams, Diagnostics)> {
    params.check_same_shape(snapshot.params())?;
    let weights = aggregation_weights(groups, cfg.aggregation);
    let terms = groups
        .iter()
        .zip(&weights)
        .map(|(g, w)| grpo_group_term(params, snapshot, g, w, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce_terms(params, terms))
}

/// Sums group terms in order and negates into a loss.
pub fn reduce_terms(
    params: &PolicyParams,
    terms: Vec<GroupTerm>,
) -> (f64, PolicyParams, Diagnostics) {
    let mut grad = params.zeros_like();
    let mut objective = 0.0;
    let mut sums = DiagnosticSums::default();
    for t in &terms {
        objective += t.objective;
        if !t.grad.is_zero() {
            grad.add_assign(&t.grad);
        }
        sums.merge(&t.sums);
    }
    if !grad.is_zero() {
        grad.scale(-1.0);
    }
    (-objective, grad, sums.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimMethod {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub method: OptimMethod,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimState {
    pub fn new(method: OptimMethod, learning_rate: f64, params: &PolicyParams) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(LabError::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        let n = match method {
            OptimMethod::Sgd => 0,
            OptimMethod::Adam => params.as_slice().len(),
        };
        Ok(OptimState {
            method,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        })
    }
}

/// One descent step on `grad` (the gradient of a loss).
pub fn optimizer_step(
    params: &mut PolicyParams,
    grad: &PolicyParams,
    state: &mut OptimState,
) -> Result<()> {
    params.check_same_shape(grad)?;
    if let Some(index) = grad.as_slice().iter().position(|g| !g.is_finite()) {
        return Err(LabError::NonFiniteGradient { index });
    }
    let lr = state.learning_rate;
    match state.method {
        OptimMethod::Sgd => {
            for (p, g) in params.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *p -= lr * g;
            }
        }
        OptimMethod::Adam => {
            if state.m.len() != grad.as_slice().len() {
                return Err(LabError::Shape("optimizer moments do not match params".into()));
            }
            state.step += 1;
            let (b1, b2) = (state.beta1, state.beta2);
            let bc1 = 1.0 - b1.powi(state.step as i32);
            let bc2 = 1.0 - b2.powi(state.step as i32);
            for (((p, g), m), v) in params
                .as_mut_slice()
                .iter_mut()
                .zip(grad.as_slice())
                .zip(state.m.iter_mut())
                .zip(state.v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + state.eps);
                if update != 0.0 {
                    *p -= lr * update;
                }
            }
        }
    }
    Ok(())
}

/// A supervised target sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftTarget {
    pub problem_id: usize,
    pub tokens: Vec<Token>,
    pub guidance_flag: u8,
}

impl SftTarget {
    fn as_rollout(&self) -> Rollout {
        Rollout {
            problem_id: self.problem_id,
            tokens: self.tokens.clone(),
            forced_prefix_len: 0,
            guidance_flag: self.guidance_flag,
            masked: false,
            per_token_logprob_old: vec![0.0; self.tokens.len()],
            logprob_temperature: 1.0,
            reward: 1,
        }
    }
}

/// Mean per-token negative log-likelihood of the targets and its gradient.
pub fn sft_loss_and_grad(
    params: &PolicyParams,
    targets: &[SftTarget],
) -> Result<(f64, PolicyParams)> {
    let total: usize = targets.iter().map(|t| t.tokens.len()).sum();
    let mut grad = params.zeros_like();
    if total == 0 {
        return Ok((0.0, grad));
    }
    let w = 1.0 / total as f64;
    let mut loss = 0.0;
    for t in targets {
        let r = t.as_rollout();
        policy::visit_free_positions(params, &r, Some(&mut grad), |tv, dl| {
            loss -= w * tv.logprobs[tv.token];
            for (d, p) in dl.iter_mut().zip(tv.probs) {
                *d = w * p;
            }
            dl[tv.token] -= w;
            Ok(true)
        })?;
    }
    Ok((loss, grad))
}

/// Samples up to `budget` rollouts guided by the first `prefix_len` oracle
/// tokens and returns the first successful full sequence.
pub fn rejection_sample_sft_targets(
    params: &PolicyParams,
    problem: &Problem,
    oracle: &OracleSolution,
    prefix_len: usize,
    budget: usize,
    temperature: f64,
    rng: &mut LabRng,
) -> Result<Option<Vec<Token>>> {
    if prefix_len > oracle.tokens.len() {
        return Err(LabError::Config(format!(
            "prefix length {prefix_len} exceeds oracle length {}",
            oracle.tokens.len()
        )));
    }
    let guidance = (prefix_len > 0).then(|| GuidanceSpec {
        problem_id: problem.id,
        prefix_tokens: oracle.tokens[..prefix_len].to_vec(),
        masked: false,
    });
    for _ in 0..budget {
        let r = policy::sample_rollout_with(
            params,
            problem,
            guidance.as_ref(),
            SamplingConfig::new(temperature),
            rng,
        )?;
        if r.reward == 1 {
            return Ok(Some(r.tokens));
        }
    }
    Ok(None)
}
