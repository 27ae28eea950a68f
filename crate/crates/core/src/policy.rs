//! Autoregressive token policy: one tanh hidden layer over
//! `[problem embedding, one-hot context window, guidance flag]`.
//!
//! Parameters live in one flat buffer so that gradients, optimizer moments
//! and checkpoints share a single layout:
//!
//! ```text
//! problem_embeddings  num_problems x embed_dim
//! hidden_weights      input_dim x hidden        (row k = fan-out of input k)
//! hidden_bias         hidden
//! output_weights      hidden x vocab
//! output_bias         vocab
//! ```
//!
//! The context window holds the last `context_order` tokens; positions before
//! the start of the episode (and masked guidance positions) are the start
//! symbol, encoded as an all-zero one-hot block.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{self, Problem, Token};
use crate::error::{LabError, Result};
use crate::pope::GuidanceSpec;
use crate::rng::LabRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyShape {
    pub num_problems: usize,
    pub embed_dim: usize,
    pub context_order: usize,
    pub vocab: usize,
    pub hidden: usize,
}

impl PolicyShape {
    pub fn new(num_problems: usize, vocab: usize) -> Self {
        PolicyShape {
            num_problems,
            embed_dim: 8,
            context_order: 1,
            vocab,
            hidden: 32,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.embed_dim + self.context_order * self.vocab + 1
    }

    fn sizes(&self) -> [usize; 5] {
        [
            self.num_problems * self.embed_dim,
            self.input_dim() * self.hidden,
            self.hidden,
            self.hidden * self.vocab,
            self.vocab,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.sizes().iter().sum()
    }

    fn offsets(&self) -> [usize; 6] {
        let s = self.sizes();
        let mut o = [0; 6];
        for i in 0..5 {
            o[i + 1] = o[i] + s[i];
        }
        o
    }

    fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.hidden == 0 || self.context_order == 0 {
            return Err(LabError::Shape(format!("degenerate policy shape {self:?}")));
        }
        Ok(())
    }
}

/// Policy parameters (also used as the gradient container).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    shape: PolicyShape,
    data: Vec<f64>,
}

/// Initialization ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub weight_range: f64,
    pub embedding_range: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            weight_range: 0.05,
            embedding_range: 0.5,
        }
    }
}

impl PolicyParams {
    pub fn zeros(shape: PolicyShape) -> Result<Self> {
        shape.validate()?;
        Ok(PolicyParams {
            shape,
            data: vec![0.0; shape.param_count()],
        })
    }

    pub fn zeros_like(&self) -> Self {
        PolicyParams {
            shape: self.shape,
            data: vec![0.0; self.data.len()],
        }
    }

    /// Weights i.i.d. uniform in `±weight_range`, biases zero, embeddings
    /// i.i.d. uniform in `±embedding_range`.
    pub fn init(shape: PolicyShape, cfg: &InitConfig, rng: &mut LabRng) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        let o = shape.offsets();
        let er = cfg.embedding_range;
        let wr = cfg.weight_range;
        for x in &mut p.data[o[0]..o[1]] {
            *x = if er > 0.0 { rng.gen_range(-er..=er) } else { 0.0 };
        }
        for x in &mut p.data[o[1]..o[2]] {
            *x = if wr > 0.0 { rng.gen_range(-wr..=wr) } else { 0.0 };
        }
        for x in &mut p.data[o[3]..o[4]] {
            *x = if wr > 0.0 { rng.gen_range(-wr..=wr) } else { 0.0 };
        }
        Ok(p)
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn problem_embeddings(&self) -> &[f64] {
        let o = self.shape.offsets();
        &self.data[o[0]..o[1]]
    }

    pub fn problem_embeddings_mut(&mut self) -> &mut [f64] {
        let o = self.shape.offsets();
        &mut self.data[o[0]..o[1]]
    }

    pub fn hidden_weights(&self) -> &[f64] {
        let o = self.shape.offsets();
        &self.data[o[1]..o[2]]
    }

    pub fn hidden_weights_mut(&mut self) -> &mut [f64] {
        let o = self.shape.offsets();
        &mut self.data[o[1]..o[2]]
    }

    pub fn hidden_bias(&self) -> &[f64] {
        let o = self.shape.offsets();
        &self.data[o[2]..o[3]]
    }

    pub fn output_weights(&self) -> &[f64] {
        let o = self.shape.offsets();
        &self.data[o[3]..o[4]]
    }

    pub fn output_weights_mut(&mut self) -> &mut [f64] {
        let o = self.shape.offsets();
        &mut self.data[o[3]..o[4]]
    }

    pub fn output_bias(&self) -> &[f64] {
        let o = self.shape.offsets();
        &self.data[o[4]..o[5]]
    }

    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let o = self.shape.offsets();
        &mut self.data[o[4]..o[5]]
    }

    pub fn check_same_shape(&self, other: &PolicyParams) -> Result<()> {
        if self.shape != other.shape {
            return Err(LabError::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &PolicyParams) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    fn check_problem(&self, problem_id: usize) -> Result<()> {
        if problem_id >= self.shape.num_problems {
            return Err(LabError::UnknownProblem(problem_id));
        }
        Ok(())
    }

    /// Forward pass for one position. `hidden` receives tanh activations and
    /// `logits` the output logits.
    pub(crate) fn forward_into(
        &self,
        problem_id: usize,
        context: &[Option<Token>],
        flag: f64,
        hidden: &mut [f64],
        logits: &mut [f64],
    ) {
        let s = &self.shape;
        let (h, v, d) = (s.hidden, s.vocab, s.embed_dim);
        let o = s.offsets();
        let w_in = &self.data[o[1]..o[2]];
        hidden.copy_from_slice(&self.data[o[2]..o[3]]);
        let emb = &self.data[o[0] + problem_id * d..o[0] + (problem_id + 1) * d];
        for (k, &x) in emb.iter().enumerate() {
            axpy(hidden, x, &w_in[k * h..(k + 1) * h]);
        }
        for (slot, tok) in context.iter().enumerate() {
            if let Some(t) = tok {
                let row = d + slot * v + t;
                add(hidden, &w_in[row * h..(row + 1) * h]);
            }
        }
        if flag != 0.0 {
            let row = s.input_dim() - 1;
            axpy(hidden, flag, &w_in[row * h..(row + 1) * h]);
        }
        hidden.iter_mut().for_each(|x| *x = x.tanh());
        let w_out = &self.data[o[3]..o[4]];
        logits.copy_from_slice(&self.data[o[4]..o[5]]);
        for (j, &a) in hidden.iter().enumerate() {
            axpy(logits, a, &w_out[j * v..(j + 1) * v]);
        }
    }

    /// Accumulates into `grad` the parameter gradient of a scalar whose
    /// derivative with respect to this position's logits is `dlogits`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward_into(
        &self,
        grad: &mut PolicyParams,
        problem_id: usize,
        context: &[Option<Token>],
        flag: f64,
        hidden: &[f64],
        dlogits: &[f64],
        dpre: &mut [f64],
    ) {
        let s = &self.shape;
        let (h, v, d) = (s.hidden, s.vocab, s.embed_dim);
        let o = s.offsets();
        let w_out = &self.data[o[3]..o[4]];
        let w_in = &self.data[o[1]..o[2]];
        let g = &mut grad.data;

        add(&mut g[o[4]..o[5]], dlogits);
        for j in 0..h {
            let row = &w_out[j * v..(j + 1) * v];
            let dh = dot(row, dlogits);
            axpy(&mut g[o[3] + j * v..o[3] + (j + 1) * v], hidden[j], dlogits);
            dpre[j] = dh * (1.0 - hidden[j] * hidden[j]);
        }
        add(&mut g[o[2]..o[3]], dpre);
        let emb_base = o[0] + problem_id * d;
        for k in 0..d {
            let x = self.data[emb_base + k];
            let w_row = &w_in[k * h..(k + 1) * h];
            g[emb_base + k] += dot(w_row, dpre);
            axpy(&mut g[o[1] + k * h..o[1] + (k + 1) * h], x, dpre);
        }
        for (slot, tok) in context.iter().enumerate() {
            if let Some(t) = tok {
                let row = d + slot * v + t;
                add(&mut g[o[1] + row * h..o[1] + (row + 1) * h], dpre);
            }
        }
        if flag != 0.0 {
            let row = s.input_dim() - 1;
            axpy(&mut g[o[1] + row * h..o[1] + (row + 1) * h], flag, dpre);
        }
    }

    /// Next-token probabilities (temperature 1) at one context.
    pub fn distribution(
        &self,
        problem_id: usize,
        context: &[Option<Token>],
        flag: f64,
    ) -> Result<Vec<f64>> {
        let mut z = logits(self, problem_id, context, flag)?;
        softmax_in_place(&mut z, 1.0);
        Ok(z)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            shape: self.shape,
            problem_embeddings: self.problem_embeddings().to_vec(),
            hidden_weights: self.hidden_weights().to_vec(),
            hidden_bias: self.hidden_bias().to_vec(),
            output_weights: self.output_weights().to_vec(),
            output_bias: self.output_bias().to_vec(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let mut p = Self::zeros(c.shape)?;
        let sizes = c.shape.sizes();
        let parts = [
            &c.problem_embeddings,
            &c.hidden_weights,
            &c.hidden_bias,
            &c.output_weights,
            &c.output_bias,
        ];
        let o = c.shape.offsets();
        for (i, part) in parts.iter().enumerate() {
            if part.len() != sizes[i] {
                return Err(LabError::Shape(format!(
                    "checkpoint tensor {i} has {} values, expected {}",
                    part.len(),
                    sizes[i]
                )));
            }
            p.data[o[i]..o[i + 1]].copy_from_slice(part);
        }
        if !p.is_finite() {
            return Err(LabError::Shape("checkpoint contains non-finite values".into()));
        }
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(&self.to_checkpoint()).map_err(|e| LabError::json("checkpoint", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint =
            serde_json::from_str(text).map_err(|e| LabError::json("checkpoint", e))?;
        Self::from_checkpoint(&c)
    }
}

/// JSON checkpoint: shape metadata plus flat row-major tensors. Values are
/// written in shortest round-trip decimal form, so loading reproduces every
/// parameter bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub shape: PolicyShape,
    pub problem_embeddings: Vec<f64>,
    pub hidden_weights: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    pub output_weights: Vec<f64>,
    pub output_bias: Vec<f64>,
}

/// Frozen sampling policy.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    params: Arc<PolicyParams>,
    step: usize,
}

impl PolicySnapshot {
    pub fn take(params: &PolicyParams, step: usize) -> Self {
        PolicySnapshot {
            params: Arc::new(params.clone()),
            step,
        }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub problem_id: usize,
    pub tokens: Vec<Token>,
    pub forced_prefix_len: usize,
    pub guidance_flag: u8,
    /// Guidance content hidden from the context window.
    pub masked: bool,
    pub per_token_logprob_old: Vec<f64>,
    /// Temperature at which `per_token_logprob_old` was recorded.
    pub logprob_temperature: f64,
    pub reward: u8,
}

impl Rollout {
    /// Context window seen at position `t`.
    pub fn context_at(&self, t: usize, order: usize, out: &mut [Option<Token>]) {
        context_window(&self.tokens, t, order, self.forced_prefix_len, self.masked, out);
    }

    pub fn flag(&self) -> f64 {
        f64::from(self.guidance_flag)
    }

    pub fn free_positions(&self) -> std::ops::Range<usize> {
        self.forced_prefix_len..self.tokens.len()
    }
}

pub(crate) fn context_window(
    tokens: &[Token],
    t: usize,
    order: usize,
    forced: usize,
    masked: bool,
    out: &mut [Option<Token>],
) {
    for (slot, c) in out.iter_mut().enumerate().take(order) {
        *c = if t > slot {
            let pos = t - 1 - slot;
            if masked && pos < forced {
                None
            } else {
                Some(tokens[pos])
            }
        } else {
            None
        };
    }
}

/// Output logits for one context.
pub fn logits(
    params: &PolicyParams,
    problem_id: usize,
    context: &[Option<Token>],
    guidance_flag: f64,
) -> Result<Vec<f64>> {
    params.check_problem(problem_id)?;
    let s = params.shape();
    if context.len() != s.context_order {
        return Err(LabError::Shape(format!(
            "context window of {} tokens, policy order {}",
            context.len(),
            s.context_order
        )));
    }
    if context.iter().flatten().any(|&t| t >= s.vocab) {
        return Err(LabError::Shape("context token outside vocab".into()));
    }
    let mut hidden = vec![0.0; s.hidden];
    let mut out = vec![0.0; s.vocab];
    params.forward_into(problem_id, context, guidance_flag, &mut hidden, &mut out);
    Ok(out)
}

/// In-place `softmax(z / temperature)`.
pub fn softmax_in_place(z: &mut [f64], temperature: f64) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in z.iter_mut() {
        *x = ((*x - max) / temperature).exp();
        sum += *x;
    }
    z.iter_mut().for_each(|x| *x /= sum);
}

/// `log_softmax(z / temperature)` into `out`.
pub fn log_softmax_into(z: &[f64], temperature: f64, out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|x| ((x - max) / temperature).exp()).sum::<f64>().ln();
    for (o, x) in out.iter_mut().zip(z) {
        *o = (x - max) / temperature - lse;
    }
}

pub fn entropy_of(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Sampling options beyond temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub temperature: f64,
    /// Record old log-probabilities at the sampling temperature instead of 1.
    pub ratio_uses_temperature: bool,
}

impl SamplingConfig {
    pub fn new(temperature: f64) -> Self {
        SamplingConfig {
            temperature,
            ratio_uses_temperature: false,
        }
    }
}

/// Samples one episode. Guided positions are forced to the oracle prefix;
/// free positions are drawn from `softmax(logits / temperature)`.
pub fn sample_rollout(
    params: &PolicyParams,
    problem: &Problem,
    guidance: Option<&GuidanceSpec>,
    temperature: f64,
    rng: &mut LabRng,
) -> Result<Rollout> {
    sample_rollout_with(params, problem, guidance, SamplingConfig::new(temperature), rng)
}

pub fn sample_rollout_with(
    params: &PolicyParams,
    problem: &Problem,
    guidance: Option<&GuidanceSpec>,
    cfg: SamplingConfig,
    rng: &mut LabRng,
) -> Result<Rollout> {
    if !(cfg.temperature > 0.0) {
        return Err(LabError::Config(format!(
            "temperature must be positive, got {}",
            cfg.temperature
        )));
    }
    params.check_problem(problem.id)?;
    let s = *params.shape();
    let episode = problem.episode_len;
    let (prefix, masked, flag): (&[Token], bool, u8) = match guidance {
        Some(g) => {
            if g.problem_id != problem.id {
                return Err(LabError::Config(format!(
                    "guidance for problem {} used on problem {}",
                    g.problem_id, problem.id
                )));
            }
            (&g.prefix_tokens, g.masked, 1)
        }
        None => (&[], false, 0),
    };
    if prefix.len() > episode {
        return Err(LabError::Config("guidance prefix longer than episode".into()));
    }
    let lp_temp = if cfg.ratio_uses_temperature {
        cfg.temperature
    } else {
        1.0
    };
    let mut tokens = Vec::with_capacity(episode);
    let mut logp_old = Vec::with_capacity(episode);
    let mut ctx = vec![None; s.context_order];
    let mut hidden = vec![0.0; s.hidden];
    let mut z = vec![0.0; s.vocab];
    let mut lp = vec![0.0; s.vocab];
    let mut probs = vec![0.0; s.vocab];
    for t in 0..episode {
        context_window(&tokens, t, s.context_order, prefix.len(), masked, &mut ctx);
        params.forward_into(problem.id, &ctx, f64::from(flag), &mut hidden, &mut z);
        let tok = if t < prefix.len() {
            prefix[t]
        } else {
            probs.copy_from_slice(&z);
            softmax_in_place(&mut probs, cfg.temperature);
            sample_index(&probs, rng)
        };
        log_softmax_into(&z, lp_temp, &mut lp);
        tokens.push(tok);
        logp_old.push(lp[tok].min(0.0));
    }
    let reward = envs::reward(problem, &tokens)?;
    Ok(Rollout {
        problem_id: problem.id,
        tokens,
        forced_prefix_len: prefix.len(),
        guidance_flag: flag,
        masked,
        per_token_logprob_old: logp_old,
        logprob_temperature: lp_temp,
        reward,
    })
}

fn sample_index(probs: &[f64], rng: &mut LabRng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the cumulative sum: take the last
    // token with nonzero mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Per-position quantities handed to a visitor during a gradient pass.
pub struct TokenView<'a> {
    pub position: usize,
    pub token: Token,
    pub context: &'a [Option<Token>],
    pub logits: &'a [f64],
    /// Temperature-1 probabilities.
    pub probs: &'a [f64],
    /// Temperature-1 log-probabilities.
    pub logprobs: &'a [f64],
}

/// Walks the free (non-forced) positions of a rollout. At each position the
/// visitor writes the derivative of its objective with respect to the
/// logits into `dlogits` and returns whether it is nonzero; nonzero
/// derivatives are backpropagated into `grad`.
pub fn visit_free_positions<F>(
    params: &PolicyParams,
    rollout: &Rollout,
    mut grad: Option<&mut PolicyParams>,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(&TokenView<'_>, &mut [f64]) -> Result<bool>,
{
    params.check_problem(rollout.problem_id)?;
    let s = *params.shape();
    if rollout.forced_prefix_len > rollout.tokens.len() {
        return Err(LabError::Shape("forced prefix longer than rollout".into()));
    }
    if rollout.tokens.iter().any(|&t| t >= s.vocab) {
        return Err(LabError::Shape("rollout token outside vocab".into()));
    }
    let flag = rollout.flag();
    let mut ctx = vec![None; s.context_order];
    let mut hidden = vec![0.0; s.hidden];
    let mut z = vec![0.0; s.vocab];
    let mut probs = vec![0.0; s.vocab];
    let mut lp = vec![0.0; s.vocab];
    let mut dl = vec![0.0; s.vocab];
    let mut dpre = vec![0.0; s.hidden];
    for t in rollout.free_positions() {
        rollout.context_at(t, s.context_order, &mut ctx);
        params.forward_into(rollout.problem_id, &ctx, flag, &mut hidden, &mut z);
        log_softmax_into(&z, 1.0, &mut lp);
        for (p, l) in probs.iter_mut().zip(&lp) {
            *p = l.exp();
        }
        dl.iter_mut().for_each(|x| *x = 0.0);
        let view = TokenView {
            position: t,
            token: rollout.tokens[t],
            context: &ctx,
            logits: &z,
            probs: &probs,
            logprobs: &lp,
        };
        let nonzero = visit(&view, &mut dl)?;
        if nonzero {
            if let Some(g) = grad.as_deref_mut() {
                params.backward_into(g, rollout.problem_id, &ctx, flag, &hidden, &dl, &mut dpre);
            }
        }
    }
    Ok(())
}

/// Per-token log-probabilities (temperature 1, all positions) and the
/// gradient of `sum_t coefficients[t] * logprob_t`. Forced positions must
/// carry a zero coefficient and contribute nothing.
pub fn logprob_and_grad(
    params: &PolicyParams,
    rollout: &Rollout,
    coefficients: &[f64],
) -> Result<(Vec<f64>, PolicyParams)> {
    if coefficients.len() != rollout.tokens.len() {
        return Err(LabError::EpisodeLength {
            expected: rollout.tokens.len(),
            got: coefficients.len(),
        });
    }
    if let Some(position) = coefficients[..rollout.forced_prefix_len]
        .iter()
        .position(|&c| c != 0.0)
    {
        return Err(LabError::ForcedCoefficient { position });
    }
    let mut grad = params.zeros_like();
    let mut logps = token_logprobs(params, rollout, 1.0)?;
    visit_free_positions(params, rollout, Some(&mut grad), |v, dl| {
        let c = coefficients[v.position];
        logps[v.position] = v.logprobs[v.token];
        if c == 0.0 {
            return Ok(false);
        }
        for (d, p) in dl.iter_mut().zip(v.probs) {
            *d = -c * p;
        }
        dl[v.token] += c;
        Ok(true)
    })?;
    Ok((logps, grad))
}

/// Log-probabilities of every emitted token (forced ones included) at the
/// given temperature.
pub fn token_logprobs(params: &PolicyParams, rollout: &Rollout, temperature: f64) -> Result<Vec<f64>> {
    params.check_problem(rollout.problem_id)?;
    let s = *params.shape();
    let flag = rollout.flag();
    let mut ctx = vec![None; s.context_order];
    let mut hidden = vec![0.0; s.hidden];
    let mut z = vec![0.0; s.vocab];
    let mut lp = vec![0.0; s.vocab];
    let mut out = Vec::with_capacity(rollout.tokens.len());
    for (t, &tok) in rollout.tokens.iter().enumerate() {
        rollout.context_at(t, s.context_order, &mut ctx);
        params.forward_into(rollout.problem_id, &ctx, flag, &mut hidden, &mut z);
        log_softmax_into(&z, temperature, &mut lp);
        out.push(lp[tok]);
    }
    Ok(out)
}

/// Mean Shannon entropy of the next-token distribution over all free
/// positions of the given rollouts.
pub fn mean_token_entropy(params: &PolicyParams, rollouts: &[Rollout]) -> Result<f64> {
    if rollouts.is_empty() {
        return Err(LabError::Config("mean_token_entropy needs rollouts".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for r in rollouts {
        visit_free_positions(params, r, None, |v, _| {
            total += entropy_of(v.probs);
            count += 1;
            Ok(false)
        })?;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn add(y: &mut [f64], x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Difficulty, Problem};
    use crate::rng::seeded;

    fn problem(id: usize, secret: Vec<Token>) -> Problem {
        let episode_len = secret.len();
        Problem {
            id,
            secret,
            difficulty_class: Difficulty::Hard,
            relatedness_tag: None,
            unrelated_to: None,
            episode_len,
        }
    }

    fn random_params(seed: u64, problems: usize) -> PolicyParams {
        let shape = PolicyShape {
            num_problems: problems,
            embed_dim: 4,
            context_order: 1,
            vocab: 6,
            hidden: 5,
        };
        let cfg = InitConfig {
            weight_range: 0.8,
            embedding_range: 0.8,
        };
        PolicyParams::init(shape, &cfg, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn zero_params_give_uniform_max_entropy() {
        let p = PolicyParams::zeros(PolicyShape::new(2, 16)).unwrap();
        let z = logits(&p, 1, &[Some(3)], 1.0).unwrap();
        assert!(z.iter().all(|&x| x == 0.0));
        let prob = problem(0, vec![1, 2, 3, 4, 5, 6, 7, 8]);
        let r = sample_rollout(&p, &prob, None, 0.8, &mut seeded(0)).unwrap();
        let h = mean_token_entropy(&p, &[r]).unwrap();
        assert!((h - 16f64.ln()).abs() < 1e-12);
        assert!((h - 2.772588722239781).abs() < 1e-12);
    }

    #[test]
    fn embedding_perturbation_is_isolated_when_embedding_rows_are_zero() {
        let mut p = random_params(3, 2);
        let s = *p.shape();
        let rows = s.embed_dim * s.hidden;
        p.hidden_weights_mut()[..rows].iter_mut().for_each(|w| *w = 0.0);
        let before = logits(&p, 1, &[Some(2)], 0.0).unwrap();
        p.problem_embeddings_mut()[..s.embed_dim]
            .iter_mut()
            .for_each(|e| *e += 1.5);
        let after = logits(&p, 1, &[Some(2)], 0.0).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn unknown_problem_is_an_error() {
        let p = random_params(0, 2);
        assert!(matches!(
            logits(&p, 5, &[None], 0.0),
            Err(LabError::UnknownProblem(5))
        ));
    }

    #[test]
    fn softmax_normalizes() {
        let p = random_params(9, 2);
        for t in 0..6 {
            let probs = p.distribution(1, &[Some(t)], 1.0).unwrap();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_guidance_forces_success() {
        let p = PolicyParams::zeros(PolicyShape::new(1, 16)).unwrap();
        let prob = problem(0, vec![1, 2, 3, 4, 5, 6, 7, 8]);
        let g = GuidanceSpec {
            problem_id: 0,
            prefix_tokens: prob.secret.clone(),
            masked: false,
        };
        for seed in 0..10 {
            let r = sample_rollout(&p, &prob, Some(&g), 0.8, &mut seeded(seed)).unwrap();
            assert_eq!(r.reward, 1);
            assert_eq!(r.forced_prefix_len, 8);
            assert_eq!(r.guidance_flag, 1);
            assert!(r.per_token_logprob_old.iter().all(|&l| l <= 0.0 && l.is_finite()));
        }
    }

    #[test]
    fn low_temperature_samples_argmax() {
        let p = random_params(4, 1);
        let prob = problem(0, vec![0, 1, 2, 3]);
        let r = sample_rollout(&p, &prob, None, 1e-6, &mut seeded(2)).unwrap();
        for t in 0..4 {
            let mut ctx = [None];
            r.context_at(t, 1, &mut ctx);
            let z = logits(&p, 0, &ctx, 0.0).unwrap();
            let best = (0..z.len())
                .max_by(|&a, &b| z[a].partial_cmp(&z[b]).unwrap())
                .unwrap();
            assert_eq!(r.tokens[t], best);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let p = random_params(4, 1);
        let prob = problem(0, vec![0, 1, 2, 3]);
        let a = sample_rollout(&p, &prob, None, 0.8, &mut seeded(17)).unwrap();
        let b = sample_rollout(&p, &prob, None, 0.8, &mut seeded(17)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_coefficients_give_zero_gradient() {
        let p = random_params(1, 1);
        let prob = problem(0, vec![0, 1, 2, 3]);
        let r = sample_rollout(&p, &prob, None, 1.0, &mut seeded(1)).unwrap();
        let (lp, g) = logprob_and_grad(&p, &r, &[0.0; 4]).unwrap();
        assert!(g.is_zero());
        for (a, b) in lp.iter().zip(&r.per_token_logprob_old) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forced_positions_reject_coefficients_and_carry_no_gradient() {
        let p = random_params(2, 1);
        let prob = problem(0, vec![0, 1, 2, 3]);
        let g = GuidanceSpec {
            problem_id: 0,
            prefix_tokens: vec![0, 1],
            masked: false,
        };
        let r = sample_rollout(&p, &prob, Some(&g), 1.0, &mut seeded(1)).unwrap();
        assert!(matches!(
            logprob_and_grad(&p, &r, &[0.0, 1.0, 1.0, 1.0]),
            Err(LabError::ForcedCoefficient { position: 1 })
        ));
        let (_, grad_free) = logprob_and_grad(&p, &r, &[0.0, 0.0, 1.0, 1.0]).unwrap();
        let mut only_forced = r.clone();
        only_forced.forced_prefix_len = 4;
        let (_, grad_none) = logprob_and_grad(&p, &only_forced, &[0.0; 4]).unwrap();
        assert!(grad_none.as_slice().iter().all(|&x| x.to_bits() == 0));
        assert!(!grad_free.is_zero());
    }

    fn finite_difference_check(p: &PolicyParams, rollouts: &[Rollout], coefs: &[Vec<f64>]) {
        let objective = |q: &PolicyParams| -> f64 {
            rollouts
                .iter()
                .zip(coefs)
                .map(|(r, c)| {
                    let lp = token_logprobs(q, r, 1.0).unwrap();
                    lp.iter().zip(c).map(|(l, c)| l * c).sum::<f64>()
                })
                .sum()
        };
        let mut analytic = p.zeros_like();
        for (r, c) in rollouts.iter().zip(coefs) {
            let (_, g) = logprob_and_grad(p, r, c).unwrap();
            analytic.add_assign(&g);
        }
        let h = 1e-5;
        for i in 0..p.as_slice().len() {
            let mut plus = p.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = p.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let a = analytic.as_slice()[i];
            if a.abs() > 1e-8 || fd.abs() > 1e-8 {
                let rel = (a - fd).abs() / a.abs().max(fd.abs());
                assert!(rel < 1e-4, "param {i}: analytic {a} fd {fd}");
            }
        }
    }

    #[test]
    fn logprob_gradient_matches_finite_differences_on_twenty_seeds() {
        for seed in 0..20 {
            let p = random_params(100 + seed, 2);
            let prob = problem(1, vec![0, 1, 2, 3, 4]);
            let mut rng = seeded(seed);
            let guidance = GuidanceSpec {
                problem_id: 1,
                prefix_tokens: vec![0],
                masked: seed % 2 == 0,
            };
            let rollouts: Vec<Rollout> = (0..2)
                .map(|i| {
                    let g = (i == 1).then_some(&guidance);
                    sample_rollout(&p, &prob, g, 1.0, &mut rng).unwrap()
                })
                .collect();
            let coefs: Vec<Vec<f64>> = rollouts
                .iter()
                .map(|r| {
                    (0..5)
                        .map(|t| {
                            if t < r.forced_prefix_len {
                                0.0
                            } else {
                                rng.gen_range(-1.0..1.0)
                            }
                        })
                        .collect()
                })
                .collect();
            finite_difference_check(&p, &rollouts, &coefs);
        }
    }

    #[test]
    fn gradient_is_linear_over_a_group() {
        let p = random_params(8, 1);
        let prob = problem(0, vec![0, 1, 2]);
        let mut rng = seeded(3);
        let rs: Vec<Rollout> = (0..4)
            .map(|_| sample_rollout(&p, &prob, None, 1.0, &mut rng).unwrap())
            .collect();
        let mut sum = p.zeros_like();
        for r in &rs {
            sum.add_assign(&logprob_and_grad(&p, r, &[1.0; 3]).unwrap().1);
        }
        let mut joint = p.zeros_like();
        for r in &rs {
            visit_free_positions(&p, r, Some(&mut joint), |v, dl| {
                for (d, q) in dl.iter_mut().zip(v.probs) {
                    *d = -q;
                }
                dl[v.token] += 1.0;
                Ok(true)
            })
            .unwrap();
        }
        for (a, b) in sum.as_slice().iter().zip(joint.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn near_deterministic_policy_has_near_zero_entropy() {
        let mut p = PolicyParams::zeros(PolicyShape::new(1, 16)).unwrap();
        p.output_bias_mut()[5] = 60.0;
        let prob = problem(0, vec![5, 5]);
        let r = sample_rollout(&p, &prob, None, 1.0, &mut seeded(0)).unwrap();
        let h = mean_token_entropy(&p, &[r]).unwrap();
        assert!((0.0..1e-20).contains(&h));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = random_params(5, 3);
        let back = PolicyParams::from_json(&p.to_json().unwrap()).unwrap();
        for (a, b) in p.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let mut c = p.to_checkpoint();
        c.output_bias.pop();
        assert!(PolicyParams::from_checkpoint(&c).is_err());
    }
}
