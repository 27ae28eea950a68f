use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method, PretrainConfig};
use super::metrics::{export_trajectory, MetricsRecord, MetricsSink};
use super::parallel_map;
use crate::envs::{self, Difficulty, Problem, ProblemSuite};
use crate::error::{LabError, Result};
use crate::passk;
use crate::policy::{
    self, Checkpoint, PolicyParams, PolicyShape, PolicySnapshot, Rollout, SamplingConfig,
};
use crate::pope::{
    build_guided_set, fixed_guided_set, guided_set_to_json, mixture_sampler, GuidedProblem, Pool,
    SelectionRecord,
};
use crate::rlcore::{
    self, aggregation_weights, optimizer_step, DiagnosticSums, Diagnostics, GroupTerm,
    OptimMethod, OptimState, RolloutGroup, SftTarget,
};
use crate::rng::{stream, Stream};

/// Mutable training state.
pub struct RunState {
    pub step: usize,
    pub params: PolicyParams,
    pub snapshot: PolicySnapshot,
    pub optim: OptimState,
}

/// Everything a finished run produced.
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub params: PolicyParams,
    pub optim: OptimState,
    pub step: usize,
    pub suite: ProblemSuite,
    pub guided: Vec<GuidedProblem>,
    pub selection: Vec<SelectionRecord>,
    pub sft_targets: usize,
}

impl RunOutput {
    pub fn last(&self) -> &MetricsRecord {
        self.records.last().expect("a run always emits at least one record")
    }
}

/// Saved training checkpoint: policy plus optimizer state and step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunCheckpoint {
    pub step: usize,
    pub policy: Checkpoint,
    pub optimizer: OptimState,
}

impl RunCheckpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| LabError::json(path.display().to_string(), e))
    }
}

/// Solvability of a problem set at several k.
#[derive(Debug, Clone, PartialEq)]
pub struct Solvability {
    pub per_problem: Vec<f64>,
    pub fraction: f64,
}

/// Per-problem pass@k estimates and solvable fractions from `n` unguided
/// samples per problem.
pub fn eval_solvability(
    params: &PolicyParams,
    problems: &[Problem],
    n: usize,
    k_list: &[usize],
    temperature: f64,
    seed: u64,
) -> Result<BTreeMap<usize, Solvability>> {
    let counts = problems
        .iter()
        .map(|p| {
            let mut rng = stream(seed, Stream::Eval, &[p.id as u64]);
            let c = (0..n)
                .map(|_| policy::sample_rollout(params, p, None, temperature, &mut rng).map(|r| r.reward as usize))
                .sum::<Result<usize>>()?;
            Ok(c)
        })
        .collect::<Result<Vec<usize>>>()?;
    solvability_from_counts(&counts, n, k_list)
}

fn solvability_from_counts(
    counts: &[usize],
    n: usize,
    k_list: &[usize],
) -> Result<BTreeMap<usize, Solvability>> {
    k_list
        .iter()
        .map(|&k| {
            let per_problem = counts
                .iter()
                .map(|&c| passk::passk_estimate(n, c, k))
                .collect::<Result<Vec<f64>>>()?;
            let fraction = if per_problem.is_empty() {
                0.0
            } else {
                per_problem.iter().filter(|&&r| r > 0.0).count() as f64 / per_problem.len() as f64
            };
            Ok((k, Solvability { per_problem, fraction }))
        })
        .collect()
}

/// Supervised pretraining on grammar walks, tagged with random problem ids
/// and guidance flags, so that the base policy knows the successor grammar
/// but no secret beyond, with probability `start_hint`, its first token.
pub fn pretrain_base(
    suite: &ProblemSuite,
    params: &mut PolicyParams,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<()> {
    let mut opt = OptimState::new(OptimMethod::Adam, cfg.learning_rate, params)?;
    let num_problems = suite.problems.len();
    for step in 0..cfg.steps {
        let mut rng = stream(seed, Stream::Pretrain, &[step as u64]);
        let targets: Vec<SftTarget> = (0..cfg.batch_size)
            .map(|_| {
                let problem_id = rng.gen_range(0..num_problems);
                let start = rng
                    .gen_bool(cfg.start_hint)
                    .then(|| suite.problems[problem_id].secret[0]);
                SftTarget {
                    problem_id,
                    tokens: suite.random_walk(problem_id, start, &mut rng),
                    guidance_flag: rng.gen_range(0..2),
                }
            })
            .collect();
        let (_, grad) = rlcore::sft_loss_and_grad(params, &targets)?;
        optimizer_step(params, &grad, &mut opt)?;
    }
    Ok(())
}

/// A prompt variant in a training batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Variant {
    Unguided(usize),
    Guided(usize),
}

struct Pools {
    map: BTreeMap<Pool, Vec<Variant>>,
}

impl Pools {
    fn new(suite: &ProblemSuite, guided: &[GuidedProblem]) -> Self {
        let mut map = BTreeMap::new();
        map.insert(
            Pool::Hard,
            suite.ids_of(Difficulty::Hard).into_iter().map(Variant::Unguided).collect(),
        );
        let easy: Vec<Variant> = suite
            .problems
            .iter()
            .filter(|p| p.difficulty_class != Difficulty::Hard)
            .map(|p| Variant::Unguided(p.id))
            .collect();
        map.insert(Pool::Easy, easy);
        map.insert(Pool::Guided, (0..guided.len()).map(Variant::Guided).collect());
        Pools { map }
    }
}

/// Running means of training reward per pool between evaluations.
#[derive(Default)]
struct RewardMeans {
    sums: BTreeMap<Pool, (f64, usize)>,
}

impl RewardMeans {
    fn add(&mut self, pool: Pool, r: f64) {
        let e = self.sums.entry(pool).or_insert((0.0, 0));
        e.0 += r;
        e.1 += 1;
    }

    fn take(&mut self, pool: Pool) -> Option<f64> {
        self.sums.remove(&pool).map(|(s, n)| s / n as f64)
    }
}

struct StepStats {
    loss: f64,
    diag: Diagnostics,
    grad_norm: f64,
    nonzero_groups: usize,
}

impl StepStats {
    fn initial() -> Self {
        StepStats {
            loss: 0.0,
            diag: Diagnostics {
                mean_ratio: 1.0,
                ..Diagnostics::default()
            },
            grad_norm: 0.0,
            nonzero_groups: 0,
        }
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    suite: ProblemSuite,
    guided: Vec<GuidedProblem>,
    sink: MetricsSink,
    records: Vec<MetricsRecord>,
    out_dir: Option<&'a Path>,
}

/// The suite and base policy a run starts from. Methods that share the
/// suite, policy, base and seed settings can share one of these.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub suite: ProblemSuite,
    pub base: PolicyParams,
}

/// Builds (or loads) the suite and pretrains the base policy.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let seed = cfg.seed;
    let suite = match &cfg.suite_path {
        Some(p) => ProblemSuite::load(p)?,
        None => envs::make_suite(&cfg.suite, &mut stream(seed, Stream::Suite, &[]))?,
    };
    let shape = PolicyShape {
        num_problems: suite.problems.len(),
        embed_dim: cfg.policy.embed_dim,
        context_order: cfg.policy.context_order,
        vocab: suite.vocab.size,
        hidden: cfg.policy.hidden,
    };
    let mut base = PolicyParams::init(shape, &cfg.policy.init, &mut stream(seed, Stream::Init, &[]))?;
    if let Some(b) = &cfg.base {
        pretrain_base(&suite, &mut base, b, seed)?;
    }
    Ok(Prepared { suite, base })
}

/// Runs one experiment end to end. When `out_dir` is given, writes
/// `metrics.jsonl`, `checkpoint.json`, `suite.json`, `trajectory.csv` and,
/// for guided methods, `guided_set.json`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    run_prepared(cfg, &prepared, out_dir)
}

/// Like [`run_experiment`] but starting from an existing suite and base,
/// which must have been prepared from the same suite, policy, base and
/// seed settings as `cfg`.
pub fn run_prepared(cfg: &ExperimentConfig, prepared: &Prepared, out_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let seed = cfg.seed;
    let suite = prepared.suite.clone();
    let shape = prepared.base.shape();
    if shape.num_problems != suite.problems.len()
        || shape.embed_dim != cfg.policy.embed_dim
        || shape.context_order != cfg.policy.context_order
        || shape.hidden != cfg.policy.hidden
    {
        return Err(LabError::Shape(format!(
            "prepared base {shape:?} does not match the config"
        )));
    }
    check_pools(cfg, &suite)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        suite.save(&dir.join("suite.json"))?;
    }
    let mut params = prepared.base.clone();

    let needs_guidance = cfg.method.is_pope()
        || matches!(cfg.method, Method::SftRejectionPrefix | Method::SftThenRl);
    let mut suite = suite;
    let (guided, selection) = if needs_guidance {
        let masked = cfg.method == Method::PopeMasked;
        match cfg.fixed_prefix_len {
            Some(l) => (fixed_guided_set(&suite, l, masked)?, Vec::new()),
            None => build_guided_set(
                &mut suite,
                &params,
                &cfg.selection,
                masked,
                &mut stream(seed, Stream::PrefixSelect, &[]),
            )?,
        }
    } else {
        (Vec::new(), Vec::new())
    };
    if let Some(dir) = out_dir {
        if !selection.is_empty() {
            let path = dir.join("guided_set.json");
            std::fs::write(&path, guided_set_to_json(&selection)?).map_err(|e| LabError::io(&path, e))?;
        }
    }

    let sink = match out_dir {
        Some(dir) => MetricsSink::create(&dir.join("metrics.jsonl"))?,
        None => MetricsSink::memory(),
    };
    let mut runner = Runner {
        cfg,
        suite,
        guided,
        sink,
        records: Vec::new(),
        out_dir,
    };

    let mut step = 0;
    let mut sft_targets = 0;
    if cfg.method.has_sft_phase() {
        let targets = runner.sft_targets(&params)?;
        sft_targets = targets.len();
        let steps = if cfg.method.has_rl_phase() {
            cfg.sft.steps
        } else {
            cfg.total_steps
        };
        step = runner.sft_phase(&mut params, &targets, steps)?;
    }

    let mut optim = OptimState::new(cfg.optimizer.method, cfg.optimizer.learning_rate, &params)?;
    if cfg.method.has_rl_phase() {
        let mut state = RunState {
            step,
            snapshot: PolicySnapshot::take(&params, step),
            params,
            optim,
        };
        runner.rl_phase(&mut state)?;
        params = state.params;
        optim = state.optim;
        step = state.step;
    }

    if let Some(dir) = out_dir {
        let ck = RunCheckpoint {
            step,
            policy: params.to_checkpoint(),
            optimizer: optim.clone(),
        };
        let path = dir.join("checkpoint.json");
        let text = serde_json::to_string(&ck).map_err(|e| LabError::json("checkpoint", e))?;
        std::fs::write(&path, text).map_err(|e| LabError::io(&path, e))?;
        let k = cfg.eval_k[0];
        let path = dir.join("trajectory.csv");
        std::fs::write(&path, export_trajectory(&runner.records, k)).map_err(|e| LabError::io(&path, e))?;
    }

    Ok(RunOutput {
        records: runner.records,
        params,
        optim,
        step,
        suite: runner.suite,
        guided: runner.guided,
        selection,
        sft_targets,
    })
}

fn check_pools(cfg: &ExperimentConfig, suite: &ProblemSuite) -> Result<()> {
    let hard = suite.ids_of(Difficulty::Hard).len();
    let easy = suite.problems.len() - hard;
    if (cfg.pool_weight(Pool::Hard) > 0.0 || cfg.pool_weight(Pool::Guided) > 0.0) && hard == 0 {
        return Err(LabError::Config("hard or guided pool but the suite has no hard problems".into()));
    }
    if cfg.pool_weight(Pool::Easy) > 0.0 && easy == 0 {
        return Err(LabError::Config("easy pool but the suite has no easy problems".into()));
    }
    if cfg.method.has_sft_phase() && hard == 0 {
        return Err(LabError::Config("SFT methods need hard problems".into()));
    }
    Ok(())
}

impl<'a> Runner<'a> {
    fn sft_targets(&self, params: &PolicyParams) -> Result<Vec<SftTarget>> {
        let cfg = self.cfg;
        match cfg.method {
            Method::SftFull => self
                .suite
                .by_class(Difficulty::Hard)
                .map(|p| {
                    Ok(SftTarget {
                        problem_id: p.id,
                        tokens: self.suite.oracle(p.id)?.padded(p.episode_len),
                        guidance_flag: 0,
                    })
                })
                .collect(),
            _ => {
                let mut targets = Vec::new();
                for g in &self.guided {
                    let oracle = self.suite.oracle(g.base.id)?;
                    let mut rng = stream(cfg.seed, Stream::Rejection, &[g.base.id as u64]);
                    if let Some(tokens) = rlcore::rejection_sample_sft_targets(
                        params,
                        &g.base,
                        oracle,
                        g.guidance.prefix_tokens.len(),
                        cfg.sft.rejection_budget,
                        cfg.temperature,
                        &mut rng,
                    )? {
                        targets.push(SftTarget {
                            problem_id: g.base.id,
                            tokens,
                            guidance_flag: 0,
                        });
                    }
                }
                Ok(targets)
            }
        }
    }

    fn sft_phase(&mut self, params: &mut PolicyParams, targets: &[SftTarget], steps: usize) -> Result<usize> {
        let cfg = self.cfg;
        let mut opt = OptimState::new(OptimMethod::Adam, cfg.sft.learning_rate, params)?;
        let mut stats = StepStats::initial();
        self.emit(params, 0, "sft", &mut RewardMeans::default(), &stats)?;
        for step in 0..steps {
            let (loss, grad) = if targets.is_empty() {
                (0.0, params.zeros_like())
            } else {
                rlcore::sft_loss_and_grad(params, targets)?
            };
            if !loss.is_finite() {
                return Err(LabError::NonFiniteLoss {
                    step,
                    detail: "SFT loss".into(),
                });
            }
            optimizer_step(params, &grad, &mut opt)?;
            stats = StepStats {
                loss,
                grad_norm: grad.norm(),
                ..StepStats::initial()
            };
            let done = step + 1;
            if done % cfg.eval_interval == 0 || done == steps {
                self.emit(params, done, "sft", &mut RewardMeans::default(), &stats)?;
            }
        }
        Ok(steps)
    }

    fn rl_phase(&mut self, state: &mut RunState) -> Result<()> {
        let cfg = self.cfg;
        let pools = Pools::new(&self.suite, &self.guided);
        let mut means = RewardMeans::default();
        let start = state.step;
        let rl_start_record = self.records.last().map(|r| r.step) != Some(start);
        if rl_start_record {
            self.emit(&state.params, start, "rl", &mut means, &StepStats::initial())?;
        }
        for i in 0..cfg.total_steps {
            let stats = self.rl_step(state, &pools, &mut means)?;
            if (i + 1) % cfg.snapshot_interval == 0 {
                state.snapshot = PolicySnapshot::take(&state.params, state.step);
            }
            if (i + 1) % cfg.eval_interval == 0 || i + 1 == cfg.total_steps {
                self.emit(&state.params, state.step, "rl", &mut means, &stats)?;
            }
        }
        Ok(())
    }

    fn rl_step(&mut self, state: &mut RunState, pools: &Pools, means: &mut RewardMeans) -> Result<StepStats> {
        let cfg = self.cfg;
        let seed = cfg.seed;
        let step = state.step;
        let batch = mixture_sampler(
            &cfg.mixture,
            &pools.map,
            &mut stream(seed, Stream::Mixture, &[step as u64]),
        )?;
        let sampling = SamplingConfig {
            temperature: cfg.temperature,
            ratio_uses_temperature: cfg.ratio_uses_temperature,
        };
        let snapshot = &state.snapshot;
        let suite = &self.suite;
        let guided = &self.guided;
        let groups = parallel_map(cfg.workers, &batch, |slot, (_, variant)| {
            let mut rng = stream(seed, Stream::Rollout, &[step as u64, slot as u64]);
            let (problem, guidance) = match *variant {
                Variant::Unguided(id) => (suite.problem(id)?, None),
                Variant::Guided(i) => (&guided[i].base, Some(&guided[i].guidance)),
            };
            let rollouts = (0..cfg.rollouts_per_prompt)
                .map(|_| policy::sample_rollout_with(snapshot.params(), problem, guidance, sampling, &mut rng))
                .collect::<Result<Vec<Rollout>>>()?;
            RolloutGroup::new(rollouts)
        })
        .into_iter()
        .collect::<Result<Vec<RolloutGroup>>>()?;

        for ((pool, _), g) in batch.iter().zip(&groups) {
            means.add(*pool, g.mean_reward());
        }
        let nonzero_groups = groups
            .iter()
            .filter(|g| g.advantages.iter().any(|&a| a != 0.0))
            .count();

        let params = &state.params;
        let terms: Vec<GroupTerm> = match cfg.method {
            Method::PassK(k) => {
                let scale = 1.0 / groups.len() as f64;
                parallel_map(cfg.workers, &groups, |_, g| {
                    let (loss, mut grad) = passk::group_loss_and_grad(params, g, k)?;
                    if !grad.is_zero() {
                        grad.scale(-scale);
                    }
                    Ok(GroupTerm {
                        objective: -loss * scale,
                        grad,
                        sums: DiagnosticSums::default(),
                    })
                })
                .into_iter()
                .collect::<Result<_>>()?
            }
            _ => {
                let weights = aggregation_weights(&groups, cfg.loss.aggregation);
                let items: Vec<(&RolloutGroup, &Vec<f64>)> = groups.iter().zip(&weights).collect();
                parallel_map(cfg.workers, &items, |_, (g, w)| {
                    rlcore::grpo_group_term(params, snapshot, g, w, &cfg.loss)
                })
                .into_iter()
                .collect::<Result<_>>()?
            }
        };
        // Reduce in ascending (problem id, slot) order.
        let mut order: Vec<usize> = (0..terms.len()).collect();
        order.sort_by_key(|&i| (groups[i].problem_id, i));
        let mut terms: Vec<Option<GroupTerm>> = terms.into_iter().map(Some).collect();
        let ordered: Vec<GroupTerm> = order.iter().map(|&i| terms[i].take().unwrap()).collect();
        let (loss, grad, mut diag) = rlcore::reduce_terms(params, ordered);
        if matches!(cfg.method, Method::PassK(_)) {
            diag.mean_ratio = 1.0;
        }

        if !loss.is_finite() {
            self.dump_batch(step, &groups)?;
            return Err(LabError::NonFiniteLoss {
                step,
                detail: format!("loss {loss} over {} groups", groups.len()),
            });
        }
        optimizer_step(&mut state.params, &grad, &mut state.optim)?;
        state.step += 1;
        Ok(StepStats {
            loss,
            diag,
            grad_norm: grad.norm(),
            nonzero_groups,
        })
    }

    fn dump_batch(&self, step: usize, groups: &[RolloutGroup]) -> Result<()> {
        if let Some(dir) = self.out_dir {
            let dump: Vec<&Vec<Rollout>> = groups.iter().map(|g| &g.rollouts).collect();
            let path = dir.join(format!("failed_batch_step{step}.json"));
            let text = serde_json::to_string(&dump).map_err(|e| LabError::json("batch dump", e))?;
            std::fs::write(&path, text).map_err(|e| LabError::io(&path, e))?;
        }
        Ok(())
    }

    fn emit(
        &mut self,
        params: &PolicyParams,
        step: usize,
        phase: &str,
        means: &mut RewardMeans,
        stats: &StepStats,
    ) -> Result<()> {
        let cfg = self.cfg;
        let ev = evaluate(cfg, &self.suite, &self.guided, params, step)?;
        let record = MetricsRecord {
            step,
            phase: phase.to_string(),
            per_problem_success: ev.pass1,
            j_easy: means.take(Pool::Easy),
            j_hard: means.take(Pool::Hard),
            j_guided: means.take(Pool::Guided),
            solvable_fraction: ev.solvable,
            guided_solvable_fraction: ev.guided_solvable,
            mean_token_entropy: ev.entropy,
            loss: stats.loss,
            clip_fraction: stats.diag.clip_fraction,
            mean_ratio: stats.diag.mean_ratio,
            mean_kl: stats.diag.mean_kl,
            grad_norm: stats.grad_norm,
            nonzero_groups: stats.nonzero_groups,
        };
        record.check(self.suite.vocab.size)?;
        self.sink.append(&record)?;
        self.records.push(record);
        Ok(())
    }
}

/// Rollouts per problem used for the entropy estimate at each evaluation.
const ENTROPY_ROLLOUTS: usize = 8;

struct EvalResult {
    pass1: BTreeMap<usize, f64>,
    solvable: BTreeMap<usize, f64>,
    guided_solvable: Option<BTreeMap<usize, f64>>,
    entropy: f64,
}

fn evaluate(
    cfg: &ExperimentConfig,
    suite: &ProblemSuite,
    guided: &[GuidedProblem],
    params: &PolicyParams,
    step: usize,
) -> Result<EvalResult> {
    let n = cfg.eval_n;
    let temp = cfg.eval_temperature;
    // (successes, entropy sum, entropy positions) per problem.
    let per_problem = parallel_map(cfg.workers, &suite.problems, |_, p| {
        let mut rng = stream(cfg.seed, Stream::Eval, &[step as u64, p.id as u64, 0]);
        let mut c = 0;
        let mut ent = 0.0;
        for i in 0..n {
            let r = policy::sample_rollout(params, p, None, temp, &mut rng)?;
            c += r.reward as usize;
            if i < ENTROPY_ROLLOUTS {
                ent += policy::mean_token_entropy(params, std::slice::from_ref(&r))?;
            }
        }
        Ok((c, ent / n.min(ENTROPY_ROLLOUTS) as f64))
    })
    .into_iter()
    .collect::<Result<Vec<(usize, f64)>>>()?;

    let pass1 = suite
        .problems
        .iter()
        .zip(&per_problem)
        .map(|(p, (c, _))| (p.id, *c as f64 / n as f64))
        .collect();
    let hard_counts: Vec<usize> = suite
        .problems
        .iter()
        .zip(&per_problem)
        .filter(|(p, _)| p.difficulty_class == Difficulty::Hard)
        .map(|(_, (c, _))| *c)
        .collect();
    let solvable = solvability_from_counts(&hard_counts, n, &cfg.eval_k)?
        .into_iter()
        .map(|(k, s)| (k, s.fraction))
        .collect();
    let entropy = per_problem.iter().map(|(_, h)| h).sum::<f64>() / per_problem.len() as f64;

    let guided_solvable = if cfg.method.is_pope() {
        let counts = parallel_map(cfg.workers, guided, |_, g| {
            let mut rng = stream(cfg.seed, Stream::Eval, &[step as u64, g.base.id as u64, 1]);
            (0..n)
                .map(|_| {
                    policy::sample_rollout(params, &g.base, Some(&g.guidance), temp, &mut rng)
                        .map(|r| r.reward as usize)
                })
                .sum::<Result<usize>>()
        })
        .into_iter()
        .collect::<Result<Vec<usize>>>()?;
        Some(
            solvability_from_counts(&counts, n, &cfg.eval_k)?
                .into_iter()
                .map(|(k, s)| (k, s.fraction))
                .collect(),
        )
    } else {
        None
    };
    Ok(EvalResult {
        pass1,
        solvable,
        guided_solvable,
        entropy,
    })
}
