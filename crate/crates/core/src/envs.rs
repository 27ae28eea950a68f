//! Combination-lock environments.
//!
//! A problem hides a secret token sequence; a rollout earns reward 1 iff its
//! first `len(secret)` tokens reproduce the secret exactly. Every problem in
//! a suite is played with the same episode length (the longest secret unless
//! configured otherwise), so shorter secrets are judged on a prefix.
//!
//! Suites can optionally carry a successor grammar: every token has a small
//! fixed set of admissible successors and secrets are walks through it. A base
//! policy pretrained on the grammar then knows which continuations are
//! plausible without knowing which one a given problem wants. The grammar is
//! either shared by the whole suite or drawn per problem (related easy
//! problems reuse the grammar of their hard problem).

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::passk;
use crate::policy::{self, PolicyParams};
use crate::rng::LabRng;

pub type Token = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocab {
    pub size: usize,
}

impl TokenVocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(LabError::SuiteConfig(format!(
                "vocab size must be at least 2, got {size}"
            )));
        }
        Ok(TokenVocab { size })
    }

    pub fn contains(&self, token: Token) -> bool {
        token < self.size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Difficulty {
    Hard,
    Easy,
    Easier,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    pub id: usize,
    pub secret: Vec<Token>,
    pub difficulty_class: Difficulty,
    /// Hard problem whose secret prefix this problem shares.
    pub relatedness_tag: Option<usize>,
    /// Hard problem whose tokens this problem's secret avoids entirely.
    pub unrelated_to: Option<usize>,
    /// Generation length shared by the whole suite.
    pub episode_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub problem_id: usize,
    pub tokens: Vec<Token>,
    pub selected_prefix_len: Option<usize>,
}

impl OracleSolution {
    /// The oracle tokens extended to a full episode. Positions past the
    /// secret are never judged, so any valid token works as padding.
    pub fn padded(&self, episode_len: usize) -> Vec<Token> {
        let mut out = self.tokens.clone();
        out.resize(episode_len.max(out.len()), 0);
        out
    }

    pub fn set_selected_prefix_len(&mut self, len: usize) -> Result<()> {
        if len == 0 || len > self.tokens.len() {
            return Err(LabError::Config(format!(
                "selected prefix length {len} outside [1, {}]",
                self.tokens.len()
            )));
        }
        self.selected_prefix_len = Some(len);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSuite {
    pub vocab: TokenVocab,
    pub episode_len: usize,
    pub problems: Vec<Problem>,
    pub oracles: BTreeMap<usize, OracleSolution>,
    /// Admissible successors per token for each problem, indexed by problem
    /// id, when the suite was built from a grammar.
    pub successors: Option<Vec<Vec<Vec<Token>>>>,
}

/// How many problems of each class to generate and how they relate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub vocab_size: usize,
    pub hard_count: usize,
    pub hard_len: usize,
    /// Easy problems sharing the grammar and the first `shared_prefix_len`
    /// tokens of a hard secret.
    pub easy_related: usize,
    /// Easy problems whose tokens are disjoint from a paired hard secret.
    pub easy_unrelated: usize,
    /// Easy problems with no pairing at all.
    pub easy_independent: usize,
    pub easy_len: usize,
    pub shared_prefix_len: usize,
    pub easier_count: usize,
    pub easier_len: usize,
    /// Fixed episode length; defaults to the longest secret.
    pub episode_len: Option<usize>,
    /// Successors per token when secrets are grammar walks.
    pub grammar_branching: Option<usize>,
    /// Draw a separate grammar for every problem instead of one per suite.
    pub grammar_per_problem: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            vocab_size: 16,
            hard_count: 1,
            hard_len: 8,
            easy_related: 0,
            easy_unrelated: 0,
            easy_independent: 0,
            easy_len: 2,
            shared_prefix_len: 2,
            easier_count: 0,
            easier_len: 1,
            episode_len: None,
            grammar_branching: None,
            grammar_per_problem: false,
        }
    }
}

const MAX_DRAW_ATTEMPTS: usize = 10_000;

fn sample_grammar(vocab: usize, branching: usize, rng: &mut LabRng) -> Vec<Vec<Token>> {
    (0..vocab)
        .map(|t| {
            let mut others: Vec<Token> = (0..vocab).filter(|&u| u != t).collect();
            others.shuffle(rng);
            let mut succ: Vec<Token> = others.into_iter().take(branching).collect();
            succ.sort_unstable();
            succ
        })
        .collect()
}

/// Draws a sequence of `len` distinct tokens from `allowed`, continuing
/// `start`. With a grammar every step follows an admissible successor.
fn draw_secret(
    start: &[Token],
    len: usize,
    allowed: &[Token],
    grammar: Option<&[Vec<Token>]>,
    rng: &mut LabRng,
) -> Option<Vec<Token>> {
    'attempt: for _ in 0..MAX_DRAW_ATTEMPTS {
        let mut seq = start.to_vec();
        let mut used: HashSet<Token> = seq.iter().copied().collect();
        while seq.len() < len {
            let candidates: Vec<Token> = match (grammar, seq.last()) {
                (Some(g), Some(&prev)) => g[prev]
                    .iter()
                    .copied()
                    .filter(|t| allowed.contains(t) && !used.contains(t))
                    .collect(),
                _ => allowed
                    .iter()
                    .copied()
                    .filter(|t| !used.contains(t))
                    .collect(),
            };
            match candidates.choose(rng) {
                Some(&t) => {
                    seq.push(t);
                    used.insert(t);
                }
                None => continue 'attempt,
            }
        }
        return Some(seq);
    }
    None
}

/// Generates a suite. Ids are assigned in order: hard, related easy,
/// unrelated easy, independent easy, easier.
pub fn make_suite(config: &SuiteConfig, rng: &mut LabRng) -> Result<ProblemSuite> {
    let vocab = TokenVocab::new(config.vocab_size)?;
    let v = vocab.size;
    let lens = [
        (config.hard_count, config.hard_len, "hard"),
        (
            config.easy_related + config.easy_unrelated + config.easy_independent,
            config.easy_len,
            "easy",
        ),
        (config.easier_count, config.easier_len, "easier"),
    ];
    let mut longest = 0;
    for &(count, len, name) in &lens {
        if count == 0 {
            continue;
        }
        if len == 0 {
            return Err(LabError::SuiteConfig(format!("{name} secret length is zero")));
        }
        if len > v {
            return Err(LabError::SuiteConfig(format!(
                "{name} secret length {len} exceeds vocab size {v}; secrets use distinct tokens"
            )));
        }
        longest = longest.max(len);
    }
    if longest == 0 {
        return Err(LabError::SuiteConfig("suite has no problems".into()));
    }
    let episode_len = match config.episode_len {
        Some(e) if e < longest => {
            return Err(LabError::SuiteConfig(format!(
                "secret length {longest} exceeds episode length {e}"
            )))
        }
        Some(e) => e,
        None => longest,
    };
    if (config.easy_related > 0 || config.easy_unrelated > 0) && config.hard_count == 0 {
        return Err(LabError::SuiteConfig(
            "related/unrelated easy problems need at least one hard problem".into(),
        ));
    }
    if config.easy_related > 0 && config.shared_prefix_len > config.easy_len.min(config.hard_len)
    {
        return Err(LabError::SuiteConfig(format!(
            "shared prefix {} longer than an easy or hard secret",
            config.shared_prefix_len
        )));
    }
    if config.easy_unrelated > 0 && v < config.hard_len + config.easy_len {
        return Err(LabError::SuiteConfig(format!(
            "vocab {v} too small for unrelated secrets disjoint from length-{} hard secrets",
            config.hard_len
        )));
    }

    if let Some(b) = config.grammar_branching {
        if b == 0 || b >= v {
            return Err(LabError::SuiteConfig(format!(
                "grammar branching {b} must be in [1, {v})"
            )));
        }
    }
    let shared = match config.grammar_branching {
        Some(b) if !config.grammar_per_problem => Some(sample_grammar(v, b, rng)),
        _ => None,
    };
    // Grammar for the next problem: the shared one, or a fresh draw.
    let next_grammar = |rng: &mut LabRng| match (config.grammar_branching, &shared) {
        (_, Some(g)) => Some(g.clone()),
        (Some(b), None) => Some(sample_grammar(v, b, rng)),
        (None, None) => None,
    };
    let mut grammars: Vec<Option<Vec<Vec<Token>>>> = Vec::new();
    let all_tokens: Vec<Token> = (0..v).collect();
    let failed = |what: &str| LabError::SuiteConfig(format!("could not draw a {what} secret"));

    let mut problems = Vec::new();
    let mut push = |secret: Vec<Token>, class, related: Option<usize>, unrelated: Option<usize>| {
        let id = problems.len();
        problems.push(Problem {
            id,
            secret,
            difficulty_class: class,
            relatedness_tag: related,
            unrelated_to: unrelated,
            episode_len,
        });
    };

    let mut hard_secrets = Vec::with_capacity(config.hard_count);
    for _ in 0..config.hard_count {
        let g = next_grammar(rng);
        let s = draw_secret(&[], config.hard_len, &all_tokens, g.as_deref(), rng)
            .ok_or_else(|| failed("hard"))?;
        hard_secrets.push(s.clone());
        push(s, Difficulty::Hard, None, None);
        grammars.push(g);
    }
    for i in 0..config.easy_related {
        let h = i % config.hard_count;
        let g = grammars[h].clone();
        let start = &hard_secrets[h][..config.shared_prefix_len];
        let s = draw_secret(start, config.easy_len, &all_tokens, g.as_deref(), rng)
            .ok_or_else(|| failed("related easy"))?;
        push(s, Difficulty::Easy, Some(h), None);
        grammars.push(g);
    }
    for i in 0..config.easy_unrelated {
        let h = i % config.hard_count;
        let g = next_grammar(rng);
        let allowed: Vec<Token> = all_tokens
            .iter()
            .copied()
            .filter(|t| !hard_secrets[h].contains(t))
            .collect();
        let s = draw_secret(&[], config.easy_len, &allowed, g.as_deref(), rng)
            .ok_or_else(|| failed("unrelated easy"))?;
        push(s, Difficulty::Easy, None, Some(h));
        grammars.push(g);
    }
    for _ in 0..config.easy_independent {
        let g = next_grammar(rng);
        let s = draw_secret(&[], config.easy_len, &all_tokens, g.as_deref(), rng)
            .ok_or_else(|| failed("easy"))?;
        push(s, Difficulty::Easy, None, None);
        grammars.push(g);
    }
    for _ in 0..config.easier_count {
        let g = next_grammar(rng);
        let s = draw_secret(&[], config.easier_len, &all_tokens, g.as_deref(), rng)
            .ok_or_else(|| failed("easier"))?;
        push(s, Difficulty::Easier, None, None);
        grammars.push(g);
    }
    let grammar: Option<Vec<Vec<Vec<Token>>>> = grammars.into_iter().collect();

    let oracles = problems
        .iter()
        .map(|p| {
            (
                p.id,
                OracleSolution {
                    problem_id: p.id,
                    tokens: p.secret.clone(),
                    selected_prefix_len: None,
                },
            )
        })
        .collect();
    let suite = ProblemSuite {
        vocab,
        episode_len,
        problems,
        oracles,
        successors: grammar,
    };
    suite.validate()?;
    Ok(suite)
}

/// Binary outcome reward.
pub fn reward(problem: &Problem, rollout_tokens: &[Token]) -> Result<u8> {
    if rollout_tokens.len() != problem.episode_len {
        return Err(LabError::EpisodeLength {
            expected: problem.episode_len,
            got: rollout_tokens.len(),
        });
    }
    Ok(u8::from(rollout_tokens[..problem.secret.len()] == problem.secret[..]))
}

/// Screens a problem against a policy: `Hard` iff the empirical pass@k from
/// `n_samples` unguided rollouts falls below `tau_hard`.
pub fn classify_difficulty(
    params: &PolicyParams,
    problem: &Problem,
    n_samples: usize,
    k: usize,
    tau_hard: f64,
    temperature: f64,
    rng: &mut LabRng,
) -> Result<Difficulty> {
    let est = passk::passk_empirical(params, problem, n_samples, k, temperature, rng)?;
    Ok(if est.value < tau_hard {
        Difficulty::Hard
    } else {
        Difficulty::Easy
    })
}

impl ProblemSuite {
    pub fn problem(&self, id: usize) -> Result<&Problem> {
        self.problems
            .get(id)
            .filter(|p| p.id == id)
            .or_else(|| self.problems.iter().find(|p| p.id == id))
            .ok_or(LabError::UnknownProblem(id))
    }

    pub fn oracle(&self, id: usize) -> Result<&OracleSolution> {
        self.oracles.get(&id).ok_or(LabError::MissingOracle(id))
    }

    pub fn by_class(&self, class: Difficulty) -> impl Iterator<Item = &Problem> {
        self.problems
            .iter()
            .filter(move |p| p.difficulty_class == class)
    }

    pub fn ids_of(&self, class: Difficulty) -> Vec<usize> {
        self.by_class(class).map(|p| p.id).collect()
    }

    /// Checks every suite and problem invariant.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.problems {
            if !seen.insert(p.id) {
                return Err(LabError::SuiteConfig(format!("duplicate problem id {}", p.id)));
            }
            if p.secret.is_empty() {
                return Err(LabError::SuiteConfig(format!("problem {} has empty secret", p.id)));
            }
            if let Some(g) = self.successors.as_ref().map(|s| s.get(p.id)) {
            let ok = g.is_some_and(|g| {
                g.len() == self.vocab.size
                    && g.iter().flatten().all(|&t| self.vocab.contains(t))
                    && p.secret.windows(2).all(|w| g[w[0]].contains(&w[1]))
            });
            if !ok {
                return Err(LabError::SuiteConfig(format!(
                    "problem {} does not follow its grammar",
                    p.id
                )));
            }
        }
        if let Some(&t) = p.secret.iter().find(|&&t| !self.vocab.contains(t)) {
                return Err(LabError::SuiteConfig(format!(
                    "problem {} has token {t} outside vocab",
                    p.id
                )));
            }
            if p.secret.len() > self.episode_len || p.episode_len != self.episode_len {
                return Err(LabError::SuiteConfig(format!(
                    "problem {} secret length {} exceeds episode length {}",
                    p.id,
                    p.secret.len(),
                    self.episode_len
                )));
            }
            if p.difficulty_class == Difficulty::Hard && !self.oracles.contains_key(&p.id) {
                return Err(LabError::MissingOracle(p.id));
            }
        }
        for (id, o) in &self.oracles {
            if *id != o.problem_id || !seen.contains(id) {
                return Err(LabError::SuiteConfig(format!("oracle {id} has no problem")));
            }
            if let Some(len) = o.selected_prefix_len {
                if len == 0 || len > o.tokens.len() {
                    return Err(LabError::SuiteConfig(format!(
                        "oracle {id} prefix length {len} out of range"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&SuiteDoc::from(self)).map_err(|e| LabError::json("suite", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SuiteDoc = serde_json::from_str(text).map_err(|e| LabError::json("suite", e))?;
        doc.try_into()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Uniform-policy success probability of a problem: `V^-L`.
    pub fn uniform_success_probability(&self, id: usize) -> Result<f64> {
        let p = self.problem(id)?;
        Ok((self.vocab.size as f64).powi(-(p.secret.len() as i32)))
    }

    /// Grammar of one problem, if the suite has one.
    pub fn grammar_of(&self, id: usize) -> Option<&[Vec<Token>]> {
        self.successors.as_ref().and_then(|s| s.get(id)).map(|g| g.as_slice())
    }

    /// Random walk of episode length through the grammar of `problem_id`,
    /// from `start` or from a uniform token when `None`; used for
    /// pretraining corpora.
    pub fn random_walk(&self, problem_id: usize, start: Option<Token>, rng: &mut LabRng) -> Vec<Token> {
        let g = self.grammar_of(problem_id);
        let mut seq = Vec::with_capacity(self.episode_len);
        seq.push(start.unwrap_or_else(|| rng.gen_range(0..self.vocab.size)));
        while seq.len() < self.episode_len {
            let prev = *seq.last().unwrap();
            let next = match g {
                Some(g) => *g[prev].choose(rng).unwrap(),
                None => rng.gen_range(0..self.vocab.size),
            };
            seq.push(next);
        }
        seq
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemDoc {
    id: usize,
    secret: Vec<Token>,
    class: Difficulty,
    relatedness_tag: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    unrelated_to: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteDoc {
    vocab_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    episode_len: Option<usize>,
    problems: Vec<ProblemDoc>,
    oracles: Vec<OracleSolution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    successors: Option<Vec<Vec<Vec<Token>>>>,
}

impl From<&ProblemSuite> for SuiteDoc {
    fn from(s: &ProblemSuite) -> Self {
        SuiteDoc {
            vocab_size: s.vocab.size,
            episode_len: Some(s.episode_len),
            problems: s
                .problems
                .iter()
                .map(|p| ProblemDoc {
                    id: p.id,
                    secret: p.secret.clone(),
                    class: p.difficulty_class,
                    relatedness_tag: p.relatedness_tag,
                    unrelated_to: p.unrelated_to,
                })
                .collect(),
            oracles: s.oracles.values().cloned().collect(),
            successors: s.successors.clone(),
        }
    }
}

impl TryFrom<SuiteDoc> for ProblemSuite {
    type Error = LabError;

    fn try_from(doc: SuiteDoc) -> Result<Self> {
        let vocab = TokenVocab::new(doc.vocab_size)?;
        let longest = doc.problems.iter().map(|p| p.secret.len()).max().unwrap_or(0);
        let episode_len = doc.episode_len.unwrap_or(longest);
        let problems = doc
            .problems
            .into_iter()
            .map(|p| Problem {
                id: p.id,
                secret: p.secret,
                difficulty_class: p.class,
                relatedness_tag: p.relatedness_tag,
                unrelated_to: p.unrelated_to,
                episode_len,
            })
            .collect();
        let oracles = doc.oracles.into_iter().map(|o| (o.problem_id, o)).collect();
        let suite = ProblemSuite {
            vocab,
            episode_len,
            problems,
            oracles,
            successors: doc.successors,
        };
        suite.validate()?;
        Ok(suite)
    }
}

/// Probability that a uniform policy solves a length-`len` lock at least once in `n` tries.
pub fn uniform_passk(vocab: usize, len: usize, n: usize) -> f64 {
    let p = (vocab as f64).powi(-(len as i32));
    -(n as f64 * (-p).ln_1p()).exp_m1()
}

/// Convenience: rollouts at `temperature` from `params` for a problem, unguided.
pub fn sample_unguided(
    params: &PolicyParams,
    problem: &Problem,
    n: usize,
    temperature: f64,
    rng: &mut LabRng,
) -> Result<Vec<policy::Rollout>> {
    (0..n)
        .map(|_| policy::sample_rollout(params, problem, None, temperature, rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn hard_only() -> SuiteConfig {
        SuiteConfig::default()
    }

    #[test]
    fn one_hard_problem_of_length_eight() {
        let suite = make_suite(&hard_only(), &mut seeded(7)).unwrap();
        assert_eq!(suite.problems.len(), 1);
        assert_eq!(suite.problems[0].secret.len(), 8);
        assert_eq!(suite.problems[0].difficulty_class, Difficulty::Hard);
        assert_eq!(suite.episode_len, 8);
    }

    #[test]
    fn related_easy_shares_prefix() {
        let cfg = SuiteConfig {
            easy_related: 3,
            ..hard_only()
        };
        let suite = make_suite(&cfg, &mut seeded(1)).unwrap();
        let hard = &suite.problems[0];
        for easy in suite.by_class(Difficulty::Easy) {
            assert_eq!(easy.relatedness_tag, Some(0));
            assert_eq!(easy.secret[..2], hard.secret[..2]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SuiteConfig {
            hard_count: 4,
            easy_related: 2,
            easy_unrelated: 2,
            easier_count: 2,
            grammar_branching: Some(3),
            ..hard_only()
        };
        let a = make_suite(&cfg, &mut seeded(11)).unwrap();
        let b = make_suite(&cfg, &mut seeded(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unrelated_secrets_are_disjoint_from_their_pair() {
        for seed in 0..20 {
            let cfg = SuiteConfig {
                hard_count: 3,
                easy_unrelated: 6,
                grammar_branching: if seed % 2 == 0 { Some(3) } else { None },
                ..hard_only()
            };
            let suite = make_suite(&cfg, &mut seeded(seed)).unwrap();
            for p in suite.problems.iter().filter(|p| p.unrelated_to.is_some()) {
                let hard = suite.problem(p.unrelated_to.unwrap()).unwrap();
                assert!(p.secret.iter().all(|t| !hard.secret.contains(t)));
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let too_long = SuiteConfig {
            episode_len: Some(4),
            ..hard_only()
        };
        assert!(matches!(
            make_suite(&too_long, &mut seeded(0)),
            Err(LabError::SuiteConfig(_))
        ));
        let cramped = SuiteConfig {
            vocab_size: 9,
            easy_unrelated: 1,
            ..hard_only()
        };
        assert!(matches!(
            make_suite(&cramped, &mut seeded(0)),
            Err(LabError::SuiteConfig(_))
        ));
        let tiny = SuiteConfig {
            vocab_size: 1,
            ..hard_only()
        };
        assert!(make_suite(&tiny, &mut seeded(0)).is_err());
    }

    #[test]
    fn reward_is_exact_prefix_match() {
        let p = Problem {
            id: 0,
            secret: vec![3, 7, 1],
            difficulty_class: Difficulty::Easy,
            relatedness_tag: None,
            unrelated_to: None,
            episode_len: 3,
        };
        assert_eq!(reward(&p, &[3, 7, 1]).unwrap(), 1);
        assert_eq!(reward(&p, &[3, 7, 2]).unwrap(), 0);
        assert!(matches!(
            reward(&p, &[3, 7]),
            Err(LabError::EpisodeLength { expected: 3, got: 2 })
        ));
        let long = Problem {
            episode_len: 5,
            ..p
        };
        assert_eq!(reward(&long, &[3, 7, 1, 0, 9]).unwrap(), 1);
    }

    #[test]
    fn uniform_success_probability_matches_counting() {
        let suite = make_suite(&hard_only(), &mut seeded(7)).unwrap();
        let p = suite.uniform_success_probability(0).unwrap();
        assert!((p - 16f64.powi(-8)).abs() < 1e-24);
        assert!((p - 2.3283064365386963e-10).abs() < 1e-22);
        assert!(uniform_passk(16, 8, 128) < 3e-8);
    }

    #[test]
    fn oracles_score_one_and_json_round_trips() {
        let cfg = SuiteConfig {
            hard_count: 3,
            easy_related: 2,
            easy_unrelated: 1,
            easier_count: 1,
            grammar_branching: Some(3),
            ..hard_only()
        };
        let mut suite = make_suite(&cfg, &mut seeded(5)).unwrap();
        for p in &suite.problems {
            let o = suite.oracle(p.id).unwrap();
            assert_eq!(reward(p, &o.padded(suite.episode_len)).unwrap(), 1);
        }
        suite.oracles.get_mut(&0).unwrap().set_selected_prefix_len(6).unwrap();
        let back = ProblemSuite::from_json(&suite.to_json().unwrap()).unwrap();
        assert_eq!(back, suite);
    }

    #[test]
    fn grammar_secrets_follow_successors() {
        let cfg = SuiteConfig {
            hard_count: 8,
            easy_independent: 4,
            grammar_branching: Some(3),
            ..hard_only()
        };
        let suite = make_suite(&cfg, &mut seeded(3)).unwrap();
        for p in &suite.problems {
            let g = suite.grammar_of(p.id).unwrap();
            assert_eq!(g, suite.grammar_of(0).unwrap());
            for w in p.secret.windows(2) {
                assert!(g[w[0]].contains(&w[1]));
            }
            let distinct: HashSet<_> = p.secret.iter().collect();
            assert_eq!(distinct.len(), p.secret.len());
        }
    }
}
