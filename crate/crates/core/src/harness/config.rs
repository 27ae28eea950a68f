use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::envs::SuiteConfig;
use crate::error::{LabError, Result};
use crate::policy::InitConfig;
use crate::pope::{MixtureSchedule, Pool, SelectionConfig};
use crate::rlcore::{LossConfig, OptimMethod};

/// Training method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Grpo,
    GrpoEntropy,
    GrpoHighClip,
    PassK(usize),
    Pope,
    PopeMasked,
    SftFull,
    SftRejectionPrefix,
    SftThenRl,
}

impl Method {
    /// Every method, with PassK at k = 8.
    pub const ALL: [Method; 9] = [
        Method::Grpo,
        Method::GrpoEntropy,
        Method::GrpoHighClip,
        Method::PassK(8),
        Method::Pope,
        Method::PopeMasked,
        Method::SftFull,
        Method::SftRejectionPrefix,
        Method::SftThenRl,
    ];

    pub fn is_pope(&self) -> bool {
        matches!(self, Method::Pope | Method::PopeMasked)
    }

    pub fn has_sft_phase(&self) -> bool {
        matches!(
            self,
            Method::SftFull | Method::SftRejectionPrefix | Method::SftThenRl
        )
    }

    pub fn has_rl_phase(&self) -> bool {
        !matches!(self, Method::SftFull | Method::SftRejectionPrefix)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Grpo => write!(f, "GRPO"),
            Method::GrpoEntropy => write!(f, "GRPO+Entropy"),
            Method::GrpoHighClip => write!(f, "GRPO+HighClip"),
            Method::PassK(k) => write!(f, "PassK({k})"),
            Method::Pope => write!(f, "POPE"),
            Method::PopeMasked => write!(f, "POPE+Masked"),
            Method::SftFull => write!(f, "SFT-Full"),
            Method::SftRejectionPrefix => write!(f, "SFT-RejectionPrefix"),
            Method::SftThenRl => write!(f, "SFT-then-RL"),
        }
    }
}

impl FromStr for Method {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let m = match s {
            "GRPO" => Method::Grpo,
            "GRPO+Entropy" => Method::GrpoEntropy,
            "GRPO+HighClip" => Method::GrpoHighClip,
            "POPE" => Method::Pope,
            "POPE+Masked" => Method::PopeMasked,
            "SFT-Full" => Method::SftFull,
            "SFT-RejectionPrefix" => Method::SftRejectionPrefix,
            "SFT-then-RL" => Method::SftThenRl,
            _ => {
                let k = s
                    .strip_prefix("PassK(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k >= 1)
                    .ok_or_else(|| LabError::Config(format!("unknown method {s:?}")))?;
                Method::PassK(k)
            }
        };
        Ok(m)
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub context_order: usize,
    pub init: InitConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            embed_dim: 8,
            hidden: 32,
            context_order: 1,
            init: InitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: OptimMethod,
    pub learning_rate: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            method: OptimMethod::Adam,
            learning_rate: 1e-3,
        }
    }
}

/// Supervised pretraining of the base policy on grammar walks, run before
/// any method-specific training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability that a walk tagged with problem `p` starts at the first
    /// token of `p`'s secret instead of a uniform token. Zero gives a base
    /// that knows only the grammar.
    pub start_hint: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 600,
            batch_size: 64,
            learning_rate: 1e-2,
            start_hint: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    /// Full-batch SFT steps (the SFT phase of SFT-then-RL; for SFT-only
    /// methods `total_steps` is used instead).
    pub steps: usize,
    pub learning_rate: f64,
    /// Rejection-sampling attempts per hard problem.
    pub rejection_budget: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            steps: 200,
            learning_rate: 1e-2,
            rejection_budget: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    pub suite: SuiteConfig,
    /// Load the suite from a JSON file instead of generating it.
    pub suite_path: Option<PathBuf>,
    pub policy: PolicyConfig,
    /// Pretrain a base policy on grammar walks; `None` keeps the raw init.
    pub base: Option<PretrainConfig>,
    pub mixture: MixtureSchedule,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub rollouts_per_prompt: usize,
    pub temperature: f64,
    pub ratio_uses_temperature: bool,
    pub snapshot_interval: usize,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub eval_n: usize,
    pub eval_k: Vec<usize>,
    pub eval_temperature: f64,
    pub selection: SelectionConfig,
    /// Skip prefix selection and guide every hard problem with this many
    /// oracle tokens.
    pub fixed_prefix_len: Option<usize>,
    pub sft: SftConfig,
    /// Rollout worker threads; results do not depend on this.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            method: Method::Grpo,
            suite: SuiteConfig::default(),
            suite_path: None,
            policy: PolicyConfig::default(),
            base: None,
            mixture: MixtureSchedule::new(&[(Pool::Hard, 1.0)], 8),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            rollouts_per_prompt: 8,
            temperature: 0.8,
            ratio_uses_temperature: false,
            snapshot_interval: 1,
            total_steps: 100,
            eval_interval: 10,
            eval_n: 32,
            eval_k: vec![8],
            eval_temperature: 0.8,
            selection: SelectionConfig::default(),
            fixed_prefix_len: None,
            sft: SftConfig::default(),
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    /// The 32-problem hard suite (V=16, L=8) with per-problem grammars and a
    /// pretrained base, trained for 1000 steps. POPE methods get the 1:1
    /// hard/guided mixture, every other method the hard pool alone.
    pub fn hard_suite(method: Method, seed: u64) -> Self {
        let weights: &[(Pool, f64)] = if method.is_pope() {
            &[(Pool::Hard, 1.0), (Pool::Guided, 1.0)]
        } else {
            &[(Pool::Hard, 1.0)]
        };
        ExperimentConfig {
            seed,
            method,
            suite: SuiteConfig {
                hard_count: 32,
                hard_len: 8,
                grammar_branching: Some(3),
                grammar_per_problem: true,
                ..SuiteConfig::default()
            },
            policy: PolicyConfig {
                embed_dim: 16,
                hidden: 128,
                context_order: 8,
                ..PolicyConfig::default()
            },
            base: Some(PretrainConfig {
                steps: 4000,
                batch_size: 64,
                learning_rate: 3e-3,
                start_hint: 0.9,
            }),
            mixture: MixtureSchedule::new(weights, 8),
            loss: LossConfig {
                entropy_coef: if method == Method::GrpoEntropy { 0.01 } else { 0.0 },
                kl_coef: if method == Method::GrpoEntropy { 0.01 } else { 0.0 },
                ..LossConfig::default()
            },
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                ..OptimizerConfig::default()
            },
            total_steps: 1000,
            eval_interval: 250,
            eval_n: 128,
            eval_k: vec![8, 32],
            selection: SelectionConfig {
                rollouts_per_candidate: 128,
                ..SelectionConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| LabError::json("experiment config", e))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| LabError::json("experiment config", e))
    }

    pub fn pool_weight(&self, pool: Pool) -> f64 {
        self.mixture.weights.get(&pool).copied().unwrap_or(0.0)
    }

    /// Checks cross-field constraints. Suite-dependent checks happen once
    /// the suite exists.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        if self.eval_k.is_empty() || self.eval_k.contains(&0) {
            return bad("eval_k must be a non-empty list of positive integers".into());
        }
        let kmax = *self.eval_k.iter().max().unwrap();
        if self.eval_n < kmax {
            return bad(format!("eval_n {} is smaller than max eval_k {kmax}", self.eval_n));
        }
        if self.rollouts_per_prompt < 2 {
            return bad("rollouts_per_prompt must be at least 2".into());
        }
        if !(self.temperature > 0.0) || !(self.eval_temperature > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if self.snapshot_interval == 0 || self.eval_interval == 0 || self.workers == 0 {
            return bad("snapshot_interval, eval_interval and workers must be positive".into());
        }
        self.loss.validate()?;
        self.mixture.normalized()?;
        let guided = self.pool_weight(Pool::Guided) > 0.0;
        if self.method.is_pope() && !guided {
            return bad(format!("method {} needs a positive guided pool weight", self.method));
        }
        if !self.method.is_pope() && guided {
            return bad(format!("method {} has no guided pool", self.method));
        }
        match self.method {
            Method::PassK(k) if k > self.rollouts_per_prompt => {
                return bad(format!(
                    "PassK({k}) needs at least {k} rollouts per prompt"
                ))
            }
            Method::GrpoEntropy if !(self.loss.entropy_coef > 0.0 && self.loss.kl_coef > 0.0) => {
                return bad("GRPO+Entropy needs entropy_coef > 0 and kl_coef > 0".into())
            }
            _ => {}
        }
        if let Some(l) = self.fixed_prefix_len {
            if l == 0 {
                return bad("fixed_prefix_len must be positive".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_suite_is_valid_for_every_method() {
        for m in Method::ALL {
            ExperimentConfig::hard_suite(m, 0).validate().unwrap();
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in [
            Method::Grpo,
            Method::GrpoEntropy,
            Method::GrpoHighClip,
            Method::PassK(4),
            Method::Pope,
            Method::PopeMasked,
            Method::SftFull,
            Method::SftRejectionPrefix,
            Method::SftThenRl,
        ] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("PassK(0)".parse::<Method>().is_err());
        assert!("grpo".parse::<Method>().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"seed": 1, "totl_steps": 5}"#).is_err());
        let cfg = ExperimentConfig::from_json(r#"{"seed": 1, "method": "PassK(2)"}"#).unwrap();
        assert_eq!(cfg.method, Method::PassK(2));
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_catches_inconsistent_configs() {
        let ok = ExperimentConfig::default();
        ok.validate().unwrap();
        let c = ExperimentConfig {
            eval_n: 4,
            eval_k: vec![8],
            ..ok.clone()
        };
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            method: Method::Pope,
            ..ok.clone()
        };
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            method: Method::PassK(16),
            ..ok.clone()
        };
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            method: Method::GrpoEntropy,
            ..ok
        };
        assert!(c.validate().is_err());
    }
}
