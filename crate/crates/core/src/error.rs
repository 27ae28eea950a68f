use std::path::PathBuf;

/// Errors surfaced by the lab. Every contract violation named by an
/// operation maps onto one of these variants.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("invalid suite config: {0}")]
    SuiteConfig(String),

    #[error("rollout length {got} does not match episode length {expected}")]
    EpisodeLength { expected: usize, got: usize },

    #[error("unknown problem id {0}")]
    UnknownProblem(usize),

    #[error("missing oracle for hard problem {0}")]
    MissingOracle(usize),

    #[error("nonzero coefficient on forced position {position}")]
    ForcedCoefficient { position: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("group size {got} is too small (need at least {need})")]
    GroupTooSmall { need: usize, got: usize },

    #[error("invalid pass@k arguments n={n} c={c} k={k}")]
    PassKArgs { n: usize, c: usize, k: usize },

    #[error("non-finite gradient entry at index {index}")]
    NonFiniteGradient { index: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("oracle too short for fallback prefix: length {0} < 4")]
    OracleTooShort(usize),

    #[error("empty candidate list")]
    EmptyCandidates,

    #[error("mixture: {0}")]
    Mixture(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        LabError::Json {
            context: context.into(),
            source,
        }
    }
}

impl LabError {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            LabError::SuiteConfig(_) => "suite_config",
            LabError::EpisodeLength { .. } => "episode_length",
            LabError::UnknownProblem(_) => "unknown_problem",
            LabError::MissingOracle(_) => "missing_oracle",
            LabError::ForcedCoefficient { .. } => "forced_coefficient",
            LabError::Shape(_) => "shape",
            LabError::GroupTooSmall { .. } => "group_too_small",
            LabError::PassKArgs { .. } => "passk_args",
            LabError::NonFiniteGradient { .. } => "non_finite_gradient",
            LabError::NonFiniteLoss { .. } => "non_finite_loss",
            LabError::OracleTooShort(_) => "oracle_too_short",
            LabError::EmptyCandidates => "empty_candidates",
            LabError::Mixture(_) => "mixture",
            LabError::Config(_) => "config",
            LabError::Io { .. } => "io",
            LabError::Json { .. } => "json",
        }
    }
}
