use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("duplicate key in checkpoint index: {0}")]
    DuplicateKey(String),

    #[error("key alignment failed: {}", format_conflicts(.0))]
    Alignment(Vec<AlignmentConflict>),

    #[error("no parameters match prefixes {0:?}")]
    EmptySelection(Vec<String>),

    #[error("LoRA rank mismatch on {name}: {left} vs {right}")]
    RankMismatch {
        name: String,
        left: usize,
        right: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("disparity needs at least two tasks, got {0}")]
    TooFewTasks(usize),

    #[error("task {0} has a zero-norm centroid")]
    DegenerateCentroid(usize),

    #[error("mean pairwise centroid similarity is not positive ({0})")]
    NonPositiveSimilarity(f64),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("orthogonality weight must be non-negative, got {0}")]
    NegativeLambda(f64),

    /// Carries the parameters from before the failing update.
    #[error("training diverged at step {step}: {detail}")]
    Divergence {
        step: usize,
        detail: String,
        last_finite: Option<Box<crate::checkpoint::ParamSet>>,
    },

    #[error("{phase}: {source}")]
    Phase {
        phase: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One reason two parameter sets cannot be combined key-by-key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AlignmentConflict {
    MissingLeft(String),
    MissingRight(String),
    Shape {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
}

impl std::fmt::Display for AlignmentConflict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AlignmentConflict::MissingLeft(n) => write!(f, "{n} missing on the left"),
            AlignmentConflict::MissingRight(n) => write!(f, "{n} missing on the right"),
            AlignmentConflict::Shape { name, left, right } => {
                write!(f, "{name} has shapes {left:?} vs {right:?}")
            }
        }
    }
}

fn format_conflicts(c: &[AlignmentConflict]) -> String {
    c.iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    /// Wraps an error with the pipeline phase it came from.
    pub fn in_phase(self, phase: impl Into<String>) -> Error {
        Error::Phase {
            phase: phase.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping phase wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Phase { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
