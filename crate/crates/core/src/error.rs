use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Pipeline stage tag attached to harness failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Corpus,
    Train,
    Attribute,
    Profile,
    Steer,
    Eval,
    Sweep,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Corpus => "corpus",
            Stage::Train => "train",
            Stage::Attribute => "attribute",
            Stage::Profile => "profile",
            Stage::Steer => "steer",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("index {index} out of range (bound {bound}) in {what}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("validation error at record {record}: {message}")]
    Validation { record: usize, message: String },

    #[error("join error: {0}")]
    Join(String),

    #[error("steering config was built for model {expected}, target model is {found}")]
    Compatibility { expected: String, found: String },

    #[error("training diverged at step {step} (loss {loss})")]
    Training { step: usize, loss: f64 },

    #[error("template `{template}` failed: {message}")]
    Generation { template: String, message: String },

    #[error("missing artifacts: {}", .0.join(", "))]
    Report(Vec<String>),

    #[error("[{stage}] {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

/// Tags errors from a pipeline stage.
pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| match e {
            already @ Error::Stage { .. } => already,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        })
    }
}
