use std::fmt;
use std::path::PathBuf;

/// Pipeline stage, used to annotate errors and timings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    /// Global view structure alignment (relu5_1, maximal patch).
    Global,
    /// Local view texture refinement (relu4_1, small patch).
    Local,
    /// Statistics-based enhancement at relu3_1, relu2_1, relu1_1.
    Enhance,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Global, Stage::Local, Stage::Enhance];

    /// Roman numeral label ("I", "II", "III").
    pub fn label(self) -> &'static str {
        match self {
            Stage::Global => "I",
            Stage::Local => "II",
            Stage::Enhance => "III",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}", self.label())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("{op}: {message}")]
    InvalidArgument { op: &'static str, message: String },

    #[error("degenerate feature map: {0}")]
    DegenerateFeature(String),

    #[error("weight file is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<u64>,
        found: Vec<u64>,
    },

    #[error("not a weight file: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype {dtype} for tensor `{name}`")]
    UnsupportedDtype { name: String, dtype: u8 },

    #[error("weight file truncated while reading {0}")]
    Truncated(String),

    #[error("malformed weight file: {0}")]
    MalformedWeights(String),

    #[error("unsupported preprocessing convention {0} (expected 0 = imagenet-unit-range)")]
    UnsupportedPreprocessing(u32),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image: {0}")]
    Image(String),

    #[error("image is not RGB ({0})")]
    NotRgb(String),

    #[error("semantic map has {0} color clusters, at most 64 are supported")]
    TooManyLabels(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl fmt::Display, found: impl fmt::Display) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn invalid(op: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: Stage) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Stage the error was raised in, if it came out of the pipeline.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
