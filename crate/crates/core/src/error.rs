use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report. Variants carry enough context to
/// locate the offending file, index or parameter.
#[derive(Debug, Error)]
pub enum Error {
    // dataset-io
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("bad magic in {path}: expected \"DMX1\", found {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {path} at byte offset {offset}")]
    NonFiniteValue { path: PathBuf, offset: usize },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    ParseError { path: PathBuf, message: String },
    #[error("inconsistent descriptor dimension: image {id} has d={found}, expected d={expected}")]
    InconsistentDimension {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("inconsistent region count: image {id} has {found} regions, expected {expected}")]
    InconsistentRegionCount {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("invalid geometry for image {id}: {message}")]
    InvalidGeometry { id: String, message: String },
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    // grouping
    #[error("k={k} exceeds the number of points n={n}")]
    KTooLarge { k: usize, n: usize },
    #[error("target group size is zero (K={k} > N={n})")]
    ZeroTargetSize { k: usize, n: usize },

    // part-models
    #[error("covariance is singular even with ridge {ridge}")]
    SingularCovariance { ridge: f64 },
    #[error("part {part} has zero assignment mass")]
    EmptyPart { part: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("too few clusters: {available} candidates for {requested} parts")]
    TooFewClusters { available: usize, requested: usize },
    #[error("too few samples: {0}")]
    TooFewSamples(String),

    // assignment
    #[error("part {part} has an all-zero row in image block {image}")]
    ZeroRow { part: usize, image: usize },
    #[error("no feasible binarization: {parts} parts cannot be placed on {regions} regions")]
    NoFeasibleBinarization { parts: usize, regions: usize },
    #[error("infeasible block: {parts} parts exceed {regions} regions per image")]
    InfeasibleBlock { parts: usize, regions: usize },
    #[error("instance too large for exhaustive search: {arrangements} arrangements per image")]
    InstanceTooLarge { arrangements: u128 },

    // encoding
    #[error("geometry mismatch: {boxes} boxes for {regions} regions")]
    GeometryMismatch { boxes: usize, regions: usize },
    #[error("degenerate encoding: all-zero vector")]
    DegenerateEncoding,
    #[error("invalid PCA request: {0}")]
    InvalidPca(String),

    // evaluation
    #[error("training set has a single class")]
    SingleClass,
    #[error("class {0} has no samples")]
    EmptyClass(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("relevance list has no positives")]
    NoPositives,
    #[error("no queries")]
    NoQueries,

    // pipeline
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("missing labels: {0}")]
    MissingLabels(String),
    #[error("missing queries: {0}")]
    MissingQueries(String),
    #[error("unknown image: {0}")]
    UnknownImage(String),
    #[error("invalid synthetic parameters: {0}")]
    ParamInvalid(String),
    #[error("planted truth does not match the dataset: {0}")]
    TruthMismatch(String),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingFile(_) => "MissingFile",
            Error::BadMagic { .. } => "BadMagic",
            Error::TruncatedPayload { .. } => "TruncatedPayload",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::IoFailure { .. } => "IoFailure",
            Error::ParseError { .. } => "ParseError",
            Error::InconsistentDimension { .. } => "InconsistentDimension",
            Error::InconsistentRegionCount { .. } => "InconsistentRegionCount",
            Error::DanglingReference(_) => "DanglingReference",
            Error::InvalidGeometry { .. } => "InvalidGeometry",
            Error::InvalidMatrix(_) => "InvalidMatrix",
            Error::KTooLarge { .. } => "KTooLarge",
            Error::ZeroTargetSize { .. } => "ZeroTargetSize",
            Error::SingularCovariance { .. } => "SingularCovariance",
            Error::EmptyPart { .. } => "EmptyPart",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::TooFewClusters { .. } => "TooFewClusters",
            Error::TooFewSamples(_) => "TooFewSamples",
            Error::ZeroRow { .. } => "ZeroRow",
            Error::NoFeasibleBinarization { .. } => "NoFeasibleBinarization",
            Error::InfeasibleBlock { .. } => "InfeasibleBlock",
            Error::InstanceTooLarge { .. } => "InstanceTooLarge",
            Error::GeometryMismatch { .. } => "GeometryMismatch",
            Error::DegenerateEncoding => "DegenerateEncoding",
            Error::InvalidPca(_) => "InvalidPca",
            Error::SingleClass => "SingleClass",
            Error::EmptyClass(_) => "EmptyClass",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::NoPositives => "NoPositives",
            Error::NoQueries => "NoQueries",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::MissingLabels(_) => "MissingLabels",
            Error::MissingQueries(_) => "MissingQueries",
            Error::UnknownImage(_) => "UnknownImage",
            Error::ParamInvalid(_) => "ParamInvalid",
            Error::TruthMismatch(_) => "TruthMismatch",
        }
    }
}
