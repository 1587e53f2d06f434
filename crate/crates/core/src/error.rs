use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor kernels, the tape, and the model-facing modules.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two shapes that must be broadcast-compatible or equal are not.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An operation received a tensor of the wrong rank.
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    /// Channel counts disagree (input feature vs. convolution parameters).
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    /// Matrix product inner dimensions disagree.
    InnerDimMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    /// Constructor data length does not match the shape product.
    DataLength { expected: usize, got: usize },
    /// A shape contains a zero extent or has more than four dimensions.
    InvalidShape { shape: Vec<usize> },
    /// Reflection padding must be strictly smaller than both spatial extents.
    PadTooLarge { pad: usize, height: usize, width: usize },
    /// Backward requires a single-element loss node.
    NonScalarLoss { shape: Vec<usize> },
    /// `Tape::record` was asked for an op name outside the registry.
    UnknownOp { name: String },
    /// An op was recorded with the wrong number of inputs.
    WrongArity {
        op: String,
        expected: usize,
        got: usize,
    },
    /// The enabled-statistics set must be nonempty.
    EmptyStatistics,
    /// A configuration field violates its invariant.
    InvalidConfig { message: String },
    /// Encoder input extents must be divisible by the downsample factor.
    NotDivisible { extent: usize, by: usize },
    /// Weight file is malformed (bad magic, version, or truncated).
    WeightFormat { message: String },
    /// Weight file names/shapes do not match the expected architecture.
    WeightSchema {
        unexpected: Vec<String>,
        missing: Vec<String>,
        mismatched: Vec<String>,
    },
    /// Log-log fitting needs at least three points.
    TooFewPoints { got: usize },
    /// Log-log fitting needs strictly positive samples.
    NonPositiveSample { value: f64 },
    /// Wrapped I/O failure (message form keeps the error cloneable).
    Io { message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shapes {left:?} and {right:?} are incompatible")
            }
            Error::RankMismatch { op, expected, got } => {
                write!(f, "{op}: expected rank-{expected} tensor, got shape {got:?}")
            }
            Error::ChannelMismatch { op, expected, got } => {
                write!(f, "{op}: expected {expected} channels, got {got}")
            }
            Error::InnerDimMismatch { left, right } => write!(
                f,
                "matmul: inner dimensions disagree ({}x{} times {}x{})",
                left.0, left.1, right.0, right.1
            ),
            Error::DataLength { expected, got } => {
                write!(f, "tensor data length {got} does not match shape product {expected}")
            }
            Error::InvalidShape { shape } => write!(f, "invalid tensor shape {shape:?}"),
            Error::PadTooLarge { pad, height, width } => write!(
                f,
                "reflection pad {pad} must be smaller than both spatial extents ({height}x{width})"
            ),
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::UnknownOp { name } => write!(f, "op '{name}' is not registered"),
            Error::WrongArity { op, expected, got } => {
                write!(f, "op '{op}' takes {expected} inputs, got {got}")
            }
            Error::EmptyStatistics => write!(f, "at least one style statistic must be enabled"),
            Error::InvalidConfig { message } => write!(f, "invalid config: {message}"),
            Error::NotDivisible { extent, by } => {
                write!(f, "spatial extent {extent} is not divisible by {by}")
            }
            Error::WeightFormat { message } => write!(f, "weight file: {message}"),
            Error::WeightSchema {
                unexpected,
                missing,
                mismatched,
            } => {
                write!(f, "weight schema mismatch:")?;
                if !unexpected.is_empty() {
                    write!(f, " unexpected tensors {unexpected:?}")?;
                }
                if !missing.is_empty() {
                    write!(f, " missing tensors {missing:?}")?;
                }
                if !mismatched.is_empty() {
                    write!(f, " shape mismatch for {mismatched:?}")?;
                }
                Ok(())
            }
            Error::TooFewPoints { got } => {
                write!(f, "scaling fit needs at least 3 points, got {got}")
            }
            Error::NonPositiveSample { value } => {
                write!(f, "scaling fit needs positive values, got {value}")
            }
            Error::Io { message } => write!(f, "i/o error: {message}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io {
            message: e.to_string(),
        }
    }
}
