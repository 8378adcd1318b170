use thiserror::Error;

/// Errors surfaced by registration, simulation, training and evaluation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A point fell on or behind the projection plane through the source.
    #[error("degenerate projection: depth {depth} is below the cutoff {cutoff}")]
    DegenerateProjection { depth: f64, cutoff: f64 },

    /// An operation that needs at least one correspondence received none.
    #[error("correspondence set is empty")]
    EmptySet,

    /// The normal-equation matrix is numerically singular and no
    /// regularization is in effect to rescue it.
    #[error("singular normal equations (condition estimate {cond:.3e})")]
    SingularSystem { cond: f64 },

    /// No surface point passed the contour predicate for this view.
    #[error("no contour points visible for this pose")]
    NoContour,

    /// Phantom construction parameters are out of range.
    #[error("bad phantom parameters: {0}")]
    BadParams(String),

    /// Start pose sampling could not place a pose inside the requested bin.
    #[error("start pose sampling failed: {0}")]
    SamplingFailed(String),

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at step {step}: {what}")]
    DivergedTraining { step: u64, what: String },

    /// A pose update produced non-finite entries.
    #[error("pose became non-finite during registration")]
    NonFinitePose,

    /// An evaluation routine received an empty record list.
    #[error("no records to evaluate")]
    EmptyInput,

    /// The requested method variant name is not known.
    #[error("unknown method variant `{0}`")]
    UnknownVariant(String),

    /// A model file could not be decoded.
    #[error("model file rejected: {0}")]
    BadModelFile(String),

    /// Generic I/O failure while reading or writing artifacts.
    #[error("i/o failure: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
