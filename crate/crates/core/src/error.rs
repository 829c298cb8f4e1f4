use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty reduction")]
    EmptyReduction,

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("non-finite score at particle {index}")]
    NonFiniteScore { index: usize },

    #[error("tape was produced by a different network revision")]
    StaleTape,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("observation must be binary, found {value} at position {index}")]
    NonBinary { index: usize, value: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("Poisson rate is zero at position {index} while the count is positive")]
    ZeroRate { index: usize },

    #[error("degenerate importance weights")]
    DegenerateWeights,

    #[error("non-invertible code map at sample")]
    NonInvertibleCodeMap,

    /// `line` is 0 for values given on the command line.
    #[error("config error ({}), key `{key}`: {message}", origin(*.line))]
    Config {
        line: usize,
        key: String,
        message: String,
    },

    #[error("minibatch {index} in {module}: {source}")]
    Minibatch {
        module: &'static str,
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            found,
        }
    }

    pub(crate) fn in_minibatch(self, module: &'static str, index: usize) -> Self {
        match self {
            e @ Error::Minibatch { .. } => e,
            other => Error::Minibatch {
                module,
                index,
                source: Box::new(other),
            },
        }
    }
}

fn origin(line: usize) -> String {
    if line == 0 {
        "command line".to_string()
    } else {
        format!("line {line}")
    }
}

pub(crate) fn ensure_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::dims(context, expected, found))
    }
}
