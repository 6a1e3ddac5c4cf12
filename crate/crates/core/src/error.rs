use thiserror::Error;

pub type Result<T, E = WaveError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaveError {
    #[error("response {y} is outside the domain of the {family} loss")]
    Domain { family: &'static str, y: f64 },

    #[error("exp({z}) overflows in the Poisson loss{}", index.map(|i| format!(" at observation {i}")).unwrap_or_default())]
    Overflow { index: Option<usize>, z: f64 },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite objective in the Newton step after {iterations} iterations")]
    Divergence { iterations: usize },

    #[error("ADMM stopped after {iterations} iterations with residual {residual:e}")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("worker {worker_id} sent non-positive precision {value} at coordinate {coordinate}")]
    DataIntegrity {
        worker_id: usize,
        coordinate: usize,
        value: f64,
    },

    #[error("cannot decode summary field `{field}`: {reason}")]
    Decode { field: &'static str, reason: String },

    #[error("worker {worker_id} failed: {source}")]
    Worker {
        worker_id: usize,
        #[source]
        source: Box<WaveError>,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for WaveError {
    fn from(e: std::io::Error) -> Self {
        WaveError::Io(e.to_string())
    }
}
