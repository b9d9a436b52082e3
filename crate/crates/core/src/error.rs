use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("kernel index {index} out of range 1..={k_max}")]
    KernelIndex { index: usize, k_max: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("kernel moves zero bytes; arithmetic intensity is undefined")]
    ZeroBytes,

    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("model {model}: duplicate cell (gpu {gpu_pct}%, batch {batch})")]
    DuplicateCell { model: String, gpu_pct: u32, batch: u32 },

    #[error("model {model}: latency must be positive at (gpu {gpu_pct}%, batch {batch})")]
    NonPositiveLatency { model: String, gpu_pct: u32, batch: u32 },

    #[error("model {model}: latency increases with GPU% at {}", .cells.join(", "))]
    NonMonotone { model: String, cells: Vec<String> },

    #[error("model {model}: missing cell (gpu {gpu_pct}%, batch {batch})")]
    MissingCell { model: String, gpu_pct: u32, batch: u32 },

    #[error("profile source holds {0} models, expected exactly one")]
    NotSingleModel(usize),

    #[error("model {model}: batch {batch} exceeds max batch {max_batch}")]
    BatchTooLarge { model: String, batch: u32, max_batch: u32 },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("model {model}: runtime {runtime_ms} ms exceeds SLO {slo_ms} ms")]
    Admission {
        model: String,
        runtime_ms: f64,
        slo_ms: f64,
    },

    #[error(
        "exhaustive search guard exceeded: {candidates} candidates in one slot (limit {limit}); use a smaller instance"
    )]
    GuardExceeded { candidates: u128, limit: u128 },

    #[error("GPU oversubscribed: {0}")]
    Oversubscribed(String),

    #[error("reconfiguration rejected: {0}")]
    Reconfiguration(String),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line()).unwrap_or(0);
        Error::Csv {
            line,
            message: e.to_string(),
        }
    }
}
