use thiserror::Error;

/// Errors raised across the crate. Messages carry the short diagnostic
/// strings the CLI prints verbatim.
#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient audio: {samples} samples, need at least {needed}")]
    InsufficientAudio { samples: usize, needed: usize },
    #[error("unsupported rate: {0} Hz (expected 16000)")]
    UnsupportedRate(u32),
    #[error("invalid audio: {0}")]
    InvalidAudio(String),
    #[error("degenerate statistics")]
    DegenerateStatistics,
    #[error("empty weights")]
    EmptyWeights,
    #[error("code overflow: {code} outside [{lo}, {hi}]")]
    CodeOverflow { code: i32, lo: i32, hi: i32 },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid ratio: {0}")]
    InvalidRatio(f64),
    #[error("batch too small: {0} rows")]
    BatchTooSmall(usize),
    #[error("no positives")]
    NoPositives,
    #[error("recording flagged: {0:?}")]
    RecordingFlagged(Vec<usize>),
    #[error("undefined similarity")]
    UndefinedSimilarity,
    #[error("insufficient passes: {0}")]
    InsufficientPasses(usize),
    #[error("incomplete scales: got {0}, need 3")]
    IncompleteScales(usize),
    #[error("insufficient attack data: {0}")]
    InsufficientAttackData(String),
    #[error("degenerate trials")]
    DegenerateTrials,
    #[error("undefined correlation")]
    UndefinedCorrelation,
    #[error("no signal")]
    NoSignal,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
