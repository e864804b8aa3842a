use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("point ({site}, {step}) is outside the strip")]
    OutOfRange { site: i64, step: i64 },
    #[error("unknown gate mnemonic `{0}`")]
    UnknownGate(String),
    #[error("unknown tessel: {0}")]
    UnknownTessel(String),
    #[error("invalid circuit: {0}")]
    InvalidCircuit(String),
    #[error("circuit parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("fragment too large: {got} open {side} qubits (cap {cap})")]
    FragmentTooLarge {
        side: &'static str,
        got: usize,
        cap: usize,
    },
    #[error("generator exceeded {0} attempts")]
    RetryExhausted(usize),
    #[error("invalid setting {setting} at site {site} (alphabet {alphabet})")]
    InvalidSetting {
        site: usize,
        setting: usize,
        alphabet: usize,
    },
    #[error("settings length {got} does not match {expected} sites")]
    LengthMismatch { got: usize, expected: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("stale cache: {0}")]
    StaleCache(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("tomography: {0}")]
    Tomography(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
