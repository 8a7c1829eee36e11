use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures raised by the simulated mesh runtime.
#[derive(Debug, Error)]
pub enum MeshError {
    #[error("duplicate mesh axis `{0}`")]
    DuplicateAxis(String),
    #[error("mesh axis `{0}` has size zero")]
    ZeroSize(String),
    #[error("mesh has no axes")]
    Empty,
    #[error("unknown mesh axis `{0}`")]
    UnknownAxis(String),
    #[error("expected {expected} worker inputs, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error(
        "deadlock suspected: worker {waiting:?} timed out after {timeout_ms} ms in {during}; \
         unarrived: {unarrived:?}"
    )]
    Timeout {
        waiting: Vec<usize>,
        during: String,
        unarrived: Vec<Vec<usize>>,
        timeout_ms: u128,
    },
    #[error("worker {coord:?} shut down because worker {origin:?} failed")]
    Shutdown { coord: Vec<usize>, origin: Vec<usize> },
    #[error("worker {coord:?} panicked: {message}")]
    WorkerPanicked { coord: Vec<usize>, message: String },
    #[error("collective `{op}` on worker {coord:?}: length {got} does not match {expected}")]
    CollectiveShape {
        op: &'static str,
        coord: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("unexpected payload type from worker {from}")]
    PayloadType { from: usize },
    #[error("worker {from:?} is not a mesh neighbor of {to:?}")]
    NotNeighbor { from: Vec<usize>, to: Vec<usize> },
    #[error("mesh worker threads are gone")]
    Disconnected,
}

/// Volume file errors. Each variant maps to a distinct numeric code.
#[derive(Debug, Error)]
pub enum SpvError {
    #[error("{path}: bad magic {found:?}, expected \"SPV1\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: truncated ({what}): expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{path}: unknown dtype code {code}")]
    UnknownDtype { path: PathBuf, code: u8 },
    #[error("{path}: dtype {found} where {expected} was expected")]
    DtypeMismatch {
        path: PathBuf,
        expected: &'static str,
        found: &'static str,
    },
    #[error("{path}: label {value} at flat index {index} outside {{0,1,2}}")]
    LabelRange { path: PathBuf, value: u8, index: usize },
    #[error("{path}: trailing bytes after payload ({extra})")]
    TrailingBytes { path: PathBuf, extra: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SpvError {
    pub fn code(&self) -> u8 {
        match self {
            SpvError::BadMagic { .. } => 1,
            SpvError::Truncated { .. } => 2,
            SpvError::UnknownDtype { .. } => 3,
            SpvError::DtypeMismatch { .. } => 4,
            SpvError::LabelRange { .. } => 5,
            SpvError::TrailingBytes { .. } => 6,
            SpvError::Io { .. } => 7,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Spv(#[from] SpvError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error(
        "dimension `{dim}` of extent {extent} is not divisible by mesh axis `{axis}` of size {axis_size}"
    )]
    Indivisible {
        dim: String,
        extent: usize,
        axis: String,
        axis_size: usize,
    },
    #[error(
        "halo margin {margin} on `{dim}` exceeds local extent {local_extent}; \
         use a smaller mesh axis or a larger volume"
    )]
    HaloTooWide {
        dim: String,
        margin: usize,
        local_extent: usize,
    },
    #[error("kernel extent {0} is even; only odd kernels are supported")]
    EvenKernel(usize),
    #[error("{what}: expected {expected} channels, got {got}")]
    ChannelMismatch {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("shard too small at depth {depth} on axis `{axis}`: {reason}")]
    ShardTooSmall {
        depth: usize,
        axis: String,
        reason: String,
    },
    #[error("no saved forward state for `{0}` (backward without forward, or run twice)")]
    MissingTape(String),
    #[error("augmentation: {0}")]
    Augment(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
