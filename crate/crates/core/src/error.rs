use thiserror::Error;

use crate::tensor::BufferId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("attention over an empty kv cache")]
    EmptyCache,

    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("kv cache full (max_seq {max_seq})")]
    CacheFull { max_seq: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("sequence length {len} outside [1, {max}]")]
    LengthOutOfRange { len: usize, max: usize },

    #[error("prompt of {prompt} tokens plus {gen} generated exceeds max_seq {max_seq}")]
    PromptTooLong {
        prompt: usize,
        gen: usize,
        max_seq: usize,
    },

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("capture already open for length {0}")]
    CaptureInProgress(usize),

    #[error("dynamic kernel `{0}` cannot be captured")]
    CaptureViolation(String),

    #[error("kernel `{kernel}` binds buffer {buffer} outside workspace and weights")]
    ForeignBuffer { kernel: String, buffer: BufferId },

    #[error("capture session is not open")]
    SessionClosed,

    #[error("capture session recorded no kernels")]
    EmptyCapture,

    #[error("buffer {buffer} has shape {actual:?}, graph froze {frozen:?}")]
    ReplayShapeError {
        buffer: BufferId,
        frozen: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("graph for length {graph_len} replayed with {cached} cached positions")]
    WrongLength { graph_len: usize, cached: usize },

    #[error("graph length {graph_len} inserted under key {key}")]
    KeyMismatch { key: usize, graph_len: usize },

    #[error("warm-up range of {requested} graphs exceeds cache capacity {capacity}")]
    WarmupExceedsCapacity { requested: usize, capacity: usize },

    #[error("device stopped")]
    DeviceStopped,

    #[error("static kernel `{0}` submitted in a fused dynamic block")]
    StaticInFusedBlock(String),

    #[error("unknown event {0}")]
    UnknownEvent(usize),

    #[error("percentile of an empty sample set")]
    EmptySamples,

    #[error("unknown buffer {0}")]
    UnknownBuffer(BufferId),

    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },

    #[error("config parse error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
