//! Multiplexed transformer inference with structured pruning.
//!
//! This crate studies two throughput levers for transformer encoders and the
//! search problem their combination creates:
//!
//! * **Data multiplexing** ([`muxer`]): `N` input sequences are compressed
//!   into a single sequence via fixed Gaussian key vectors, processed in one
//!   forward pass, and recovered by `N` learned demultiplexing maps.
//! * **Structured pruning** ([`pruner`]): attention heads, whole sublayers,
//!   hidden dimensions and FFN intermediate dimensions are masked and then
//!   physically compacted into a smaller dense model.
//!
//! The remaining modules make the combination measurable and searchable:
//! [`encoder`] is a mask-aware pre-layer-norm encoder, [`distiller`] carries
//! the layer-wise distillation loss used while pruning, [`train`] runs
//! desk-scale training phases with hand-derived gradients (verified by finite
//! differences), [`mod@bench`] measures throughput in wall-clock or deterministic
//! FLOP-proxy mode, and [`planner`] fits interpolation surrogates over
//! measured `(N, s)` points to predict the best width/sparsity pairs under an
//! accuracy-loss budget.
//!
//! Start with the runnable examples (`cargo run --example <name>`), or the
//! `muxprune` binary for the file-based workflow.

pub mod bench;
pub mod distiller;
pub mod encoder;
pub mod io;
pub mod math;
pub mod muxer;
pub mod planner;
pub mod pruner;
pub mod train;

pub use encoder::{EncoderConfig, EncoderModel, LayerTrace};
pub use math::{Matrix, RngKey};
pub use muxer::{MuxKit, TokenSequence};
pub use planner::MeasurementRecord;
pub use pruner::{MaskScores, SparsitySpec};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty request: {0}")]
    Empty(&'static str),
    #[error("index {index} out of range for {what} of size {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("degenerate model: {0}")]
    Degenerate(String),
    #[error("training diverged: loss {loss} exceeds 10x the initial loss {initial}")]
    Divergence { loss: f64, initial: f64 },
    #[error("incomplete measurement grid: {0}")]
    IncompleteGrid(String),
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),
    #[error("duplicate measurement for ({task}, {n}, {s})")]
    DuplicateMeasurement { task: String, n: f64, s: f64 },
    #[error("query ({n}, {s}) is outside the fitted domain and has no measured record")]
    OutOfDomain { n: f64, s: f64 },
    #[error("no measured throughput for ({n}, {s}) on task {task}")]
    MissingMeasurement { task: String, n: f64, s: f64 },
    #[error("invalid baseline throughput {0}; baseline must be positive")]
    InvalidBaseline(f64),
    #[error(
        "repetition finished in {elapsed_ms:.3} ms, below the {floor_ms:.3} ms timing floor; \
         increase the batch or sequence length"
    )]
    InsufficientWork { elapsed_ms: f64, floor_ms: f64 },
    #[error("{path}:{row}: {msg}")]
    Parse {
        path: String,
        row: usize,
        msg: String,
    },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
