//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("phantom sizing: {0}")]
    PhantomSizing(String),

    #[error("unknown region label '{0}'")]
    UnknownRegion(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("negative value in {0}")]
    Negative(&'static str),

    #[error("pixel index {index} out of range (n_p = {n_p})")]
    PixelOutOfRange { index: usize, n_p: usize },

    #[error(
        "kNN: k = {k} exceeds candidate count {candidates} in the search window at pixel {pixel}"
    )]
    KnnWindowTooSmall {
        k: usize,
        candidates: usize,
        pixel: usize,
    },

    #[error("composite window [{start}, {end}] s does not align with frame boundaries")]
    MisalignedWindow { start: f64, end: f64 },

    #[error("counts are not integers: element {index} = {value}")]
    NonIntegerCounts { index: usize, value: f64 },

    #[error(
        "training diverged at iteration {iteration}: loss {loss:.6e} exceeds 1e3 x initial loss {initial:.6e}"
    )]
    TrainingDiverged {
        iteration: usize,
        loss: f64,
        initial: f64,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("file format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Tag an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
