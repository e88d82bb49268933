use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // NIfTI ingestion
    #[error("not a NIfTI-1 single-file image: {0}")]
    BadMagic(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensionality: dim[0] = {0}, expected 3")]
    UnsupportedDim(i16),
    #[error("truncated file: header promises {expected} data bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("invalid voxel spacing {0:?}")]
    InvalidSpacing([f64; 3]),

    // internal container
    #[error("malformed container header: {0}")]
    HeaderParse(String),

    #[error("affine is oblique; no axis-aligned decomposition: {0}")]
    ObliqueAffine(String),

    #[error("invalid clip range [{lo}, {hi}]")]
    InvalidRange { lo: f32, hi: f32 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dataset has zero variance")]
    ZeroVariance,
    #[error("liver mask is empty")]
    EmptyLiver,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid dropout rate {0}, expected [0, 1)")]
    InvalidRate(f64),
    #[error("batch norm needs more than one value per channel in train mode")]
    DegenerateBatch,
    #[error("invalid fan-in {0}")]
    InvalidFanIn(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("training log is empty")]
    EmptyLog,
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("lesion sphere {0} is not contained in the liver ellipsoid")]
    LesionOutsideLiver(usize),
    #[error("slice extent mismatch: {0}")]
    ExtentMismatch(String),
    #[error("mask is empty")]
    EmptyMask,

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Labels errors with the pipeline stage that produced them.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage { stage, source: Box::new(e) })
    }
}
