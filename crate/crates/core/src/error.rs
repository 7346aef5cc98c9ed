//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // NIfTI parsing and writing
    #[error("bad NIfTI magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("bad NIfTI dimensions: {0}")]
    BadDims(String),
    #[error("truncated data: expected {expected} payload bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("header is {0} bytes, expected 348")]
    BadHeaderLength(usize),
    #[error("sizeof_hdr is {0} in either byte order, expected 348")]
    BadSizeofHdr(i32),
    #[error("vox_offset {0} is inside the header")]
    BadVoxOffset(f32),
    #[error("volume has {0} channels; only single-channel volumes can be written")]
    MultiChannel(usize),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // Volume geometry
    #[error("no CT voxel exceeds the blank threshold {0} HU")]
    AllBlank(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid spacing {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("channel label mismatch: {0}")]
    LabelMismatch(String),

    // Registration
    #[error("image has zero intensity range")]
    ConstantImage,

    // Masking
    #[error("patch {patch:?} does not tile crop {crop:?}")]
    NonDivisible { crop: [usize; 3], patch: [usize; 3] },

    // Network and training
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("bad input shape: {0}")]
    BadShape(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("empty corpus")]
    EmptyCorpus,

    // Checkpoints
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("tensor {name} spans [{offset}, {end}) beyond blob of {blob_len} bytes")]
    BlobOutOfBounds {
        name: String,
        offset: usize,
        end: usize,
        blob_len: usize,
    },

    // Inference
    #[error("overlap {0} not in [0, 1)")]
    BadOverlap(f64),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the data rather than by how the tool was invoked.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::BadConfig(_) | Error::BadOverlap(_))
    }
}
