use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("shape mismatch on {what}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("patch {patch:?} does not fit in volume {volume:?}")]
    PatchTooLarge { patch: [usize; 3], volume: [usize; 3] },

    #[error("label {label} out of range for {num_labels} labels")]
    LabelOutOfRange { label: u16, num_labels: usize },

    #[error("bad magic bytes {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported NIfTI datatype code {code} (offset 70)")]
    UnsupportedDatatype { code: i16 },

    #[error("invalid NIfTI header field `{field}` at offset {offset}: {reason}")]
    BadHeader {
        field: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("truncated data: need {needed} bytes at offset {offset}, have {available}")]
    TruncatedData {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("manifest line {line}: expected {expected} modalities, found {found}")]
    InconsistentModalityCount {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("manifest line {line}: duplicate case id `{case_id}`")]
    DuplicateCaseId { line: usize, case_id: String },

    #[error("manifest line {line}: {reason}")]
    BadManifestLine { line: usize, reason: String },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("expected {expected} modality inputs, got {actual}")]
    ModalityCountMismatch { expected: usize, actual: usize },

    #[error("backward called without a cached forward pass")]
    NoCachedForward,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint config mismatch on `{key}`: checkpoint has {found}, expected {expected}")]
    ConfigMismatch {
        key: String,
        found: String,
        expected: String,
    },

    #[error("checkpoint is missing parameter `{0}`")]
    MissingParam(String),

    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("inpainting mask selects no voxels")]
    EmptyMask,

    #[error("index {index} out of range for {len} categories")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    DegenerateBatch(usize),

    #[error("embedding {0} has zero norm")]
    ZeroVector(usize),

    #[error("epoch {epoch} outside schedule range [0, {total}]")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("region list is empty")]
    EmptyRegionList,

    #[error("phantom spec infeasible: {0}")]
    SpecInfeasible(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(what: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
