use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value")]
    NonFinite,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: header declares {expected} bytes of data, found {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },
    #[error("manifest length mismatch: {vectors} vectors, {records} manifest records")]
    ManifestMismatch { vectors: usize, records: usize },
    #[error("prompt bank misaligned: {0}")]
    BankMisaligned(String),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error("taxonomy mismatch: model trained on {model}, target is {target}")]
    TaxonomyMismatch { model: String, target: String },
    #[error("corrupt model file: {0}")]
    CorruptModel(String),
    #[error("head kind mismatch: expected {expected}, found {found}")]
    KindMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("label index {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("image {0:?} has no caption embedding for the enabled caption types")]
    MissingCaption(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the arithmetic itself rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite | Error::ZeroNorm)
    }
}
