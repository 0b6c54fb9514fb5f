use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-positive variance at exposure {t}, pixel ({i}, {j})")]
    NonPositiveVariance { t: usize, i: usize, j: usize },
    #[error("non-finite value at exposure {t}, pixel ({i}, {j})")]
    NonFiniteValue { t: usize, i: usize, j: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("kernel of side {kernel} does not fit a {height}x{width} image")]
    KernelTooLarge { kernel: usize, height: usize, width: usize },
    #[error("kernel side {0} is even; kernels need a center pixel")]
    EvenKernel(usize),

    #[error("invalid PSF set: {0}")]
    InvalidPsf(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("latent image has a negative pixel at ({i}, {j})")]
    NegativeLatent { i: usize, j: usize },

    #[error("forward trace does not belong to these parameters and stack: {0}")]
    TraceMismatch(String),
    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("gradient became non-finite at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("source {index} lies outside the {height}x{width} frame")]
    SourceOutOfFrame { index: usize, height: usize, width: usize },
    #[error("PSF kernel of side {size} captures only {captured:.4} of the profile flux (need {required})")]
    PsfTruncation { size: usize, captured: f64, required: f64 },
    #[error("no background pixels satisfy the dilation constraint")]
    EmptyBackground,

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("{0} unexpected bytes after payload")]
    TrailingData(u64),
    #[error("payload checksum mismatch: header {expected:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { expected: u32, computed: u32 },
    #[error("checkpoint version {found} does not match supported version {expected}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("corrupt checkpoint payload: {0}")]
    CorruptPayload(String),
    #[error("display range is degenerate (lo = {lo}, hi = {hi})")]
    DegenerateRange { lo: f64, hi: f64 },
    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// True for errors caused by malformed or unreadable files.
    pub fn is_format(&self) -> bool {
        matches!(
            self,
            Error::BadMagic(_)
                | Error::UnsupportedVersion(_)
                | Error::InvalidHeader(_)
                | Error::TruncatedPayload { .. }
                | Error::TrailingData(_)
                | Error::ChecksumMismatch { .. }
                | Error::VersionMismatch { .. }
                | Error::CorruptPayload(_)
                | Error::Io(_)
        )
    }

    /// True for numerical breakdowns during fitting.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. })
    }
}
