//! Command failures and their exit codes.

use std::fmt;
use std::path::Path;

use skyprior::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self { code: EXIT_NUMERIC, message: message.into() }
    }

    pub fn format(message: impl Into<String>) -> Self {
        Self { code: EXIT_IO, message: message.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::format(format!("{}: {e}", path.display()))
    }

    /// Engine error with the file it came from.
    pub fn at(path: &Path, e: Error) -> Self {
        let f = Self::from(e);
        Self { message: format!("{}: {}", path.display(), f.message), ..f }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::BadMagic(_)
            | Error::UnsupportedVersion(_)
            | Error::InvalidHeader(_)
            | Error::TruncatedPayload { .. }
            | Error::TrailingData(_)
            | Error::ChecksumMismatch { .. }
            | Error::VersionMismatch { .. }
            | Error::CorruptPayload(_)
            | Error::Io(_)
            | Error::NonFiniteValue { .. }
            | Error::NonPositiveVariance { .. }
            | Error::ShapeMismatch(_)
            | Error::InvalidPsf(_)
            | Error::TraceMismatch(_) => EXIT_IO,
            Error::NonFiniteLoss { .. }
            | Error::NonFiniteGradient { .. }
            | Error::NegativeLatent { .. }
            | Error::EmptyBackground
            | Error::DegenerateRange { .. } => EXIT_NUMERIC,
            Error::KernelTooLarge { .. }
            | Error::EvenKernel(_)
            | Error::InvalidConfig(_)
            | Error::SourceOutOfFrame { .. }
            | Error::PsfTruncation { .. } => EXIT_USAGE,
        };
        Self { code, message: e.to_string() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}
