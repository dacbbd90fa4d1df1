//! Error surface shared across the crate.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shape or dimension mismatch; the message carries the offending shapes.
    Dim(String),
    /// Non-finite values or degenerate numeric state (zero rows, NaN loss).
    Numeric(String),
    /// Invalid configuration (bad dims, unknown modes, infeasible splits).
    Config(String),
    /// Broken API precondition (non-scalar loss, epoch out of range).
    Contract(String),
    /// Dataset or label problems (too few identities, label out of range).
    Data(String),
    /// File system failure, wrapping the underlying message.
    Io(String),
    /// Container file does not start with the expected magic bytes.
    BadMagic,
    /// Container format version is not supported.
    BadVersion(u16),
    /// Container file ends before the declared payload.
    Truncated,
    /// Container checksum does not match the stored CRC32.
    CrcMismatch,
    /// Container is structurally invalid (bad UTF-8 name, duplicate entry).
    Malformed(String),
    /// A verification suite (gradient check) exceeded its tolerance.
    Verification(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(m) => write!(f, "dimension error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
            Error::BadMagic => write!(f, "container error: bad magic bytes"),
            Error::BadVersion(v) => write!(f, "container error: unsupported format version {v}"),
            Error::Truncated => write!(f, "container error: truncated file"),
            Error::CrcMismatch => write!(f, "container error: CRC32 mismatch"),
            Error::Malformed(m) => write!(f, "container error: {m}"),
            Error::Verification(m) => write!(f, "verification failure: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Process exit code contract: 0 success, 2 config/data, 3 numeric, 4 verification.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) => 3,
        Error::Verification(_) => 4,
        _ => 2,
    }
}
