use std::fmt;

use serde::{Deserialize, Serialize};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the deployment can report.
///
/// The variant names double as the wire error codes, so a client can rebuild
/// the same error from a response line with [`Error::from_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("a layer with this key id is already present")]
    DuplicateLayer,
    #[error("no layer with this key id")]
    LayerNotFound,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("already exists: {0}")]
    AlreadyExists(String),
    #[error("not authorized")]
    NotAuthorized,
    #[error("invalid grant: {0}")]
    InvalidGrant(String),
    #[error("invalid operation: {0}")]
    InvalidOperation(String),
    #[error("identity attribute rejected: {0}")]
    IdentityLeakRejected(String),
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("no numeric data for field {0}")]
    NoData(String),
    #[error("authentication failed")]
    AuthFailed,
    #[error("session expired")]
    SessionExpired,
    #[error("duplicate ticket: {0}")]
    DuplicateTicket(String),
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
    #[error("invalid stage: {0}")]
    InvalidStage(String),
    #[error("operation requires the master terminal")]
    RequiresMasterTerminal,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("journal error: {0}")]
    Journal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// The wire error code.
    pub fn code(&self) -> ErrorCode {
        match self {
            Error::DuplicateLayer => ErrorCode::DuplicateLayer,
            Error::LayerNotFound => ErrorCode::LayerNotFound,
            Error::InvalidInput(_) => ErrorCode::InvalidInput,
            Error::NotFound(_) => ErrorCode::NotFound,
            Error::AlreadyExists(_) => ErrorCode::AlreadyExists,
            Error::NotAuthorized => ErrorCode::NotAuthorized,
            Error::InvalidGrant(_) => ErrorCode::InvalidGrant,
            Error::InvalidOperation(_) => ErrorCode::InvalidOperation,
            Error::IdentityLeakRejected(_) => ErrorCode::IdentityLeakRejected,
            Error::InvalidField(_) => ErrorCode::InvalidField,
            Error::NoData(_) => ErrorCode::NoData,
            Error::AuthFailed => ErrorCode::AuthFailed,
            Error::SessionExpired => ErrorCode::SessionExpired,
            Error::DuplicateTicket(_) => ErrorCode::DuplicateTicket,
            Error::InvalidPayload(_) => ErrorCode::InvalidPayload,
            Error::InvalidStage(_) => ErrorCode::InvalidStage,
            Error::RequiresMasterTerminal => ErrorCode::RequiresMasterTerminal,
            Error::Protocol(_) => ErrorCode::ProtocolError,
            Error::Journal(_) | Error::Io(_) => ErrorCode::InternalError,
        }
    }

    /// The detail carried on the wire; [`Error::from_code`] turns it back
    /// into the same error.
    pub fn detail(&self) -> String {
        match self {
            Error::InvalidInput(m)
            | Error::NotFound(m)
            | Error::AlreadyExists(m)
            | Error::InvalidGrant(m)
            | Error::InvalidOperation(m)
            | Error::IdentityLeakRejected(m)
            | Error::InvalidField(m)
            | Error::NoData(m)
            | Error::DuplicateTicket(m)
            | Error::InvalidPayload(m)
            | Error::InvalidStage(m)
            | Error::Protocol(m)
            | Error::Journal(m) => m.clone(),
            other => other.to_string(),
        }
    }

    /// Rebuilds an error received over the wire.
    pub fn from_code(code: ErrorCode, message: String) -> Self {
        match code {
            ErrorCode::DuplicateLayer => Error::DuplicateLayer,
            ErrorCode::LayerNotFound => Error::LayerNotFound,
            ErrorCode::InvalidInput => Error::InvalidInput(message),
            ErrorCode::NotFound => Error::NotFound(message),
            ErrorCode::AlreadyExists => Error::AlreadyExists(message),
            ErrorCode::NotAuthorized => Error::NotAuthorized,
            ErrorCode::InvalidGrant => Error::InvalidGrant(message),
            ErrorCode::InvalidOperation => Error::InvalidOperation(message),
            ErrorCode::IdentityLeakRejected => Error::IdentityLeakRejected(message),
            ErrorCode::InvalidField => Error::InvalidField(message),
            ErrorCode::NoData => Error::NoData(message),
            ErrorCode::AuthFailed => Error::AuthFailed,
            ErrorCode::SessionExpired => Error::SessionExpired,
            ErrorCode::DuplicateTicket => Error::DuplicateTicket(message),
            ErrorCode::InvalidPayload => Error::InvalidPayload(message),
            ErrorCode::InvalidStage => Error::InvalidStage(message),
            ErrorCode::RequiresMasterTerminal => Error::RequiresMasterTerminal,
            ErrorCode::ProtocolError => Error::Protocol(message),
            ErrorCode::InternalError => Error::Journal(message),
        }
    }

    pub(crate) fn not_found(what: impl fmt::Display) -> Self {
        Error::NotFound(what.to_string())
    }

    pub(crate) fn invalid_input(what: impl fmt::Display) -> Self {
        Error::InvalidInput(what.to_string())
    }
}

/// Error codes as they appear in response lines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorCode {
    DuplicateLayer,
    LayerNotFound,
    InvalidInput,
    NotFound,
    AlreadyExists,
    NotAuthorized,
    InvalidGrant,
    InvalidOperation,
    IdentityLeakRejected,
    InvalidField,
    NoData,
    AuthFailed,
    SessionExpired,
    DuplicateTicket,
    InvalidPayload,
    InvalidStage,
    RequiresMasterTerminal,
    ProtocolError,
    InternalError,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::DuplicateLayer => "DuplicateLayer",
            ErrorCode::LayerNotFound => "LayerNotFound",
            ErrorCode::InvalidInput => "InvalidInput",
            ErrorCode::NotFound => "NotFound",
            ErrorCode::AlreadyExists => "AlreadyExists",
            ErrorCode::NotAuthorized => "NotAuthorized",
            ErrorCode::InvalidGrant => "InvalidGrant",
            ErrorCode::InvalidOperation => "InvalidOperation",
            ErrorCode::IdentityLeakRejected => "IdentityLeakRejected",
            ErrorCode::InvalidField => "InvalidField",
            ErrorCode::NoData => "NoData",
            ErrorCode::AuthFailed => "AuthFailed",
            ErrorCode::SessionExpired => "SessionExpired",
            ErrorCode::DuplicateTicket => "DuplicateTicket",
            ErrorCode::InvalidPayload => "InvalidPayload",
            ErrorCode::InvalidStage => "InvalidStage",
            ErrorCode::RequiresMasterTerminal => "RequiresMasterTerminal",
            ErrorCode::ProtocolError => "ProtocolError",
            ErrorCode::InternalError => "InternalError",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ErrorCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| Error::invalid_input(format!("unknown error code {s:?}")))
    }
}
