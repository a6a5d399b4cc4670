use std::fmt;

/// Exit code 1: bad input, config or artifacts. Exit code 2: failure while
/// running.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Validation,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Runtime,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation => 1,
            ErrorKind::Runtime => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<xfer::Error> for CliError {
    fn from(e: xfer::Error) -> Self {
        use xfer::Error as E;
        let kind = match &e {
            E::Io { .. } | E::NonFinite(_) | E::Csv(_) | E::Json(_) => ErrorKind::Runtime,
            _ => ErrorKind::Validation,
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}
