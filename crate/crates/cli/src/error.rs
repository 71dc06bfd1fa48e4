use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use advframe::{Error, FormatError};

/// Everything a command can fail with, each mapped to its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Unknown flag, missing flag or unparsable value.
    Usage(clap::Error),
    Io { path: PathBuf, source: io::Error },
    Core(Error),
    Invalid(String),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// Short stable tag for the failure class.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { source, .. } => io_kind(source),
            CliError::Invalid(_) => "invalid-argument",
            CliError::Core(e) => match e {
                Error::Io { source, .. } => io_kind(source),
                Error::Format(FormatError::GeometryMismatch(_) | FormatError::KindMismatch { .. }) => "geometry-mismatch",
                Error::Format(_) => "corrupt-file",
                Error::Geometry(_) | Error::Shape { .. } => "geometry-mismatch",
                Error::InvalidArgument(_) | Error::LabelOutOfRange { .. } => "invalid-argument",
                Error::NonFinite(_) | Error::NonFiniteGradient(_) | Error::Diverged { .. } => "diverged",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "usage" => 2,
            "missing-file" => 3,
            "io" => 4,
            "corrupt-file" => 5,
            "geometry-mismatch" => 6,
            "invalid-argument" => 7,
            "diverged" => 8,
            _ => 1,
        }
    }

    /// One line: `error code=<n> kind=<tag> message="<text>"`.
    pub fn machine_line(&self) -> String {
        let msg = match self {
            CliError::Usage(e) => e.kind().to_string() + ": " + e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: "),
            other => other.to_string(),
        };
        let msg = msg.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
        format!("error code={} kind={} message=\"{msg}\"", self.exit_code(), self.kind())
    }
}

fn io_kind(e: &io::Error) -> &'static str {
    if e.kind() == io::ErrorKind::NotFound {
        "missing-file"
    } else {
        "io"
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(e) => write!(f, "{e}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Invalid(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}
