use std::fmt;
use std::path::Path;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DIVERGED: i32 = 2;
    pub const IO: i32 = 3;
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(bait::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use bait::Error as E;
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Core(e) => match e {
                E::Divergence { .. } | E::DegenerateWeight { .. } | E::NotNormalized { .. } => exit::DIVERGED,
                E::Io(_) | E::Json(_) | E::Csv(_) | E::Parse { .. } | E::Checkpoint(_) | E::CheckpointVersion { .. } => {
                    exit::IO
                }
                _ => exit::USAGE,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<bait::Error> for CliError {
    fn from(e: bait::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

/// Attaches the offending path to an I/O error.
pub fn at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Core(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}
