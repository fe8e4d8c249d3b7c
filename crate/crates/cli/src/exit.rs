//! Errors tagged with the process exit code they map to.

use std::fmt;

pub const EXIT_USAGE: u8 = 3;
pub const EXIT_EVAL: u8 = 4;

#[derive(Debug)]
pub enum Exit {
    /// Bad arguments or configuration.
    Usage(anyhow::Error),
    /// A computation failed.
    Eval(anyhow::Error),
}

impl Exit {
    pub fn code(&self) -> u8 {
        match self {
            Exit::Usage(_) => EXIT_USAGE,
            Exit::Eval(_) => EXIT_EVAL,
        }
    }
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exit::Usage(e) | Exit::Eval(e) => write!(f, "{e:#}"),
        }
    }
}

pub type CliResult<T> = Result<T, Exit>;

pub trait ResultExt<T> {
    fn usage(self) -> CliResult<T>;
    fn eval(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> ResultExt<T> for Result<T, E> {
    fn usage(self) -> CliResult<T> {
        self.map_err(|e| Exit::Usage(e.into()))
    }

    fn eval(self) -> CliResult<T> {
        self.map_err(|e| Exit::Eval(e.into()))
    }
}
