use std::path::PathBuf;

/// Everything that can go wrong in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("numeric error{}: {message}", iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    Numeric {
        message: String,
        iteration: Option<usize>,
    },

    #[error("degenerate latent: population std {std:e} is below 1e-12")]
    DegenerateLatent { std: f64 },

    #[error("construction failed at stage `{stage}`: {message}")]
    Construction { stage: String, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{failed} batch job(s) failed")]
    Batch { code: i32, failed: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Error::Input(message.into())
    }

    pub fn capability(message: impl Into<String>) -> Self {
        Error::Capability(message.into())
    }

    pub fn numeric(message: impl Into<String>, iteration: Option<usize>) -> Self {
        Error::Numeric {
            message: message.into(),
            iteration,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wrap with the name of the pipeline stage that failed.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with stage tags removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config { .. } => 2,
            Error::Numeric { .. } | Error::DegenerateLatent { .. } => 3,
            Error::Capability(_) => 4,
            Error::Batch { code, .. } => *code,
            _ => 1,
        }
    }
}

/// Attach a path to I/O results.
pub(crate) trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_root_cause() {
        assert_eq!(Error::config("attack.iterations", "must be >= 1").exit_code(), 2);
        assert_eq!(Error::numeric("nan", Some(3)).exit_code(), 3);
        assert_eq!(Error::capability("no text").exit_code(), 4);
        assert_eq!(Error::input("bad").exit_code(), 1);
        let staged = Error::numeric("nan", Some(7)).in_stage("whitebox");
        assert_eq!(staged.exit_code(), 3);
        assert!(staged.to_string().contains("iteration 7"));
    }
}
