use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("missing {artifact}: {}", path.display())]
    MissingInput {
        artifact: &'static str,
        path: PathBuf,
    },

    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] pmech_core::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::MissingInput { .. } => "missing_input",
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Core(pmech_core::Error::Io { .. }) => "io",
            CliError::Core(_) => "runtime",
        }
    }

    /// The error as one line of `key="value"` fields.
    pub fn line(&self) -> String {
        let fields = match self {
            CliError::MissingInput { artifact, path } => {
                format!(
                    "artifact={} path={}",
                    quoted(artifact),
                    quoted(&path.display().to_string())
                )
            }
            CliError::Core(pmech_core::Error::Io { path, source }) => {
                format!(
                    "path={} message={}",
                    quoted(&path.display().to_string()),
                    quoted(&source.to_string())
                )
            }
            other => format!("message={}", quoted(&other.to_string())),
        };
        format!("error kind={} {fields}", self.kind())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::MissingInput { .. } => 3,
            CliError::Core(_) => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_stay_on_one_line() {
        let e = CliError::Config("bad\nvalue \"x\"".into());
        assert_eq!(e.line(), r#"error kind=config message="bad\nvalue \"x\"""#);
        let e = CliError::MissingInput {
            artifact: "probe checkpoint",
            path: PathBuf::from("/tmp/a b/probe.pmck"),
        };
        assert_eq!(
            e.line(),
            r#"error kind=missing_input artifact="probe checkpoint" path="/tmp/a b/probe.pmck""#
        );
        assert_eq!(e.exit_code(), 3);
    }
}
