use std::path::PathBuf;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("unsupported audio in {count} file(s):\n{}", list_offenders(.offenders))]
    UnsupportedAudio { count: usize, offenders: Vec<(PathBuf, String)> },

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] polyglot_core::Error),
}

fn list_offenders(offenders: &[(PathBuf, String)]) -> String {
    offenders.iter().map(|(p, why)| format!("  {}: {why}", p.display())).collect::<Vec<_>>().join("\n")
}

impl HarnessError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        HarnessError::Io { context: context.into(), source }
    }

    /// Process exit status: 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use polyglot_core::Error as E;
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Data(_) | HarnessError::UnsupportedAudio { .. } | HarnessError::Io { .. } => 2,
            HarnessError::Core(e) => match e {
                E::NonFinite(_) => 3,
                E::Config(_) | E::StrategyChange { .. } => 1,
                _ => 2,
            },
        }
    }
}
