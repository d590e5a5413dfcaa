use serde_json::json;

#[derive(Debug)]
pub enum CliError {
    /// Malformed or inconsistent configuration; exit code 2.
    Config { message: String, key: Option<String> },
    /// A computation failed; exit code 1.
    Compute(perstab::Error),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            CliError::Config { message, key } => json!({ "error": "config", "message": message, "key": key }),
            CliError::Compute(e) => json!({ "error": "compute", "message": e.to_string(), "detail": format!("{e:?}") }),
            CliError::Io(message) => json!({ "error": "io", "message": message }),
        }
    }

    pub fn config(message: impl Into<String>, key: &str) -> Self {
        CliError::Config { message: message.into(), key: Some(key.into()) }
    }
}

impl From<perstab::Error> for CliError {
    fn from(e: perstab::Error) -> Self {
        match e {
            // Shape and argument mismatches trace back to the configuration.
            perstab::Error::InvalidInput(message) => CliError::Config { message, key: None },
            other => CliError::Compute(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config { message, .. } => write!(f, "configuration error: {message}"),
            CliError::Compute(e) => write!(f, "{e}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}
