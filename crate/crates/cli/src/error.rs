use std::path::Path;

use serde::Serialize;
use thiserror::Error;

/// One validation finding. `line` counts the header as line 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Issue {
    pub file: String,
    pub line: Option<usize>,
    pub column: Option<String>,
    pub reason: String,
}

impl Issue {
    pub fn new(file: &str, line: Option<usize>, column: Option<&str>, reason: &str) -> Self {
        Self {
            file: file.into(),
            line,
            column: column.map(String::from),
            reason: reason.into(),
        }
    }

    pub fn file(file: &str, reason: String) -> Self {
        Self::new(file, None, None, &reason)
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("input validation failed with {} issue(s)", .0.len())]
    Invalid(Vec<Issue>),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Pipeline(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn issues(&self) -> Vec<Issue> {
        match self {
            CliError::Invalid(v) => v.clone(),
            CliError::Io { path, source } => vec![Issue::file(path, source.to_string())],
            other => vec![Issue::file("", other.to_string())],
        }
    }

    /// Machine-readable form written to stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let kind = match self {
            CliError::Invalid(_) => "validation",
            CliError::Io { .. } => "io",
            CliError::Pipeline(_) => "pipeline",
            CliError::Usage(_) => "usage",
        };
        let mut v = serde_json::json!({ "error": kind, "message": self.to_string() });
        if let CliError::Invalid(issues) = self {
            v["issues"] = serde_json::to_value(issues).expect("serializable issues");
        }
        v
    }
}

macro_rules! pipeline_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Pipeline(e.to_string())
            }
        })*
    };
}

pipeline_from!(
    epigam::infection::InfectionError,
    epigam::nowcast::NowcastError,
    epigam::hosp::HospError,
    epigam::icu::IcuError,
    csv::Error,
    serde_json::Error
);
