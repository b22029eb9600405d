//! CSV data files, run configuration and result persistence.

mod config;
mod data;
mod results;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::pipeline::SolveError;

pub use config::{parse_config, parse_config_str, Discretization, ModelSource, RunConfig, CONTROL_KEYS};
pub use data::{format_number, read_matrix_csv, read_observations, write_matrix_csv, write_observations};
pub use results::{format_summary, summary_from_dir, write_results, Manifest, RESULT_FILES};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Csv { path: PathBuf, msg: String },
    #[error("{}", unknown_key_message(.section, .key, .suggestion))]
    UnknownKey {
        section: String,
        key: String,
        suggestion: Option<String>,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error("model: {0}")]
    Model(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

impl IoError {
    /// Whether the error is a numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, IoError::Solve(SolveError::Numerical(_)))
    }

    fn file(path: &Path, source: std::io::Error) -> Self {
        IoError::File {
            path: path.to_path_buf(),
            source,
        }
    }

    fn csv(path: &Path, msg: impl Into<String>) -> Self {
        IoError::Csv {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }
}

fn unknown_key_message(section: &str, key: &str, suggestion: &Option<String>) -> String {
    let place = if section.is_empty() {
        "at the top level".to_string()
    } else {
        format!("in [{section}]")
    };
    match suggestion {
        Some(s) => format!("unknown key `{key}` {place}; did you mean `{s}`?"),
        None => format!("unknown key `{key}` {place}"),
    }
}
