// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use seed_head::{Error as CoreError, TensorFileError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// A config or spec field failed to parse or is out of range; `pointer` is a JSON pointer.
    #[error("{pointer}: {message}")]
    Config { pointer: String, message: String },
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Tensor {
        path: PathBuf,
        #[source]
        source: TensorFileError,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_ORACLE: i32 = 2;
pub const EXIT_IO: i32 = 3;

impl HarnessError {
    pub fn config(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        HarnessError::Config {
            pointer: pointer.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn tensor(path: impl Into<PathBuf>, source: TensorFileError) -> Self {
        match source {
            TensorFileError::Io(e) => HarnessError::io(path, e),
            other => HarnessError::Tensor {
                path: path.into(),
                source: other,
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Io { .. } | HarnessError::Tensor { .. } => EXIT_IO,
            HarnessError::Core(CoreError::Tensor(_)) => EXIT_IO,
            _ => EXIT_VALIDATION,
        }
    }
}
