//! Unified error type for the library and the CLI exit-code contract.

use std::path::{Path, PathBuf};

use thiserror::Error;

/// Everything that can go wrong across the pipeline.
///
/// Variants are grouped by how the CLI reports them: configuration problems
/// exit with 2, missing inputs with 3, malformed data with 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration or bad argument values (threshold conflicts,
    /// out-of-range coordinates, fractions outside [0, 1], ...).
    #[error("invalid configuration: {0}")]
    Validation(String),

    /// An input path that simply is not there.
    #[error("input not found: {}", .0.display())]
    MissingInput(PathBuf),

    /// I/O failure on a named path.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// OSM XML that does not parse; `offset` is the byte position in the
    /// (decompressed) document where the parser gave up.
    #[error("OSM XML parse error at byte {offset}: {message}")]
    OsmXml { offset: usize, message: String },

    /// A malformed line in a JSONL file (panorama metadata, manifests,
    /// predictions). Line numbers are 1-based.
    #[error("{path}:{line}: {message}")]
    JsonLine {
        path: String,
        line: usize,
        message: String,
    },

    /// Semantically bad data that parsed fine (duplicate ids, unknown seed
    /// panorama, empty networks, unsplittable datasets, ...).
    #[error("{0}")]
    Data(String),

    /// PNG decode/encode problems.
    #[error("image {path}: {message}")]
    Image { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wrap an I/O error with the path it happened on. `NotFound` on open is
    /// promoted to [`Error::MissingInput`] so the CLI can distinguish "you
    /// pointed me at nothing" from "the disk hurt me".
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(path.to_path_buf())
        } else {
            Error::Io {
                path: path.display().to_string(),
                source,
            }
        }
    }

    /// Process exit code for this error: 2 validation, 3 missing input,
    /// 4 anything data-shaped.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 2,
            Error::MissingInput(_) => 3,
            _ => 4,
        }
    }
}
