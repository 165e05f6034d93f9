//! Error types shared by every stage of the pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate coordinate ({x}, {y}) in layout")]
    DuplicateCoordinate { x: usize, y: usize },

    #[error("coordinate ({x}, {y}) outside {rows}x{cols} grid")]
    CoordinateOutOfRange {
        x: usize,
        y: usize,
        rows: usize,
        cols: usize,
    },

    #[error("probeset {id} has {n} probe(s); at least 2 are required")]
    ProbesetTooSmall { id: String, n: usize },

    #[error("probeset {id}: probe ranks must be contiguous from 0")]
    BadProbeRank { id: String },

    #[error("no intensity for layout probe at ({x}, {y})")]
    MissingProbe { x: usize, y: usize },

    #[error("bad intensity {value} at ({x}, {y}); intensities must be positive and finite")]
    BadIntensity { x: usize, y: usize, value: f64 },

    #[error("coordinate ({x}, {y}) does not match any layout probe")]
    UnknownCoordinate { x: usize, y: usize },

    #[error("duplicate intensity row for ({x}, {y})")]
    DuplicateCell { x: usize, y: usize },

    #[error("chip set has {n} chip(s); at least 2 are required")]
    NotEnoughChips { n: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    BadInput(String),

    #[error("reference chip does not cover probeset {0}")]
    RefMismatch(String),

    #[error("batch {0} does not share the common chip layout")]
    LayoutMismatch(String),

    #[error("chip {0}: trimmed mean is zero, scale factor undefined")]
    DegenerateChip(String),

    #[error("unknown chip {0}")]
    UnknownChip(String),

    #[error("gray palette cannot render signed residuals; use the pos/neg channels")]
    Palette,

    #[error("bad artifact: {0}")]
    BadArtifact(String),

    #[error("{file}: {source}")]
    InFile {
        file: String,
        #[source]
        source: Box<Error>,
    },

    #[error("probeset {id}: {source}")]
    InProbeset {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wrap an error with the file it came from.
    pub fn in_file(self, file: impl Into<String>) -> Error {
        Error::InFile {
            file: file.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn in_probeset(self, id: impl Into<String>) -> Error {
        Error::InProbeset {
            id: id.into(),
            source: Box::new(self),
        }
    }
}
