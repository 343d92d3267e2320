use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate point at the sensor origin")]
    DegeneratePoint,

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid voxel spec: {0}")]
    InvalidVoxelSpec(String),

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("pixel ({row}, {col}) is empty")]
    EmptyPixel { row: usize, col: usize },

    #[error("pixel ({row}, {col}) is outside the {rows}x{cols} image")]
    PixelOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("feature dimension {dim} is below the minimum of {min}")]
    FeatureDimTooSmall { dim: usize, min: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("point ({x}, {y}, {z}) is outside the voxel grid")]
    OutOfBounds { x: f64, y: f64, z: f64 },

    #[error("cannot pool an empty voxel")]
    EmptyVoxel,

    #[error("invalid sweep set: {0}")]
    InvalidSweeps(String),

    #[error("yaw delta {delta} exceeds the allowed maximum {max}")]
    RotationOutOfRange { delta: f64, max: f64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{path}: size {len} bytes is not a multiple of {record} bytes")]
    RecordSize {
        path: PathBuf,
        len: u64,
        record: usize,
    },

    #[error("{path}: {count} of {total} records contain non-finite values")]
    NonFinite {
        path: PathBuf,
        count: usize,
        total: usize,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
