//! Crate-wide error type.
//!
//! One enum covers the whole pipeline: geometry/field validation, transform
//! validity, registration control flow, and volume file I/O. The CLI maps
//! variants onto process exit codes (see `cli`).

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two fields that must share a grid do not.
    #[error("grid geometry mismatch: {left} vs {right}")]
    GeometryMismatch { left: String, right: String },

    /// Dimensions below 2 nodes per axis, non-positive spacing, or non-finite
    /// geometry parameters.
    #[error("invalid grid geometry: {0}")]
    InvalidGeometry(String),

    /// Field data violating a container invariant (wrong length, non-finite
    /// values, negative density, ...).
    #[error("invalid field data: {0}")]
    InvalidField(String),

    /// An operation parameter outside its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A Jacobian determinant that must be positive is not.
    #[error("non-positive Jacobian determinant: min {min:e} at linear index {index}")]
    NonPositiveJacobian { min: f64, index: usize },

    /// A density with zero total mass where a normalization is required.
    #[error("density has zero total mass")]
    ZeroMass,

    /// The incremental map of a single descent step folds over itself.
    #[error("step too large: incremental map folds (min determinant {min_det:e})")]
    StepTooLarge { min_det: f64 },

    /// Backtracking reached the minimum step size without any energy decrease
    /// on the very first iteration.
    #[error("registration diverged: no energy decrease at minimum step size")]
    Diverged,

    /// Radial warp parameters whose Jacobian drops below the invertibility
    /// floor somewhere on the requested grid.
    #[error("radial map parameters not invertible: min Jacobian {min_jac:e} < {required}")]
    NonInvertibleParameters { min_jac: f64, required: f64 },

    /// Reference distance is zero, so a relative invariance ratio is undefined.
    #[error("densities coincide: reference distance is zero")]
    ZeroDistance,

    /// Malformed volume header or payload.
    #[error("{}: parse error: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },

    /// Raw payload length disagrees with the header.
    #[error("{}: raw data size mismatch: expected {expected} bytes, found {found}", path.display())]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    /// Element type we do not read.
    #[error("{}: unsupported element type {element_type}", path.display())]
    UnsupportedElementType { path: PathBuf, element_type: String },

    /// Underlying I/O failure, with the path that caused it.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
