//! Mass-preserving diffeomorphic density registration.
//!
//! Volumes are treated as densities (mass per unit volume, moved by the
//! change-of-variables rule rather than plain composition), and registration
//! runs a Sobolev gradient flow on a Fisher–Rao matching energy with a
//! spatially weighted penalty on volume change, so designated regions can be
//! kept nearly incompressible while others absorb the deformation.

pub mod cli;
pub mod density;
pub mod error;
pub mod grid;
pub mod io;
pub mod matching;
pub mod phantom;
pub mod poisson;
pub mod validate;

pub use density::{fisher_rao_sphere, hellinger_sq, pullback, pushforward, Density};
pub use error::{Error, Result};
pub use grid::{GridGeometry, ScalarGrid, VectorGrid};
pub use matching::{
    energy, otsu_threshold, register, sigmoid_penalty, sigmoid_penalty_auto, step, update_field,
    update_field_with_sqrt_target, EnergyBreakdown, InverseTransform, Penalty, RegistrationConfig,
    RegistrationResult, TraceRow,
};
pub use phantom::{gaussian_blob, make_pair, radial_map, RadialBump, TwoCompartment};
pub use poisson::SpectralSolver;
pub use validate::{
    audit_invariance, audit_jacdet_drift, check_gradient, run_selfcheck, smooth_directions,
    GradientCheckReport, SelfCheckReport,
};
