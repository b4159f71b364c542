//! Special functions, Pólya–Gamma moments, trapezoid quadrature and seeded
//! sampling shared by the rest of the crate.

pub mod grid;
pub mod random;
pub mod special;

pub use grid::{EvalPoints, GridError, ObservationRule, QuadratureGrid};
pub use random::{RngStream, SampleError};
pub use special::{
    digamma, log_gamma, log_sigmoid, pg_f, pg_mean, sigmoid, DomainError, PG_TAYLOR_SWITCH,
};
