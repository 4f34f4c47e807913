//! Simulation and analysis toolkit for monolithic two-layer segmented RF
//! microtraps: geometry, electrostatics, secular analysis, ion dynamics,
//! transport, heating and RF-circuit models.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod circuit;
pub mod constants;
pub mod dynamics;
pub mod fields;
pub mod geometry;
pub mod grid;
pub mod heating;
pub mod shuttle;
pub mod trap;

pub use analysis::AnalysisError;
pub use circuit::CircuitError;
pub use dynamics::DynamicsError;
pub use fields::FieldError;
pub use geometry::GeometryError;
pub use heating::HeatingError;
pub use shuttle::ShuttleError;

/// Any failure of the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Heating(#[from] HeatingError),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Shuttle(#[from] ShuttleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
