#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calculus;
pub mod error;
pub mod diagnostics;
pub mod driver;
pub mod grid;
pub mod io;
pub mod linearized;
pub mod nonlinear;
pub mod pressure;
pub mod scalar;
pub mod timestepper;
pub mod viscosity;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Field3D = grid::Field3<f64>;
pub type Field2D = grid::Field2<f64>;
pub type SpectralField3D = grid::Spectral3<f64>;
pub type Field3F32 = grid::Field3<f32>;
pub type Field2F32 = grid::Field2<f32>;
pub type Grid64 = grid::Grid<f64>;
pub type Grid32 = grid::Grid<f32>;
