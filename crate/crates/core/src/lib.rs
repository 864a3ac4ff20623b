//! Time-discrete incremental variational scheme for finite-strain
//! nonassociative elastoplasticity with gradient regularization.

pub mod checks;
pub mod diagnostics;
pub mod dissipation;
pub mod error;
pub mod flowrule;
pub mod grid;
pub mod io;
pub mod material;
pub mod mollify;
pub mod real;
pub mod scenario;
pub mod solver;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use scenario::{run_evolution, Scenario, ScenarioConfig};

/// Double-precision aliases.
pub type Mat3d = tensor::Mat3<f64>;
pub type TracelessMat3d = tensor::TracelessMat3<f64>;
pub type Mat33d = tensor::Mat33<f64>;
pub type MaterialParamsD = material::MaterialParams<f64>;
pub type FlowConstantsD = flowrule::FlowConstants<f64>;
pub type GridD = grid::Grid<f64>;
pub type StateFieldD = material::StateField<f64>;

/// Single-precision aliases.
pub type Mat3f = tensor::Mat3<f32>;
pub type TracelessMat3f = tensor::TracelessMat3<f32>;
pub type MaterialParamsF = material::MaterialParams<f32>;
