//! Numerical laboratory for the almost hermitian curvature flow on flat tori.
//!
//! Tensor fields live on a periodic lattice with Fourier-collocation
//! derivatives. On top of that sit the compatible structures `(g, J, ω)`,
//! the Levi-Civita and canonical connections, the flow integrator, the
//! linearized operator at the flat structure and the experiment harness.

// Index loops mirror the tensor formulas they implement.
#![allow(clippy::needless_range_loop)]

pub mod connection;
pub mod error;
pub mod flow;
pub mod harness;
pub mod lattice;
pub mod linear;
pub mod perturb;
pub mod structure;
mod tensor;

pub use connection::{ConnectionField, ConnectionKind, CurvatureBundle};
pub use error::{Error, Result};
pub use flow::{FlowParams, FlowState, Trajectory};
pub use lattice::{Lattice, LatticeField, LatticeSpec, NormReport, Slot};
pub use linear::{LinearOperator, SpectrumOptions, SpectrumReport};
pub use perturb::{Perturbation, TangentPerturbation};
pub use structure::{AHStructure, EndoTypeBlocks, FormTypeBlocks, StructureDiagnostics};
