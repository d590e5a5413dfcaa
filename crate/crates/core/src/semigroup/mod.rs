//! Linearised solution operators, their low/high-frequency splitting, decay
//! measurements, the convection–diffusion approximation and nonlinear
//! evolution of perturbations.

pub mod decay;
pub mod kernels;
pub mod nonlinear;
pub mod propagator;
pub mod transform;

pub use transform::{bloch_forward, bloch_inverse, BlochField, Field, TorusGrid, TransverseAxis};
pub use propagator::{Cutoff, Propagator, PropagatorOptions, Split};
