//! Spectral stability and linear decay of periodic traveling waves of viscous
//! conservation laws.

pub mod bloch;
pub mod coefficients;
pub mod error;
pub mod evans;
pub mod homogenized;
pub mod linalg;
pub mod model;
pub mod ode;
pub mod profile;
pub mod semigroup;
pub mod spectral;
pub mod verify;

pub use bloch::{DispersionSurfaces, StabilityOptions, StabilityReport, TrackOptions};
pub use coefficients::WaveCoefficients;
pub use error::{Error, Result};
pub use evans::{Contour, EvansOptions, EvansValue, JointRay};
pub use homogenized::{HomogenizedSystem, Speeds, WeakHyperbolicity};
pub use model::{BurgersPairParams, H1Report, ModelSpec};
pub use ode::Tolerances;
pub use profile::{ManifoldChart, ProfileGuess, ProfileOptions, WavePoint};
pub use semigroup::{BlochField, Cutoff, Field, Propagator, PropagatorOptions, Split, TorusGrid, TransverseAxis};
