//! Stochastic (Wigner) simulation of multimode type-2 parametric
//! down-conversion and of two-photon interference at a tilted beamsplitter,
//! observed through time-integrated far-field camera images.

pub mod analysis;
pub mod config;
pub mod crystal;
pub mod error;
pub mod grid;
pub mod interferometer;
pub mod io;
pub mod oracle;
pub mod runner;
pub mod stochastic;
pub mod validate;

pub use error::{Result, SimError};
pub use grid::{Beam, ComplexField3D, Domain, GridSpec, Image2D, ImageAxes, Polarization};
