//! Simulation and statistical verification of β-Dyson Brownian motion with a
//! general confining potential.
//!
//! The crate is organised bottom-up:
//!
//! - [`potential`]: the potential `V`, its smooth cutoff, the quasi-analytic
//!   extension of `V'` and the nonlocal kernel `g(z, x)`.
//! - [`dbm_sde`]: Euler–Maruyama integration of the interacting particle
//!   system with reproducible, counter-based noise.
//! - [`characteristics`]: the hydrodynamic limit solved along complex
//!   characteristics, with flow inversion to evaluate `m_t` anywhere.
//! - [`measure`]: empirical Stieltjes transforms, smoothed densities and
//!   classical locations.
//! - [`stats`]: local law, rigidity and mesoscopic CLT reports.
//! - [`experiment`]: configuration parsing and the end-to-end pipelines
//!   driven by the `dbm-lab` binary.

mod jet;

pub mod characteristics;
pub mod dbm_sde;
pub mod experiment;
pub mod measure;
pub mod potential;
pub mod quadrature;
pub mod rng;
pub mod stats;

pub use num_complex::Complex64;

pub use characteristics::{Characteristic, HydroConfig, HydroError, HydroSolution, InitialTransform};
pub use dbm_sde::{ParticleConfiguration, SdeError, SdeParams};
pub use measure::{MeasureError, QuantileTable};
pub use potential::{PotentialError, PotentialSpec};
pub use stats::{SpectralDomainParams, StatsError};
