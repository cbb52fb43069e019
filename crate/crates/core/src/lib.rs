//! Simulation and inverse-reconstruction toolkit for systems of nonlocal
//! aggregation-diffusion equations on the periodic torus.
//!
//! The crate has three layers:
//!
//! * **Fields on the torus** — [`grid::TorusGrid`], [`field::Field`],
//!   [`field::Spectrum`] and the spectral calculus on them (transforms,
//!   periodic convolution, derivatives, mass). Grid sizes are restricted to
//!   powers of two so transforms stay exact and cheap.
//! * **Forward solvers** — nonlinear aggregation-diffusion dynamics for the
//!   two supported couplings ([`solver::simulate_m1`] with vector interaction
//!   kernels, [`solver::simulate_m2`] with scalar interaction potentials),
//!   the pure-diffusion propagators in [`heat`], and the first/second
//!   variation systems in [`variation`].
//! * **Inverse reconstructions** — spatially varying diffusion recovery from
//!   small-source response data ([`diffusion`]), and coupling/kernel recovery
//!   from second-order probe responses ([`recovery`]).
//!
//! Independent work units (probes, epsilon sweeps, transform ladders) run on
//! a rayon pool when the `parallel` feature is enabled (the default) and on
//! plain sequential loops otherwise; results are merged in input order, so
//! both paths produce bitwise-identical output.

pub mod diffusion;
pub mod error;
pub mod field;
pub mod grd1;
pub mod grid;
pub mod heat;
pub mod kernel;
pub mod laplace;
pub mod measure;
pub mod params;
pub mod parallel;
pub mod probe;
pub mod recovery;
pub mod report;
pub mod solver;
pub mod special;
pub mod variation;

pub use error::{CoreError, Result};
pub use field::{Field, Spectrum};
pub use grid::TorusGrid;
