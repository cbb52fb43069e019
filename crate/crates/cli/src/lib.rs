//! Command-line front end for the aggregation-diffusion toolkit.
//!
//! The binary reads one JSON experiment configuration, runs the requested
//! stage (forward simulation, variation extraction, or one of the inverse
//! problems), and persists every artifact under a run directory named by the
//! configuration hash, together with a manifest listing each file's content
//! hash. Reruns of the same configuration reproduce every artifact byte for
//! byte, regardless of thread count.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;
