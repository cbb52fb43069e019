//! Error taxonomy shared by the solver and inversion layers.
//!
//! Variants are split along the boundaries the command-line front end needs:
//! bad inputs, numerical failures mid-run, and structured non-identifiability
//! verdicts (data that cannot determine the requested quantity even in exact
//! arithmetic). The last group is deliberate output of the inversion theory,
//! not a bug, and callers are expected to surface it distinctly.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Grid construction or an operation received a node count that is not a
    /// power of two (transforms are specified for power-of-two grids only).
    #[error("grid axis {axis} has {points} points; power of two required")]
    PowerOfTwoRequired { axis: usize, points: usize },

    /// Two fields that must live on the same grid do not.
    #[error("grid mismatch: {context}")]
    GridMismatch { context: String },

    /// A parameter failed validation before any stepping started.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Advection step would move mass further than half a cell per step.
    #[error(
        "CFL violation at step {step}: drift speed {speed:.3e} * dt {dt:.3e} \
         exceeds {limit} * cell size {cell:.3e}"
    )]
    CflViolation {
        step: usize,
        speed: f64,
        dt: f64,
        cell: f64,
        limit: f64,
    },

    /// A non-finite value appeared in the state; the run is aborted.
    #[error("non-finite value detected at step {step} ({context})")]
    NanDetected { step: usize, context: String },

    /// The measurement mask selects no nodes.
    #[error("measurement region is empty")]
    EmptyMeasurementRegion,

    /// Observation requested at a time the trajectory did not record.
    #[error("time {0} was not recorded by the trajectory")]
    TimeNotRecorded(f64),

    /// A least-squares fit had fewer independent samples than unknowns, or a
    /// numerically rank-deficient design.
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// Reconstructed diffusion left the physically meaningful range.
    #[error("non-physical diffusion values at {count} of {total} nodes (outside {lo}..{hi})")]
    NonPhysicalDiffusion {
        count: usize,
        total: usize,
        lo: f64,
        hi: f64,
    },

    /// The data cannot determine the requested quantity: a structural zero in
    /// the probe response chain (vanishing kernel normalization, vanishing
    /// coupling entry, or a probe frequency the kernel does not see).
    #[error("non-identifiable: {0}")]
    NonIdentifiable(String),

    /// The requested operation is only defined in two space dimensions.
    #[error("{context}: requires a two-dimensional grid, got {ndim} dimension(s)")]
    TwoDimensionalOnly { context: String, ndim: usize },

    /// Binary grid-file decode failure.
    #[error("grid file decode error: {0}")]
    GridFileDecode(String),

    /// Underlying I/O failure while reading or writing grid files.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    /// True for the structured "the data cannot tell you this" verdicts that
    /// front ends must distinguish from ordinary numerical failures.
    pub fn is_non_identifiable(&self) -> bool {
        matches!(self, CoreError::NonIdentifiable(_))
    }
}
