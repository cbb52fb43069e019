//! Recovery of coupling matrices and interaction kernels from
//! second-variation measurements.
//!
//! The measurement model: seed the linear variation systems with a probe
//! (see [`crate::probe`]). The first variation of each active species decays
//! as a pure exponential `e^{lambda t} A(x)`; the second variation then
//! solves a driven heat equation whose source is a fixed spatial field times
//! a known exponential time profile,
//!
//! ```text
//! d_t v_i = d_i lap v_i - S_i(x) e^{rho t},     v_i(0) = 0,
//! ```
//!
//! so each Fourier mode of the terminal state determines the matching mode
//! of `S_i` in closed form (deconvolution). Projecting the deconvolved
//! source onto reference sources built from known kernels recovers coupling
//! entries; reading single coefficients across a frequency sweep recovers a
//! scalar kernel's transform. Off-diagonal entries are cleaned by
//! subtracting the already-recovered diagonal response before deconvolving
//! (sequential elimination); a joint least-squares solver over all probes is
//! provided as a cross-check.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{CoreError, Result};
use crate::field::{convolve, divergence, gradient, mass, Field, Spectrum};
use crate::grid::TorusGrid;
use crate::kernel::KernelSpec;
use crate::measure::{SnapshotPolicy, Trajectory};
use crate::params::{Coupling, ModelParams};
use crate::probe::{alias_canonical, canonical_modes, probe_horizon, ProbeSpec};
use crate::variation::{
    extract_variations, solve_first_variation, solve_second_variation_m1,
    solve_second_variation_m2, VariationInput,
};

/// Absolute tolerance on the mean of a divergence-form source.
const MEAN_ZERO_TOL: f64 = 1e-10;
/// `|1 - e^{-aT}|` below this marks a constant-profile mode unrecoverable.
const CONSTANT_RECOVERY_TOL: f64 = 1e-12;
/// Duhamel factors below this (relative to the horizon) mark an
/// exponential-profile mode unrecoverable.
const EXP_RECOVERY_TOL: f64 = 1e-12;
/// Spectrum coefficients above this fraction of the maximum count as the
/// support of a reference source.
const SUPPORT_REL_TOL: f64 = 1e-13;
/// Projection denominators below this are structural zeros: the reference
/// source carries no energy, so the entry cannot be identified. Genuine
/// references have `O(1)` denominators; zero references leave only squared
/// rounding noise (`~1e-30`).
const PROJECTION_DEN_TOL: f64 = 1e-24;
/// The second variation of a probe starts at zero; initial states above this
/// fraction of the terminal scale indicate foreign data.
const INITIAL_STATE_REL_TOL: f64 = 1e-6;
/// Coupling entries smaller than this cannot serve as known divisors.
const KNOWN_COUPLING_TOL: f64 = 1e-12;
/// Divergence integrals below this fraction of the kernel's sup-norm are
/// flagged as structurally zero (fully periodic kernels).
const ZERO_INTEGRAL_REL_TOL: f64 = 1e-8;
/// Shift used when bridging signed probe patterns into the non-negative
/// seeds the epsilon-expansion harness requires.
const EXTRACT_SHIFT: f64 = 0.5;

/// Default probe horizon before rate-based shortening.
pub const DEFAULT_PROBE_HORIZON: f64 = 0.5;

// ---------------------------------------------------------------------------
// Time profiles and deconvolution
// ---------------------------------------------------------------------------

/// Known time modulation of a separated source `S(x) p(t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeProfile {
    /// `p(t) = 1`.
    Constant,
    /// `p(t) = e^{rate t}`.
    Exponential { rate: f64 },
}

impl TimeProfile {
    pub fn rate(&self) -> f64 {
        match self {
            TimeProfile::Constant => 0.0,
            TimeProfile::Exponential { rate } => *rate,
        }
    }

    /// Exponential profile, collapsing a zero rate to the constant profile.
    pub fn for_rate(rate: f64) -> Self {
        if rate == 0.0 {
            TimeProfile::Constant
        } else {
            TimeProfile::Exponential { rate }
        }
    }
}

impl fmt::Display for TimeProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeProfile::Constant => write!(f, "constant"),
            TimeProfile::Exponential { rate } => write!(f, "exponential({rate})"),
        }
    }
}

/// A separated source: spatial field times time profile.
#[derive(Clone, Debug)]
pub struct SourceField {
    pub field: Field,
    pub profile: TimeProfile,
}

impl SourceField {
    /// Divergence-form sources are real and mean-free.
    pub fn validate(&self) -> Result<()> {
        if !self.field.all_finite() {
            return Err(CoreError::InvalidParameter(
                "source field contains non-finite values".into(),
            ));
        }
        if !self.field.is_real() {
            return Err(CoreError::InvalidParameter(
                "source field must be real".into(),
            ));
        }
        let mean = mass(&self.field).norm() / self.field.grid().volume();
        if mean > MEAN_ZERO_TOL * (1.0 + self.field.max_abs()) {
            return Err(CoreError::InvalidParameter(format!(
                "source field must have zero mean, got {mean:.3e}"
            )));
        }
        Ok(())
    }
}

/// `int_0^T e^{-decay (T - s)} e^{rate s} ds`, evaluated stably for every
/// sign of `decay + rate` including the removable point `decay + rate = 0`
/// (where the value is `T e^{rate T}`).
pub fn duhamel_factor(decay: f64, rate: f64, horizon: f64) -> f64 {
    let z = (decay + rate) * horizon;
    let phi = if z == 0.0 { 1.0 } else { -f64::exp_m1(-z) / z };
    (rate * horizon).exp() * horizon * phi
}

/// Duhamel factor of a mode, or `None` when the response there is too flat
/// to divide by.
fn recoverable_factor(decay: f64, profile: &TimeProfile, horizon: f64) -> Option<f64> {
    let factor = duhamel_factor(decay, profile.rate(), horizon);
    let recoverable = match profile {
        TimeProfile::Constant => (-f64::exp_m1(-decay * horizon)).abs() >= CONSTANT_RECOVERY_TOL,
        TimeProfile::Exponential { .. } => factor.abs() >= EXP_RECOVERY_TOL * horizon.max(1.0),
    };
    recoverable.then_some(factor)
}

/// Signed mode vector of a flat spectrum slot.
fn slot_modes(grid: &TorusGrid, idx: usize) -> Vec<i64> {
    let dims = grid.dims();
    let mut out = vec![0; dims.len()];
    let mut rem = idx;
    for axis in (0..dims.len()).rev() {
        out[axis] = grid.mode(axis, rem % dims[axis]);
        rem /= dims[axis];
    }
    out
}

/// Deconvolved source with the modes that had to be dropped.
#[derive(Clone, Debug)]
pub struct DeconvolvedSource {
    /// The recovered spatial factor, zero on unrecoverable modes.
    pub source: Field,
    /// Modes whose Duhamel factor was too small to divide by.
    pub unrecoverable: Vec<Vec<i64>>,
}

/// Per-mode division of a terminal spectrum by the Duhamel factor. The
/// origin mode must be (numerically) empty — divergence-form sources carry
/// no mean, so a mean-carrying response cannot come from one.
fn deconvolve_spectrum(
    mut spectrum: Spectrum,
    d: f64,
    profile: &TimeProfile,
    horizon: f64,
) -> Result<DeconvolvedSource> {
    let grid = spectrum.grid().clone();
    let scale = spectrum.max_abs();
    let zero_mode = spectrum.coeffs()[0].norm();
    if zero_mode > MEAN_ZERO_TOL * (1.0 + scale) {
        return Err(CoreError::InvalidParameter(format!(
            "non-divergence source: the response carries mean amplitude {zero_mode:.3e}"
        )));
    }
    let mut unrecoverable = Vec::new();
    let coeffs = spectrum.coeffs_mut();
    coeffs[0] = Complex64::new(0.0, 0.0);
    for idx in 1..coeffs.len() {
        let decay = d * grid.freq_sq(idx);
        match recoverable_factor(decay, profile, horizon) {
            Some(factor) => coeffs[idx] = -coeffs[idx] / factor,
            None => {
                unrecoverable.push(slot_modes(&grid, idx));
                coeffs[idx] = Complex64::new(0.0, 0.0);
            }
        }
    }
    let mut source = spectrum.to_field();
    source.refresh_realness();
    Ok(DeconvolvedSource {
        source,
        unrecoverable,
    })
}

/// Time span of a measured trajectory, which must start at zero.
fn horizon_of(trajectory: &Trajectory) -> Result<f64> {
    let times = trajectory.times();
    if times.len() < 2 {
        return Err(CoreError::InvalidParameter(
            "deconvolution needs at least the initial and terminal states".into(),
        ));
    }
    let t0 = times[0];
    let horizon = *times.last().unwrap();
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(CoreError::InvalidParameter(format!(
            "trajectory horizon must be positive and finite, got {horizon}"
        )));
    }
    if t0.abs() > 1e-9 * horizon.max(1.0) {
        return Err(CoreError::InvalidParameter(format!(
            "trajectory must start at time zero, got {t0}"
        )));
    }
    Ok(horizon)
}

/// The second variation of a probe starts at zero; anything else is not
/// probe data.
fn assert_zero_initial(trajectory: &Trajectory, species: usize) -> Result<()> {
    let initial = trajectory.state(0)[species].max_abs();
    let terminal = trajectory.terminal()[species].max_abs();
    if initial > INITIAL_STATE_REL_TOL * (1.0 + terminal) {
        return Err(CoreError::InvalidParameter(format!(
            "deconvolution expects a zero initial state, species {species} starts at \
             amplitude {initial:.3e}"
        )));
    }
    Ok(())
}

/// Recover the spatial source factor of one species from a trajectory of
/// the driven heat equation `d_t v = d lap v - S(x) p(t)`, `v(0) = 0`.
///
/// Every Fourier mode is divided by its Duhamel factor; modes where that
/// factor is numerically zero are zeroed and reported. A response carrying
/// mean is rejected — divergence-form sources cannot produce one.
pub fn deconvolve_source(
    trajectory: &Trajectory,
    species: usize,
    d: f64,
    profile: &TimeProfile,
) -> Result<DeconvolvedSource> {
    if species >= trajectory.n_species() {
        return Err(CoreError::InvalidParameter(format!(
            "species {species} out of range for {} species",
            trajectory.n_species()
        )));
    }
    if !(d > 0.0) || !d.is_finite() {
        return Err(CoreError::InvalidParameter(format!(
            "diffusion must be positive and finite, got {d}"
        )));
    }
    let horizon = horizon_of(trajectory)?;
    assert_zero_initial(trajectory, species)?;
    let spectrum = trajectory.terminal()[species].to_spectrum();
    deconvolve_spectrum(spectrum, d, profile, horizon)
}

// ---------------------------------------------------------------------------
// Probe runs and measurement bundles
// ---------------------------------------------------------------------------

/// One measured probe response: the probe and the second-variation
/// trajectory it produced (at least the initial and terminal states).
#[derive(Clone, Debug)]
pub struct ProbeRun {
    pub probe: ProbeSpec,
    pub trajectory: Trajectory,
}

/// A collection of probe runs taken under the same (known, constant)
/// diffusion coefficients.
#[derive(Clone, Debug)]
pub struct MeasurementBundle {
    pub diffusion: Vec<f64>,
    pub runs: Vec<ProbeRun>,
}

impl MeasurementBundle {
    pub fn new(diffusion: Vec<f64>, runs: Vec<ProbeRun>) -> Self {
        MeasurementBundle { diffusion, runs }
    }

    fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(CoreError::InvalidParameter(
                "measurement bundle holds no probe runs".into(),
            ));
        }
        for (axis, &d) in self.diffusion.iter().enumerate() {
            if !(d > 0.0) || !d.is_finite() {
                return Err(CoreError::InvalidParameter(format!(
                    "diffusion of species {axis} must be positive and finite, got {d}"
                )));
            }
        }
        let grid = self.runs[0].trajectory.grid();
        for run in &self.runs {
            if run.trajectory.n_species() != self.diffusion.len() {
                return Err(CoreError::InvalidParameter(format!(
                    "run [{}] has {} species, bundle lists {} diffusion values",
                    run.probe.label(),
                    run.trajectory.n_species(),
                    self.diffusion.len()
                )));
            }
            crate::grid::ensure_same_grid(run.trajectory.grid(), grid, "measurement bundle")?;
            for &s in &run.probe.species() {
                if s >= self.diffusion.len() {
                    return Err(CoreError::InvalidParameter(format!(
                        "run [{}] probes species {s}, out of range",
                        run.probe.label()
                    )));
                }
            }
        }
        Ok(())
    }

    fn grid(&self) -> &Arc<TorusGrid> {
        self.runs[0].trajectory.grid()
    }
}

/// Which coupling structure the sources live in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CouplingKind {
    /// Drift velocities are direct convolutions with vector kernels.
    VectorKernels,
    /// Drift velocities are gradients of scalar-potential convolutions.
    ScalarPotentials,
}

fn constant_diffusion(params: &ModelParams) -> Result<Vec<f64>> {
    params
        .diffusion
        .iter()
        .enumerate()
        .map(|(s, d)| {
            d.as_constant().ok_or_else(|| {
                CoreError::InvalidParameter(format!(
                    "probe recovery requires constant diffusion, species {s} is variable"
                ))
            })
        })
        .collect()
}

/// Horizon for a probe under the given diffusion constants: the base
/// horizon, shortened so the fastest source rate stays resolvable.
fn horizon_for(probe: &ProbeSpec, diffusion: &[f64], grid: &TorusGrid, base: f64) -> f64 {
    let max_rate = probe
        .species()
        .iter()
        .map(|&s| 2.0 * probe.rate(s, diffusion[s], grid).abs())
        .fold(0.0, f64::max);
    probe_horizon(max_rate, base)
}

/// The second-variation source of coupling entry `(row, col)` under a probe,
/// with unit coupling coefficient and the solver's sign convention:
/// `+2 div(A_row * V(A_col))` where `V` is the convolution (vector kernels)
/// or convolution gradient (scalar potentials).
fn unit_pair_source(
    probe: &ProbeSpec,
    row: usize,
    col: usize,
    kernel: &KernelSpec,
    kind: CouplingKind,
    grid: &Arc<TorusGrid>,
) -> Result<Field> {
    let missing = |s: usize| {
        CoreError::InvalidParameter(format!(
            "probe [{}] does not activate species {s}",
            probe.label()
        ))
    };
    let a_row = probe
        .pattern_for(row)
        .ok_or_else(|| missing(row))?
        .realize(grid);
    let a_col = probe
        .pattern_for(col)
        .ok_or_else(|| missing(col))?
        .realize(grid);
    let velocity: Vec<Field> = match kind {
        CouplingKind::VectorKernels => kernel
            .sample_vector(grid)?
            .iter()
            .map(|component| convolve(component, &a_col))
            .collect::<Result<_>>()?,
        CouplingKind::ScalarPotentials => {
            gradient(&convolve(&kernel.sample_scalar(grid)?, &a_col)?)
        }
    };
    let flux: Vec<Field> = velocity
        .iter()
        .map(|v| a_row.mul_pointwise(v))
        .collect::<Result<_>>()?;
    Ok(divergence(&flux)?.scaled(Complex64::new(2.0, 0.0)))
}

/// Reference source of entry `(row, col)`: the deconvolution of a probe run
/// equals `coefficient * reference` when the model's kernel matches, so
/// projecting measured sources onto references reads off the coefficient.
/// (The deconvolution convention absorbs the sign of the drift term, hence
/// the negation of the raw pair source.)
pub fn reference_source(
    probe: &ProbeSpec,
    row: usize,
    col: usize,
    kernel: &KernelSpec,
    kind: CouplingKind,
    grid: &Arc<TorusGrid>,
    diffusion: &[f64],
) -> Result<SourceField> {
    let field = unit_pair_source(probe, row, col, kernel, kind, grid)?
        .scaled(Complex64::new(-1.0, 0.0));
    let rate =
        probe.rate(row, diffusion[row], grid) + probe.rate(col, diffusion[col], grid);
    Ok(SourceField {
        field,
        profile: TimeProfile::for_rate(rate),
    })
}

/// Run a probe through the direct variation solvers: exact first variation
/// (pure heat), then the driven second variation, recorded at the initial
/// and terminal times.
pub fn run_probe_direct(
    params: &ModelParams,
    grid: &Arc<TorusGrid>,
    probe: &ProbeSpec,
    base_horizon: f64,
    n_steps: usize,
) -> Result<ProbeRun> {
    params.validate(grid)?;
    probe.validate(params, grid)?;
    if n_steps == 0 {
        return Err(CoreError::InvalidParameter(
            "probe runs need at least one time step".into(),
        ));
    }
    let diffusion = constant_diffusion(params)?;
    let horizon = horizon_for(probe, &diffusion, grid, base_horizon);
    let dt = horizon / n_steps as f64;
    let f1 = probe.realize(grid, params.n_species);
    let u_i = solve_first_variation(
        &params.diffusion,
        &f1,
        horizon,
        dt,
        &SnapshotPolicy::EveryStep,
    )?;
    let f2: Vec<Field> = (0..params.n_species).map(|_| Field::zeros(grid)).collect();
    let endpoints = SnapshotPolicy::AtTimes(vec![]);
    let u_ii = match params.coupling {
        Coupling::GradientPotentials { .. } => {
            solve_second_variation_m2(params, &u_i, &f2, horizon, dt, &endpoints)?
        }
        _ => solve_second_variation_m1(params, &u_i, &f2, horizon, dt, &endpoints)?,
    };
    Ok(ProbeRun {
        probe: probe.clone(),
        trajectory: u_ii,
    })
}

/// Emulate a probe run exactly: the second variation of these models is a
/// linear per-mode ODE with exponential forcing, so the terminal state is a
/// sum of unit pair sources scaled by Duhamel factors. Useful as an
/// independent data generator — no time stepping, no splitting error.
pub fn emulate_probe_run(
    params: &ModelParams,
    grid: &Arc<TorusGrid>,
    probe: &ProbeSpec,
    base_horizon: f64,
) -> Result<ProbeRun> {
    params.validate(grid)?;
    probe.validate(params, grid)?;
    let diffusion = constant_diffusion(params)?;
    let horizon = horizon_for(probe, &diffusion, grid, base_horizon);
    let coupling: Option<(CouplingKind, &Vec<Vec<f64>>, &Vec<Vec<KernelSpec>>)> =
        match &params.coupling {
            Coupling::Heat => None,
            Coupling::DriftKernels { mu, kernels } => {
                Some((CouplingKind::VectorKernels, mu, kernels))
            }
            Coupling::GradientPotentials { nu, kernels } => {
                Some((CouplingKind::ScalarPotentials, nu, kernels))
            }
        };
    let mut terminal: Vec<Spectrum> = (0..params.n_species).map(|_| Spectrum::zeros(grid)).collect();
    if let Some((kind, coefficients, kernels)) = coupling {
        let active = probe.species();
        for &i in &active {
            for &j in &active {
                let coefficient = coefficients[i][j];
                if coefficient == 0.0 {
                    continue;
                }
                let source = unit_pair_source(probe, i, j, &kernels[i][j], kind, grid)?
                    .scaled(Complex64::new(coefficient, 0.0));
                let rate = probe.rate(i, diffusion[i], grid)
                    + probe.rate(j, diffusion[j], grid);
                let spectrum = source.to_spectrum();
                let coeffs = terminal[i].coeffs_mut();
                for (idx, c) in spectrum.coeffs().iter().enumerate() {
                    let factor = duhamel_factor(diffusion[i] * grid.freq_sq(idx), rate, horizon);
                    coeffs[idx] += c * factor;
                }
            }
        }
    }
    let final_state: Vec<Field> = terminal
        .into_iter()
        .map(|s| {
            let mut f = s.to_field();
            f.refresh_realness();
            f
        })
        .collect();
    let initial: Vec<Field> = (0..params.n_species).map(|_| Field::zeros(grid)).collect();
    Ok(ProbeRun {
        probe: probe.clone(),
        trajectory: Trajectory::new(grid.clone(), vec![0.0, horizon], vec![initial, final_state]),
    })
}

/// Run a probe through the full nonlinear solver and epsilon extraction.
///
/// The expansion harness requires non-negative leading seeds, so signed
/// probe patterns `X` are bridged through the symmetric second difference
/// around the constant state: with `Q(f)` the extracted second variation of
/// seed `f` (a quadratic form), `[Q(1 + aX) + Q(1 - aX) - 2 Q(1)] / (2 a^2)`
/// equals `Q(X)`. The constant background is stationary at every order and
/// its cross terms cancel in the difference.
pub fn extract_probe_run(
    params: &ModelParams,
    grid: &Arc<TorusGrid>,
    probe: &ProbeSpec,
    epsilons: &[f64],
    base_horizon: f64,
    n_steps: usize,
) -> Result<ProbeRun> {
    params.validate(grid)?;
    probe.validate(params, grid)?;
    if n_steps == 0 {
        return Err(CoreError::InvalidParameter(
            "probe extraction needs at least one time step".into(),
        ));
    }
    let diffusion = constant_diffusion(params)?;
    let horizon = horizon_for(probe, &diffusion, grid, base_horizon);
    let dt = horizon / n_steps as f64;
    let n = params.n_species;
    let patterns = probe.realize(grid, n);
    let background: Vec<Field> = (0..n)
        .map(|s| {
            if probe.pattern_for(s).is_some() {
                Field::constant(grid, 1.0)
            } else {
                Field::zeros(grid)
            }
        })
        .collect();
    let zeros: Vec<Field> = (0..n).map(|_| Field::zeros(grid)).collect();
    let shift = Complex64::new(EXTRACT_SHIFT, 0.0);

    let mut seeds: Vec<Vec<Field>> = Vec::with_capacity(3);
    for sign in [1.0, -1.0, 0.0] {
        let f1: Vec<Field> = background
            .iter()
            .zip(&patterns)
            .map(|(b, x)| {
                let mut f = b.clone();
                f.axpy(shift * sign, x);
                f
            })
            .collect();
        seeds.push(f1);
    }

    let endpoints = SnapshotPolicy::AtTimes(vec![]);
    let mut extracted = Vec::with_capacity(3);
    for f1 in seeds {
        let input = VariationInput {
            f1,
            f2: zeros.clone(),
            epsilons: epsilons.to_vec(),
        };
        extracted.push(extract_variations(params, &input, horizon, dt, &endpoints)?);
    }

    let times = extracted[0].u_ii.times().to_vec();
    let rescale = Complex64::new(1.0 / (2.0 * EXTRACT_SHIFT * EXTRACT_SHIFT), 0.0);
    let mut states = Vec::with_capacity(times.len());
    for t_idx in 0..times.len() {
        let mut state = Vec::with_capacity(n);
        for s in 0..n {
            let mut combined = extracted[0].u_ii.state(t_idx)[s].clone();
            combined.axpy(Complex64::new(1.0, 0.0), &extracted[1].u_ii.state(t_idx)[s]);
            combined.axpy(Complex64::new(-2.0, 0.0), &extracted[2].u_ii.state(t_idx)[s]);
            state.push(combined.scaled(rescale));
        }
        states.push(state);
    }
    Ok(ProbeRun {
        probe: probe.clone(),
        trajectory: Trajectory::new(grid.clone(), times, states),
    })
}

// ---------------------------------------------------------------------------
// Matrix recovery
// ---------------------------------------------------------------------------

/// One recovered coupling entry.
#[derive(Clone, Debug)]
pub struct EntryRecovery {
    pub row: usize,
    pub col: usize,
    pub value: f64,
    /// Relative misfit of the measured sources against the fitted reference,
    /// over the reference support.
    pub residual: f64,
    /// Labels of the probes that contributed.
    pub probes: Vec<String>,
}

/// A recovered coupling matrix with per-entry diagnostics.
#[derive(Clone, Debug)]
pub struct MatrixRecovery {
    pub values: Vec<Vec<f64>>,
    pub entries: Vec<EntryRecovery>,
}

/// Recover the drift coupling matrix from probe runs, given the kernel bank.
pub fn recover_mu(
    bundle: &MeasurementBundle,
    kernels: &[Vec<KernelSpec>],
) -> Result<MatrixRecovery> {
    recover_matrix(bundle, kernels, CouplingKind::VectorKernels, None)
}

/// Recover the gradient-potential coupling matrix from probe runs, given the
/// potential bank.
pub fn recover_nu(
    bundle: &MeasurementBundle,
    kernels: &[Vec<KernelSpec>],
) -> Result<MatrixRecovery> {
    recover_matrix(bundle, kernels, CouplingKind::ScalarPotentials, None)
}

/// Support-restricted samples of one (reference, measured) source pair.
struct ProjectionSamples {
    reference: Vec<Complex64>,
    measured: Vec<Complex64>,
}

#[derive(Default)]
struct EntryAccumulator {
    num: f64,
    den: f64,
    samples: Vec<ProjectionSamples>,
    probes: Vec<String>,
}

impl EntryAccumulator {
    fn push(&mut self, measured: &Field, reference: &Field, label: String) {
        let ms = measured.to_spectrum();
        let rs = reference.to_spectrum();
        let tol = SUPPORT_REL_TOL * rs.max_abs();
        let mut sample = ProjectionSamples {
            reference: Vec::new(),
            measured: Vec::new(),
        };
        for (r, m) in rs.coeffs().iter().zip(ms.coeffs()) {
            if r.norm() > tol {
                self.num += (r.conj() * m).re;
                self.den += r.norm_sqr();
                sample.reference.push(*r);
                sample.measured.push(*m);
            }
        }
        self.samples.push(sample);
        self.probes.push(label);
    }

    fn finalize(self, row: usize, col: usize, kind: CouplingKind) -> Result<EntryRecovery> {
        if self.den <= PROJECTION_DEN_TOL {
            let reason = match kind {
                CouplingKind::VectorKernels => {
                    format!("zero normalization at entry ({row}, {col})")
                }
                CouplingKind::ScalarPotentials => {
                    format!("no response at available frequencies for entry ({row}, {col})")
                }
            };
            return Err(CoreError::NonIdentifiable(reason));
        }
        let value = self.num / self.den;
        let mut misfit = 0.0;
        let mut scale = 0.0;
        for sample in &self.samples {
            for (r, m) in sample.reference.iter().zip(&sample.measured) {
                misfit += (m - value * r).norm_sqr();
                scale += m.norm_sqr();
            }
        }
        let residual = if scale > 0.0 {
            (misfit / scale).sqrt()
        } else {
            0.0
        };
        Ok(EntryRecovery {
            row,
            col,
            value,
            residual,
            probes: self.probes,
        })
    }
}

fn check_kernel_bank(kernels: &[Vec<KernelSpec>], n: usize) -> Result<()> {
    if kernels.len() != n || kernels.iter().any(|row| row.len() != n) {
        return Err(CoreError::InvalidParameter(format!(
            "kernel bank must be {n} x {n}"
        )));
    }
    Ok(())
}

/// Sequential recovery: diagonals from single-species probes by projection,
/// off-diagonals from pair probes after subtracting the predicted diagonal
/// response. `known_diagonal` supplies the diagonal coefficients used in the
/// subtraction (otherwise the just-recovered ones are used).
fn recover_matrix(
    bundle: &MeasurementBundle,
    kernels: &[Vec<KernelSpec>],
    kind: CouplingKind,
    known_diagonal: Option<&[Vec<f64>]>,
) -> Result<MatrixRecovery> {
    bundle.validate()?;
    let n = bundle.diffusion.len();
    check_kernel_bank(kernels, n)?;
    let grid = bundle.grid().clone();
    let d = &bundle.diffusion;

    let mut accumulators: BTreeMap<(usize, usize), EntryAccumulator> = BTreeMap::new();

    // Diagonals first: single-species runs project directly.
    for run in &bundle.runs {
        let species = run.probe.species();
        if species.len() != 1 {
            continue;
        }
        let i = species[0];
        let rate = 2.0 * run.probe.rate(i, d[i], &grid);
        let measured =
            deconvolve_source(&run.trajectory, i, d[i], &TimeProfile::for_rate(rate))?;
        let reference = reference_source(&run.probe, i, i, &kernels[i][i], kind, &grid, d)?;
        accumulators
            .entry((i, i))
            .or_default()
            .push(&measured.source, &reference.field, run.probe.label());
    }

    let mut values = vec![vec![0.0; n]; n];
    let mut resolved = vec![vec![false; n]; n];
    let mut entries: BTreeMap<(usize, usize), EntryRecovery> = BTreeMap::new();
    for ((i, j), acc) in std::mem::take(&mut accumulators) {
        let entry = acc.finalize(i, j, kind)?;
        values[i][j] = entry.value;
        resolved[i][j] = true;
        entries.insert((i, j), entry);
    }

    // Off-diagonals: subtract the predicted diagonal response, then project.
    for run in &bundle.runs {
        let species = run.probe.species();
        if species.len() != 2 {
            continue;
        }
        let horizon = horizon_of(&run.trajectory)?;
        let (a, b) = (species[0], species[1]);
        for (row, col) in [(a, b), (b, a)] {
            assert_zero_initial(&run.trajectory, row)?;
            let diag_coefficient = match known_diagonal {
                Some(known) => known[row][row],
                None => {
                    if !resolved[row][row] {
                        return Err(CoreError::InvalidParameter(format!(
                            "diagonal ({row}, {row}) must be recovered before entry \
                             ({row}, {col}); add a single-species probe"
                        )));
                    }
                    values[row][row]
                }
            };
            let mut spectrum = run.trajectory.terminal()[row].to_spectrum();
            if diag_coefficient != 0.0 {
                let diag_rate = 2.0 * run.probe.rate(row, d[row], &grid);
                let diag_source =
                    unit_pair_source(&run.probe, row, row, &kernels[row][row], kind, &grid)?;
                let diag_spectrum = diag_source.to_spectrum();
                let coeffs = spectrum.coeffs_mut();
                for (idx, c) in diag_spectrum.coeffs().iter().enumerate() {
                    let factor =
                        duhamel_factor(d[row] * grid.freq_sq(idx), diag_rate, horizon);
                    coeffs[idx] -= diag_coefficient * c * factor;
                }
            }
            let rate = run.probe.rate(row, d[row], &grid) + run.probe.rate(col, d[col], &grid);
            let measured =
                deconvolve_spectrum(spectrum, d[row], &TimeProfile::for_rate(rate), horizon)?;
            let reference =
                reference_source(&run.probe, row, col, &kernels[row][col], kind, &grid, d)?;
            accumulators
                .entry((row, col))
                .or_default()
                .push(&measured.source, &reference.field, run.probe.label());
        }
    }
    for ((i, j), acc) in accumulators {
        let entry = acc.finalize(i, j, kind)?;
        values[i][j] = entry.value;
        resolved[i][j] = true;
        entries.insert((i, j), entry);
    }

    for i in 0..n {
        for j in 0..n {
            if !resolved[i][j] {
                return Err(CoreError::InvalidParameter(format!(
                    "no probe run targets entry ({i}, {j})"
                )));
            }
        }
    }
    Ok(MatrixRecovery {
        values,
        entries: entries.into_values().collect(),
    })
}

/// One-shot joint least squares over every probe run: the terminal spectra
/// are linear in the coupling entries with known per-mode factors, so all
/// entries can be fit simultaneously. Serves as a cross-check of the
/// sequential elimination.
pub fn recover_matrix_joint(
    bundle: &MeasurementBundle,
    kernels: &[Vec<KernelSpec>],
    kind: CouplingKind,
) -> Result<MatrixRecovery> {
    bundle.validate()?;
    let n = bundle.diffusion.len();
    check_kernel_bank(kernels, n)?;
    let grid = bundle.grid().clone();
    let d = &bundle.diffusion;

    let mut unknowns: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut probe_lists: BTreeMap<(usize, usize), Vec<String>> = BTreeMap::new();
    for run in &bundle.runs {
        let active = run.probe.species();
        for &i in &active {
            for &j in &active {
                let next = unknowns.len();
                unknowns.entry((i, j)).or_insert(next);
                probe_lists
                    .entry((i, j))
                    .or_default()
                    .push(run.probe.label());
            }
        }
    }
    let n_unknowns = unknowns.len();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for run in &bundle.runs {
        let horizon = horizon_of(&run.trajectory)?;
        let active = run.probe.species();
        for &i in &active {
            assert_zero_initial(&run.trajectory, i)?;
            let response = run.trajectory.terminal()[i].to_spectrum();
            let mut predictors: Vec<(usize, Spectrum)> = Vec::new();
            for &j in &active {
                let mut spectrum =
                    unit_pair_source(&run.probe, i, j, &kernels[i][j], kind, &grid)?
                        .to_spectrum();
                let rate =
                    run.probe.rate(i, d[i], &grid) + run.probe.rate(j, d[j], &grid);
                let coeffs = spectrum.coeffs_mut();
                for (idx, c) in coeffs.iter_mut().enumerate() {
                    *c *= duhamel_factor(d[i] * grid.freq_sq(idx), rate, horizon);
                }
                predictors.push((unknowns[&(i, j)], spectrum));
            }
            let tol = SUPPORT_REL_TOL
                * predictors
                    .iter()
                    .map(|(_, s)| s.max_abs())
                    .fold(0.0, f64::max);
            for slot in 0..grid.len() {
                if !predictors.iter().any(|(_, s)| s.coeffs()[slot].norm() > tol) {
                    continue;
                }
                let mut row_re = vec![0.0; n_unknowns];
                let mut row_im = vec![0.0; n_unknowns];
                for (column, spectrum) in &predictors {
                    let c = spectrum.coeffs()[slot];
                    row_re[*column] += c.re;
                    row_im[*column] += c.im;
                }
                let b = response.coeffs()[slot];
                rows.push(row_re);
                rhs.push(b.re);
                rows.push(row_im);
                rhs.push(b.im);
            }
        }
    }
    if rows.len() < n_unknowns {
        return Err(CoreError::DegenerateFit(format!(
            "joint recovery has {} equations for {n_unknowns} unknowns",
            rows.len()
        )));
    }
    let matrix = DMatrix::from_fn(rows.len(), n_unknowns, |r, c| rows[r][c]);
    let vector = DVector::from_vec(rhs);
    let svd = matrix.clone().svd(true, true);
    let cutoff = 1e-12 * svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let solution = svd
        .solve(&vector, cutoff)
        .map_err(|e| CoreError::DegenerateFit(e.to_string()))?;
    let residual = (&matrix * &solution - &vector).norm() / vector.norm().max(f64::MIN_POSITIVE);

    let mut values = vec![vec![0.0; n]; n];
    let mut entries = Vec::new();
    for ((i, j), column) in &unknowns {
        values[*i][*j] = solution[*column];
        entries.push(EntryRecovery {
            row: *i,
            col: *j,
            value: solution[*column],
            residual,
            probes: probe_lists.remove(&(*i, *j)).unwrap_or_default(),
        });
    }
    for i in 0..n {
        for j in 0..n {
            if !unknowns.contains_key(&(i, j)) {
                return Err(CoreError::InvalidParameter(format!(
                    "no probe run targets entry ({i}, {j})"
                )));
            }
        }
    }
    Ok(MatrixRecovery { values, entries })
}

// ---------------------------------------------------------------------------
// Normalization constants
// ---------------------------------------------------------------------------

/// Recovered normalization constant (torus integral of the kernel
/// divergence) for one entry.
#[derive(Clone, Debug)]
pub struct NormalizationRecovery {
    pub row: usize,
    pub col: usize,
    /// `scale * divergence_integral`: the normalization constant of the
    /// kernel that actually generated the data.
    pub constant: f64,
    /// Measured amplitude of the data relative to the bank kernel.
    pub scale: f64,
    /// Divergence integral of the bank kernel (quadrature).
    pub divergence_integral: f64,
    /// Set when the bank kernel's divergence integrates to (numerically)
    /// zero — fully periodic kernels, whose constant is structurally zero.
    pub flagged_zero: bool,
    pub probes: Vec<String>,
}

/// Recover kernel normalization constants from probe runs, given the kernel
/// family (bank) and the known, nonzero coupling matrix: the projection that
/// recovers coupling entries is solved for the kernel amplitude instead, and
/// the amplitude multiplies the bank kernel's divergence integral.
pub fn recover_normalization(
    bundle: &MeasurementBundle,
    kernels: &[Vec<KernelSpec>],
    mu: &[Vec<f64>],
) -> Result<Vec<NormalizationRecovery>> {
    let n = bundle.diffusion.len();
    if mu.len() != n || mu.iter().any(|row| row.len() != n) {
        return Err(CoreError::InvalidParameter(format!(
            "known coupling matrix must be {n} x {n}"
        )));
    }
    let recovered = recover_matrix(bundle, kernels, CouplingKind::VectorKernels, Some(mu))?;
    let grid = bundle.grid().clone();
    let mut out = Vec::with_capacity(recovered.entries.len());
    for entry in recovered.entries {
        let (row, col) = (entry.row, entry.col);
        let known = mu[row][col];
        if known.abs() <= KNOWN_COUPLING_TOL {
            return Err(CoreError::NonIdentifiable(format!(
                "coupling entry ({row}, {col}) is zero; the kernel amplitude cannot be separated"
            )));
        }
        let scale = entry.value / known;
        let spec = &kernels[row][col];
        let divergence_integral = divergence_quadrature(spec, &grid)?;
        let sup = spec
            .sample_vector(&grid)?
            .iter()
            .map(Field::max_abs)
            .fold(0.0, f64::max);
        let flagged_zero = divergence_integral.abs() <= ZERO_INTEGRAL_REL_TOL * (1.0 + sup);
        out.push(NormalizationRecovery {
            row,
            col,
            constant: scale * divergence_integral,
            scale,
            divergence_integral,
            flagged_zero,
            probes: entry.probes,
        });
    }
    Ok(out)
}

/// Torus integral of the divergence of a vector kernel.
///
/// Radial families use the analytic pointwise divergence
/// `phi'(r) + (ndim - 1) phi(r) / r` (zero at the origin node, where the
/// direction is undefined) summed over the grid — the `1/r` factor is
/// integrable, and any nonzero value reflects the kernel's discontinuity at
/// the origin. Grid-sampled kernels use the spectral divergence, whose
/// integral vanishes identically for periodic fields.
pub fn divergence_quadrature(spec: &KernelSpec, grid: &Arc<TorusGrid>) -> Result<f64> {
    spec.validate(grid)?;
    let radial: (f64, Box<dyn Fn(f64) -> f64>, Box<dyn Fn(f64) -> f64>) = match spec {
        KernelSpec::GaussianBump { amplitude, width } => {
            let (a, s) = (*amplitude, *width);
            (
                a,
                Box::new(move |r: f64| a * (-r * r / (2.0 * s * s)).exp()),
                Box::new(move |r: f64| -(r / (s * s)) * a * (-r * r / (2.0 * s * s)).exp()),
            )
        }
        KernelSpec::CompactRadialVector { amplitude, radius } => {
            let (a, rr) = (*amplitude, *radius);
            let bump = |s: f64| -> f64 {
                if s >= 1.0 {
                    0.0
                } else {
                    (1.0 - 1.0 / (1.0 - s * s)).exp()
                }
            };
            (
                a,
                Box::new(move |r: f64| a * bump(r / rr)),
                Box::new(move |r: f64| {
                    let s = r / rr;
                    if s >= 1.0 {
                        0.0
                    } else {
                        let denom = 1.0 - s * s;
                        a * bump(s) * (-2.0 * s / (denom * denom)) / rr
                    }
                }),
            )
        }
        KernelSpec::GridSampled { paths } if paths.len() == grid.ndim() => {
            let components = spec.sample_vector(grid)?;
            return Ok(mass(&divergence(&components)?).re);
        }
        _ => {
            return Err(CoreError::InvalidParameter(format!(
                "divergence normalization applies to vector kernels only, got {spec:?}"
            )));
        }
    };
    let (_, phi, dphi) = radial;
    let codim = (grid.ndim() - 1) as f64;
    let mut acc = 0.0;
    for idx in 0..grid.len() {
        let x = grid.centered_node(idx);
        let r = x.iter().map(|c| c * c).sum::<f64>().sqrt();
        if r == 0.0 {
            continue;
        }
        acc += dphi(r) + codim * phi(r) / r;
    }
    Ok(acc * grid.cell_volume())
}

// ---------------------------------------------------------------------------
// Scalar kernel sweep
// ---------------------------------------------------------------------------

/// One recovered kernel transform coefficient.
#[derive(Clone, Debug)]
pub struct ModeRecovery {
    pub mode: Vec<i64>,
    pub value: Complex64,
    pub probe: String,
}

/// A scalar kernel reconstructed from a frequency sweep.
#[derive(Clone, Debug)]
pub struct KernelRecovery {
    /// Mean-free real reconstruction from the recovered coefficients.
    pub field: Field,
    /// Recovered coefficients at canonical modes, in lattice order.
    pub table: Vec<ModeRecovery>,
    /// Canonical modes within the cutoff that no run could determine.
    pub gaps: Vec<Vec<i64>>,
    pub cutoff: i64,
}

/// Recover the scalar potential of coupling entry `(row, col)` from a
/// frequency sweep: each run reads one transform coefficient at its probe's
/// response frequency, the conjugate-symmetric closure makes the kernel
/// real, and the zero mode is pinned to zero (the dynamics cannot see a
/// constant shift of the potential). Frequencies within the cutoff that no
/// run determines are reported as gaps.
pub fn recover_w(
    bundle: &MeasurementBundle,
    row: usize,
    col: usize,
    coupling: f64,
    cutoff: i64,
) -> Result<KernelRecovery> {
    bundle.validate()?;
    if coupling.abs() <= KNOWN_COUPLING_TOL {
        return Err(CoreError::NonIdentifiable(format!(
            "coupling entry ({row}, {col}) is zero; the kernel cannot be separated"
        )));
    }
    if cutoff < 1 {
        return Err(CoreError::InvalidParameter(format!(
            "sweep cutoff must be at least 1, got {cutoff}"
        )));
    }
    let grid = bundle.grid().clone();
    let d = &bundle.diffusion;
    let volume = grid.volume();
    let ndim = grid.ndim();

    let mut recovered: BTreeMap<Vec<i64>, ModeRecovery> = BTreeMap::new();
    for run in &bundle.runs {
        let probe = &run.probe;
        let target = probe.pattern_for(col).ok_or_else(|| {
            CoreError::InvalidParameter(format!(
                "sweep run [{}] does not activate species {col}",
                probe.label()
            ))
        })?;
        let crate::probe::ProbePattern::PlaneWave { mode } = target else {
            return Err(CoreError::InvalidParameter(format!(
                "sweep run [{}] probes species {col} with a constant; kernel sweeps need \
                 plane waves",
                probe.label()
            )));
        };
        let mode = mode.clone();
        let read = probe.read_mode(row, col, &grid).ok_or_else(|| {
            CoreError::InvalidParameter(format!(
                "sweep run [{}] does not activate species {row}",
                probe.label()
            ))
        })?;
        if read.iter().all(|&m| m == 0) {
            continue; // degenerate read; accounted as a gap below
        }
        // Response amplitude carries xi_read . xi_target (differentiation
        // frequencies); a vanishing product means the run determined nothing.
        let dot: f64 = (0..ndim)
            .map(|axis| {
                grid.deriv_freq(axis, grid.slot(axis, read[axis]))
                    * grid.deriv_freq(axis, grid.slot(axis, mode[axis]))
            })
            .sum();
        if dot == 0.0 {
            continue;
        }
        let horizon = horizon_of(&run.trajectory)?;
        assert_zero_initial(&run.trajectory, row)?;
        let rate = probe.rate(row, d[row], &grid) + probe.rate(col, d[col], &grid);
        let decay = {
            let slot: Vec<usize> = read
                .iter()
                .enumerate()
                .map(|(axis, &m)| grid.slot(axis, m))
                .collect();
            let flat = slot
                .iter()
                .zip(grid.dims())
                .fold(0usize, |acc, (&k, &n)| acc * n + k);
            d[row] * grid.freq_sq(flat)
        };
        let Some(factor) = recoverable_factor(decay, &TimeProfile::for_rate(rate), horizon)
        else {
            continue;
        };
        let response = run.trajectory.terminal()[row].to_spectrum().coeff(&read);
        let measured = -response / factor;
        let value = 2.0 * measured / (coupling * volume * dot);
        let (rep, flipped) = alias_canonical(&grid, &mode);
        let value = if flipped { value.conj() } else { value };
        recovered.entry(rep.clone()).or_insert(ModeRecovery {
            mode: rep,
            value,
            probe: probe.label(),
        });
    }

    // One gap per grid slot: at a Nyquist cutoff, ± the Nyquist component
    // name the same slot.
    let mut lattice: Vec<Vec<i64>> = canonical_modes(ndim, cutoff)
        .into_iter()
        .map(|m| alias_canonical(&grid, &m).0)
        .collect();
    lattice.sort();
    lattice.dedup();
    let gaps: Vec<Vec<i64>> = lattice
        .into_iter()
        .filter(|m| !recovered.contains_key(m))
        .collect();

    let mut spectrum = Spectrum::zeros(&grid);
    for (mode, rec) in &recovered {
        let negated: Vec<i64> = mode
            .iter()
            .enumerate()
            .map(|(axis, &m)| grid.alias_mode(axis, -m))
            .collect();
        if negated == *mode {
            // Self-conjugate slot (Nyquist fold): the coefficient must be real.
            *spectrum.coeff_mut(mode) = Complex64::new(rec.value.re, 0.0);
        } else {
            *spectrum.coeff_mut(mode) = rec.value;
            *spectrum.coeff_mut(&negated) = rec.value.conj();
        }
    }
    let mut field = spectrum.to_field();
    field.refresh_realness();

    Ok(KernelRecovery {
        field,
        table: recovered.into_values().collect(),
        gaps,
        cutoff,
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::rel_l2_error;
    use crate::parallel::try_map_units;
    use crate::probe::{kernel_sweep_schedule, matrix_schedule, ProbePattern};
    use crate::variation::DEFAULT_EPSILONS;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn compact_bank(n: usize) -> Vec<Vec<KernelSpec>> {
        vec![
            vec![
                KernelSpec::CompactRadialVector {
                    amplitude: 1.0,
                    radius: 0.2,
                };
                n
            ];
            n
        ]
    }

    fn gaussian_bank(n: usize) -> Vec<Vec<KernelSpec>> {
        vec![
            vec![
                KernelSpec::GaussianBump {
                    amplitude: 1.0,
                    width: 0.18,
                };
                n
            ];
            n
        ]
    }

    fn random_mean_free_source(grid: &Arc<TorusGrid>, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spectrum = Spectrum::zeros(grid);
        for m0 in -3i64..=3 {
            for m1 in -3i64..=3 {
                if m0 == 0 && m1 == 0 {
                    continue;
                }
                let c = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                *spectrum.coeff_mut(&[m0, m1]) = c;
                *spectrum.coeff_mut(&[-m0, -m1]) = c.conj();
            }
        }
        let mut field = spectrum.to_field();
        field.refresh_realness();
        field
    }

    fn manufactured_trajectory(
        source: &Field,
        d: f64,
        profile: &TimeProfile,
        horizon: f64,
    ) -> Trajectory {
        let grid = source.grid().clone();
        let spectrum = source.to_spectrum();
        let mut terminal = Spectrum::zeros(&grid);
        for (idx, c) in spectrum.coeffs().iter().enumerate() {
            let factor = duhamel_factor(d * grid.freq_sq(idx), profile.rate(), horizon);
            terminal.coeffs_mut()[idx] = -c * factor;
        }
        let mut end = terminal.to_field();
        end.refresh_realness();
        Trajectory::new(
            grid.clone(),
            vec![0.0, horizon],
            vec![vec![Field::zeros(&grid)], vec![end]],
        )
    }

    fn direct_bundle(
        params: &ModelParams,
        grid: &Arc<TorusGrid>,
        schedule: &[ProbeSpec],
        n_steps: usize,
    ) -> MeasurementBundle {
        let runs = try_map_units(schedule.to_vec(), |probe| -> Result<ProbeRun> {
            run_probe_direct(params, grid, &probe, DEFAULT_PROBE_HORIZON, n_steps)
        })
        .unwrap();
        MeasurementBundle::new(constant_diffusion(params).unwrap(), runs)
    }

    fn emulated_bundle(
        params: &ModelParams,
        grid: &Arc<TorusGrid>,
        schedule: &[ProbeSpec],
    ) -> MeasurementBundle {
        let runs = try_map_units(schedule.to_vec(), |probe| -> Result<ProbeRun> {
            emulate_probe_run(params, grid, &probe, DEFAULT_PROBE_HORIZON)
        })
        .unwrap();
        MeasurementBundle::new(constant_diffusion(params).unwrap(), runs)
    }

    #[test]
    fn duhamel_factor_matches_numeric_integration() {
        let cases = [
            (0.0, 0.0, 0.7),
            (2.0, 0.0, 0.5),
            (3.0, -3.0, 0.4), // removable point decay + rate = 0
            (0.5, -2.5, 1.2),
            (40.0, -1.0, 0.05),
            (1e-9, 1e-9, 0.3),
        ];
        for &(decay, rate, horizon) in &cases {
            // Simpson's rule on the integrand e^{-decay (T-s)} e^{rate s}.
            let n = 4000;
            let h = horizon / n as f64;
            let g = |s: f64| (-decay * (horizon - s)).exp() * (rate * s).exp();
            let mut acc = g(0.0) + g(horizon);
            for k in 1..n {
                let w = if k % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * g(k as f64 * h);
            }
            let numeric = acc * h / 3.0;
            assert_relative_eq!(
                duhamel_factor(decay, rate, horizon),
                numeric,
                max_relative = 1e-10
            );
        }
        let removable = duhamel_factor(3.0, -3.0, 0.4);
        assert_relative_eq!(removable, 0.4 * (-3.0f64 * 0.4).exp(), max_relative = 1e-14);
    }

    #[test]
    fn deconvolve_recovers_manufactured_sources() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let d = 0.03;
        for (seed, profile) in [
            (7u64, TimeProfile::Exponential { rate: -1.3 }),
            (8u64, TimeProfile::Constant),
            (9u64, TimeProfile::Exponential { rate: 0.9 }),
        ] {
            let source = random_mean_free_source(&grid, seed);
            let trajectory = manufactured_trajectory(&source, d, &profile, 0.6);
            let recovered = deconvolve_source(&trajectory, 0, d, &profile).unwrap();
            assert!(recovered.unrecoverable.is_empty());
            assert!(rel_l2_error(&recovered.source, &source).unwrap() < 1e-12);
            assert!(recovered.source.is_real());
        }
    }

    #[test]
    fn deconvolve_flags_slow_modes_as_unrecoverable() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let d = 1e-8;
        let horizon = 1e-6;
        let source = random_mean_free_source(&grid, 11);
        let trajectory = manufactured_trajectory(&source, d, &TimeProfile::Constant, horizon);
        let recovered =
            deconvolve_source(&trajectory, 0, d, &TimeProfile::Constant).unwrap();
        assert!(recovered.unrecoverable.contains(&vec![1, 0]));
        // High modes still clear the threshold.
        assert!(!recovered.unrecoverable.contains(&vec![8, 8]));
        // Flagged modes come back as zero (up to the transform round trip).
        let spectrum = recovered.source.to_spectrum();
        assert!(spectrum.coeff(&[1, 0]).norm() <= 1e-14 * spectrum.max_abs());
    }

    #[test]
    fn deconvolve_rejects_mean_carrying_responses() {
        let grid = TorusGrid::unit_square(8).unwrap();
        let mut end = random_mean_free_source(&grid, 3);
        end.axpy(Complex64::new(0.1, 0.0), &Field::constant(&grid, 1.0));
        let trajectory = Trajectory::new(
            grid.clone(),
            vec![0.0, 0.5],
            vec![vec![Field::zeros(&grid)], vec![end]],
        );
        let err = deconvolve_source(&trajectory, 0, 0.1, &TimeProfile::Constant).unwrap_err();
        assert!(err.to_string().contains("non-divergence source"));
    }

    #[test]
    fn deconvolve_rejects_nonzero_initial_states() {
        let grid = TorusGrid::unit_square(8).unwrap();
        let bump = random_mean_free_source(&grid, 4);
        let trajectory = Trajectory::new(
            grid.clone(),
            vec![0.0, 0.5],
            vec![vec![bump.clone()], vec![bump]],
        );
        let err = deconvolve_source(&trajectory, 0, 0.1, &TimeProfile::Constant).unwrap_err();
        assert!(err.to_string().contains("zero initial state"));
    }

    #[test]
    fn reference_sources_sit_on_probe_modes() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let probe = ProbeSpec::single(0, ProbePattern::PlaneWave { mode: vec![1, 0] });
        let kernel = KernelSpec::CompactRadialVector {
            amplitude: 1.0,
            radius: 0.2,
        };
        let d = [0.05];
        let reference = reference_source(
            &probe,
            0,
            0,
            &kernel,
            CouplingKind::VectorKernels,
            &grid,
            &d,
        )
        .unwrap();
        reference.validate().unwrap();
        assert_relative_eq!(
            reference.profile.rate(),
            2.0 * probe.rate(0, d[0], &grid),
            max_relative = 1e-12
        );
        let spectrum = reference.field.to_spectrum();
        let peak = spectrum.coeff(&[2, 0]).norm();
        assert!(peak > 1e-6, "doubled probe mode must carry the source");
        for idx in 0..grid.len() {
            let m = slot_modes(&grid, idx);
            if m != vec![2, 0] && m != vec![-2, 0] {
                assert!(
                    spectrum.coeffs()[idx].norm() <= 1e-12 * peak,
                    "unexpected content at {m:?}"
                );
            }
        }
    }

    #[test]
    fn emulator_matches_direct_solver_for_vector_kernels() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let params = ModelParams::drift_kernels(
            &[0.02, 0.04],
            vec![vec![0.3, -0.1], vec![0.2, 0.4]],
            compact_bank(2),
        );
        let probe = ProbeSpec::pair(
            0,
            ProbePattern::PlaneWave { mode: vec![1, 0] },
            1,
            ProbePattern::PlaneWave { mode: vec![0, 1] },
        );
        let direct = run_probe_direct(&params, &grid, &probe, 0.5, 400).unwrap();
        let emulated = emulate_probe_run(&params, &grid, &probe, 0.5).unwrap();
        assert_relative_eq!(
            direct.trajectory.times().last().unwrap(),
            emulated.trajectory.times().last().unwrap(),
            max_relative = 1e-12
        );
        for s in 0..2 {
            let err = rel_l2_error(
                &direct.trajectory.terminal()[s],
                &emulated.trajectory.terminal()[s],
            )
            .unwrap();
            assert!(err < 1e-5, "species {s} mismatch {err:.3e}");
        }
    }

    #[test]
    fn emulator_matches_direct_solver_for_potentials() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let params = ModelParams::gradient_potentials(
            &[0.05],
            vec![vec![0.5]],
            gaussian_bank(1),
        );
        let probe = ProbeSpec::single(0, ProbePattern::PlaneWave { mode: vec![1, 0] });
        let direct = run_probe_direct(&params, &grid, &probe, 0.5, 400).unwrap();
        let emulated = emulate_probe_run(&params, &grid, &probe, 0.5).unwrap();
        let err = rel_l2_error(
            &direct.trajectory.terminal()[0],
            &emulated.trajectory.terminal()[0],
        )
        .unwrap();
        assert!(err < 1e-5, "terminal mismatch {err:.3e}");
    }

    #[test]
    fn mu_matrix_recovered_to_1e4_on_direct_data() {
        let grid = TorusGrid::unit_square(32).unwrap();
        let truth = vec![vec![0.3, -0.1], vec![0.2, 0.4]];
        let params =
            ModelParams::drift_kernels(&[0.02, 0.04], truth.clone(), compact_bank(2));
        let schedule = matrix_schedule(2, &grid).unwrap();
        let bundle = direct_bundle(&params, &grid, &schedule, 400);
        let recovered = recover_mu(&bundle, &compact_bank(2)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(recovered.values[i][j], truth[i][j], epsilon = 1e-4);
            }
        }
        for entry in &recovered.entries {
            assert!(
                entry.residual < 1e-3,
                "entry ({}, {}) residual {:.3e}",
                entry.row,
                entry.col,
                entry.residual
            );
            assert!(!entry.probes.is_empty());
        }
    }

    #[test]
    fn zero_coupling_recovers_zero() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let params = ModelParams::drift_kernels(
            &[0.02, 0.04],
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            compact_bank(2),
        );
        let schedule = matrix_schedule(2, &grid).unwrap();
        let bundle = direct_bundle(&params, &grid, &schedule, 150);
        let recovered = recover_mu(&bundle, &compact_bank(2)).unwrap();
        for row in &recovered.values {
            for &v in row {
                assert_abs_diff_eq!(v, 0.0, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn constant_probes_hit_the_zero_normalization_error() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let params = ModelParams::drift_kernels(&[0.05], vec![vec![0.3]], compact_bank(1));
        let probe = ProbeSpec::single(0, ProbePattern::ConstantOne);
        let run = run_probe_direct(&params, &grid, &probe, 0.5, 100).unwrap();
        let bundle = MeasurementBundle::new(vec![0.05], vec![run]);
        let err = recover_mu(&bundle, &compact_bank(1)).unwrap_err();
        assert!(err.is_non_identifiable());
        assert!(err.to_string().contains("zero normalization"));
    }

    #[test]
    fn probe_responses_scale_linearly_with_the_coupling() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let bank = compact_bank(1);
        let single = ModelParams::drift_kernels(&[0.05], vec![vec![0.25]], bank.clone());
        let doubled = ModelParams::drift_kernels(&[0.05], vec![vec![0.5]], bank);
        let probe = ProbeSpec::single(0, ProbePattern::PlaneWave { mode: vec![1, 0] });
        let rate = 2.0 * probe.rate(0, 0.05, &grid);
        let profile = TimeProfile::for_rate(rate);
        let run_a = run_probe_direct(&single, &grid, &probe, 0.5, 300).unwrap();
        let run_b = run_probe_direct(&doubled, &grid, &probe, 0.5, 300).unwrap();
        let source_a = deconvolve_source(&run_a.trajectory, 0, 0.05, &profile).unwrap();
        let source_b = deconvolve_source(&run_b.trajectory, 0, 0.05, &profile).unwrap();
        let spec_a = source_a.source.to_spectrum();
        let spec_b = source_b.source.to_spectrum();
        let tol = 1e-8 * spec_b.max_abs();
        for idx in 0..grid.len() {
            let a = spec_a.coeffs()[idx];
            let b = spec_b.coeffs()[idx];
            if b.norm() > tol {
                assert!(
                    (2.0 * a - b).norm() <= 1e-8 * b.norm(),
                    "mode {:?}: 2*{a} vs {b}",
                    slot_modes(&grid, idx)
                );
            }
        }
    }

    #[test]
    fn sequential_elimination_matches_joint_least_squares() {
        // Axis-parallel pair frequencies make the cross entry's difference
        // mode land on the diagonal's source modes, so the diagonal
        // subtraction genuinely matters here.
        let grid = TorusGrid::unit_square(16).unwrap();
        let truth = vec![vec![0.3, -0.1], vec![0.2, 0.4]];
        let params =
            ModelParams::drift_kernels(&[0.02, 0.04], truth.clone(), compact_bank(2));
        let schedule = vec![
            ProbeSpec::single(0, ProbePattern::PlaneWave { mode: vec![1, 0] }),
            ProbeSpec::single(1, ProbePattern::PlaneWave { mode: vec![3, 0] }),
            ProbeSpec::pair(
                0,
                ProbePattern::PlaneWave { mode: vec![1, 0] },
                1,
                ProbePattern::PlaneWave { mode: vec![3, 0] },
            ),
        ];
        crate::probe::check_schedule(&schedule, &grid).unwrap();
        let bundle = emulated_bundle(&params, &grid, &schedule);
        let bank = compact_bank(2);
        let sequential = recover_mu(&bundle, &bank).unwrap();
        let joint = recover_matrix_joint(&bundle, &bank, CouplingKind::VectorKernels).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(
                    sequential.values[i][j],
                    joint.values[i][j],
                    epsilon = 1e-8
                );
                assert_abs_diff_eq!(sequential.values[i][j], truth[i][j], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn nu_matrix_recovered_to_1e4_on_direct_data() {
        let grid = TorusGrid::unit_square(32).unwrap();
        let truth = vec![vec![0.5, 0.1], vec![-0.2, 0.3]];
        let params =
            ModelParams::gradient_potentials(&[0.02, 0.04], truth.clone(), gaussian_bank(2));
        let schedule = matrix_schedule(2, &grid).unwrap();
        let bundle = direct_bundle(&params, &grid, &schedule, 400);
        let recovered = recover_nu(&bundle, &gaussian_bank(2)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(recovered.values[i][j], truth[i][j], epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn off_band_probes_are_non_identifiable_for_potentials() {
        let grid = TorusGrid::unit_square(16).unwrap();
        // The potential has energy only at modes ±[3, 0]; the default probe
        // frequency [1, 0] cannot see it.
        let bank = vec![vec![KernelSpec::CosineMode {
            amplitude: 1.0,
            modes: vec![3, 0],
        }]];
        let params = ModelParams::gradient_potentials(&[0.05], vec![vec![0.5]], bank.clone());
        let schedule = matrix_schedule(1, &grid).unwrap();
        let bundle = emulated_bundle(&params, &grid, &schedule);
        let err = recover_nu(&bundle, &bank).unwrap_err();
        assert!(err.is_non_identifiable());
        assert!(err.to_string().contains("available frequencies"));
    }

    #[test]
    fn cosine_potential_recovered_to_1e6() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let truth_spec = KernelSpec::CosineMode {
            amplitude: 1.0,
            modes: vec![1, 0],
        };
        let params = ModelParams::gradient_potentials(
            &[0.05],
            vec![vec![0.5]],
            vec![vec![truth_spec.clone()]],
        );
        let schedule = kernel_sweep_schedule(0, 0, &grid, 3).unwrap();
        let runs = try_map_units(schedule, |(_, probe)| -> Result<ProbeRun> {
            run_probe_direct(&params, &grid, &probe, DEFAULT_PROBE_HORIZON, 800)
        })
        .unwrap();
        let bundle = MeasurementBundle::new(vec![0.05], runs);
        let recovered = recover_w(&bundle, 0, 0, 0.5, 3).unwrap();

        // The transform coefficient of cos at the canonical mode is 1/2.
        let peak = recovered
            .table
            .iter()
            .find(|r| r.mode == vec![1, 0])
            .expect("target mode recovered");
        assert!(
            (peak.value - Complex64::new(0.5, 0.0)).norm() < 1e-6,
            "peak {}",
            peak.value
        );
        for rec in &recovered.table {
            if rec.mode != vec![1, 0] {
                assert!(
                    rec.value.norm() <= 1e-8 * 0.5,
                    "spurious content at {:?}: {}",
                    rec.mode,
                    rec.value
                );
            }
        }
        let truth = truth_spec.sample_scalar(&grid).unwrap();
        // The reconstruction is mean-free; cos already is.
        assert!(rel_l2_error(&recovered.field, &truth).unwrap() < 1e-6);
        assert!(recovered.gaps.is_empty());
    }

    #[test]
    fn gaussian_potential_sweep_meets_the_l2_bound() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let truth_spec = KernelSpec::GaussianBump {
            amplitude: 1.0,
            width: 0.18,
        };
        let params = ModelParams::gradient_potentials(
            &[0.02],
            vec![vec![0.5]],
            vec![vec![truth_spec.clone()]],
        );
        // Sweep all the way to the grid Nyquist mode.
        let cutoff = 8;
        let schedule = kernel_sweep_schedule(0, 0, &grid, cutoff).unwrap();
        let runs = try_map_units(schedule, |(_, probe)| -> Result<ProbeRun> {
            run_probe_direct(&params, &grid, &probe, DEFAULT_PROBE_HORIZON, 400)
        })
        .unwrap();
        let bundle = MeasurementBundle::new(vec![0.02], runs);
        let recovered = recover_w(&bundle, 0, 0, 0.5, cutoff).unwrap();

        // Gaps are exactly the modes whose doubled read carries no
        // differentiation frequency anywhere (every component doubles onto
        // the Nyquist line or the origin) — structural to divergence data.
        for gap in &recovered.gaps {
            let degenerate = (0..grid.ndim()).all(|axis| {
                let read = grid.alias_mode(axis, 2 * gap[axis]);
                grid.deriv_freq(axis, grid.slot(axis, read)) == 0.0
            });
            assert!(degenerate, "unexpected gap at {gap:?}");
        }
        assert_eq!(recovered.gaps.len(), 10);

        // Truncation oracle: the truth transform restricted to the modes
        // the sweep can determine, mean removed.
        let truth = truth_spec.sample_scalar(&grid).unwrap().to_spectrum();
        let mut oracle = Spectrum::zeros(&grid);
        for rec in &recovered.table {
            let negated: Vec<i64> = rec
                .mode
                .iter()
                .enumerate()
                .map(|(axis, &m)| grid.alias_mode(axis, -m))
                .collect();
            if negated == rec.mode {
                *oracle.coeff_mut(&rec.mode) = Complex64::new(truth.coeff(&rec.mode).re, 0.0);
            } else {
                *oracle.coeff_mut(&rec.mode) = truth.coeff(&rec.mode);
                *oracle.coeff_mut(&negated) = truth.coeff(&rec.mode).conj();
            }
        }
        let mut oracle_field = oracle.to_field();
        oracle_field.refresh_realness();
        let err = rel_l2_error(&recovered.field, &oracle_field).unwrap();
        assert!(err <= 1e-3, "relative l2 error {err:.3e}");
        // The recovery itself is far sharper than the acceptance bound.
        assert!(err <= 1e-5, "relative l2 error {err:.3e}");
    }

    #[test]
    fn constant_potential_recovers_zero() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let bank = vec![vec![KernelSpec::CosineMode {
            amplitude: 2.5,
            modes: vec![0, 0],
        }]];
        let params = ModelParams::gradient_potentials(&[0.05], vec![vec![0.5]], bank);
        let schedule = kernel_sweep_schedule(0, 0, &grid, 2).unwrap();
        let runs = try_map_units(schedule, |(_, probe)| -> Result<ProbeRun> {
            emulate_probe_run(&params, &grid, &probe, DEFAULT_PROBE_HORIZON)
        })
        .unwrap();
        let bundle = MeasurementBundle::new(vec![0.05], runs);
        let recovered = recover_w(&bundle, 0, 0, 0.5, 2).unwrap();
        assert!(recovered.field.max_abs() <= 1e-10);
        for rec in &recovered.table {
            assert!(rec.value.norm() <= 1e-10);
        }
    }

    #[test]
    fn w_recovery_is_idempotent_on_the_reconstruction() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let truth_spec = KernelSpec::GaussianBump {
            amplitude: 1.0,
            width: 0.18,
        };
        let cutoff = 4;
        let nu = 0.5;
        let params = ModelParams::gradient_potentials(
            &[0.05],
            vec![vec![nu]],
            vec![vec![truth_spec]],
        );
        let schedule = kernel_sweep_schedule(0, 0, &grid, cutoff).unwrap();
        let runs = try_map_units(schedule.clone(), |(_, probe)| -> Result<ProbeRun> {
            emulate_probe_run(&params, &grid, &probe, DEFAULT_PROBE_HORIZON)
        })
        .unwrap();
        let bundle = MeasurementBundle::new(vec![0.05], runs);
        let first = recover_w(&bundle, 0, 0, nu, cutoff).unwrap();

        // Regenerate data from the reconstruction and recover again.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w1.grd1");
        crate::grd1::write_field(&path, &first.field, 0.0).unwrap();
        let rebuilt_spec = KernelSpec::GridSampled {
            paths: vec![path.to_string_lossy().into_owned()],
        };
        let rebuilt_params = ModelParams::gradient_potentials(
            &[0.05],
            vec![vec![nu]],
            vec![vec![rebuilt_spec]],
        );
        let runs = try_map_units(schedule, |(_, probe)| -> Result<ProbeRun> {
            emulate_probe_run(&rebuilt_params, &grid, &probe, DEFAULT_PROBE_HORIZON)
        })
        .unwrap();
        let bundle = MeasurementBundle::new(vec![0.05], runs);
        let second = recover_w(&bundle, 0, 0, nu, cutoff).unwrap();

        assert_eq!(first.table.len(), second.table.len());
        let scale = first
            .table
            .iter()
            .map(|r| r.value.norm())
            .fold(0.0, f64::max);
        for (a, b) in first.table.iter().zip(&second.table) {
            assert_eq!(a.mode, b.mode);
            assert!(
                (a.value - b.value).norm() <= 1e-8 * scale,
                "mode {:?}: {} vs {}",
                a.mode,
                a.value,
                b.value
            );
        }
    }

    #[test]
    fn normalization_matches_independent_quadrature_and_scales_linearly() {
        let grid = TorusGrid::unit_square(32).unwrap();
        let bank_spec = KernelSpec::CompactRadialVector {
            amplitude: 0.4,
            radius: 0.2,
        };
        let truth_spec = KernelSpec::CompactRadialVector {
            amplitude: 0.8,
            radius: 0.2,
        };
        let mu = vec![vec![0.7]];
        let params =
            ModelParams::drift_kernels(&[0.05], mu.clone(), vec![vec![truth_spec.clone()]]);
        let schedule = matrix_schedule(1, &grid).unwrap();
        let bundle = emulated_bundle(&params, &grid, &schedule);
        let recovered =
            recover_normalization(&bundle, &[vec![bank_spec.clone()]], &mu).unwrap();
        assert_eq!(recovered.len(), 1);
        let rec = &recovered[0];
        assert_relative_eq!(rec.scale, 2.0, max_relative = 1e-9);
        assert!(!rec.flagged_zero);

        // Independent quadrature: the same analytic radial density but with
        // a finite-difference derivative.
        let (a, rr) = (0.4, 0.2);
        let bump = |s: f64| -> f64 {
            if s >= 1.0 {
                0.0
            } else {
                (1.0 - 1.0 / (1.0 - s * s)).exp()
            }
        };
        let phi = |r: f64| a * bump(r / rr);
        let h = 1e-6;
        let mut oracle = 0.0;
        for idx in 0..grid.len() {
            let x = grid.centered_node(idx);
            let r = x.iter().map(|c| c * c).sum::<f64>().sqrt();
            if r == 0.0 {
                continue;
            }
            oracle += (phi(r + h) - phi(r - h)) / (2.0 * h) + phi(r) / r;
        }
        oracle *= grid.cell_volume();
        assert_relative_eq!(rec.divergence_integral, oracle, max_relative = 1e-7);
        assert_relative_eq!(
            rec.constant,
            2.0 * rec.divergence_integral,
            max_relative = 1e-9
        );

        // Doubling the true kernel doubles the recovered constant.
        let doubled_spec = KernelSpec::CompactRadialVector {
            amplitude: 1.6,
            radius: 0.2,
        };
        let doubled_params =
            ModelParams::drift_kernels(&[0.05], mu.clone(), vec![vec![doubled_spec]]);
        let doubled_bundle = emulated_bundle(&doubled_params, &grid, &schedule);
        let doubled =
            recover_normalization(&doubled_bundle, &[vec![bank_spec]], &mu).unwrap();
        assert_relative_eq!(doubled[0].constant, 2.0 * rec.constant, max_relative = 1e-9);
    }

    #[test]
    fn normalization_with_zero_coupling_is_non_identifiable() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let mu = vec![vec![0.0]];
        let params = ModelParams::drift_kernels(&[0.05], mu.clone(), compact_bank(1));
        let schedule = matrix_schedule(1, &grid).unwrap();
        let bundle = emulated_bundle(&params, &grid, &schedule);
        let err = recover_normalization(&bundle, &compact_bank(1), &mu).unwrap_err();
        assert!(err.is_non_identifiable());
    }

    #[test]
    fn normalization_flags_fully_periodic_kernels() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        // A smooth periodic vector kernel: its divergence integrates to zero.
        let kx = Field::from_fn_real(&grid, |x| (std::f64::consts::TAU * x[0]).sin());
        let ky = Field::from_fn_real(&grid, |x| (std::f64::consts::TAU * x[1]).sin());
        let path_x = dir.path().join("kx.grd1");
        let path_y = dir.path().join("ky.grd1");
        crate::grd1::write_field(&path_x, &kx, 0.0).unwrap();
        crate::grd1::write_field(&path_y, &ky, 0.0).unwrap();
        let spec = KernelSpec::GridSampled {
            paths: vec![
                path_x.to_string_lossy().into_owned(),
                path_y.to_string_lossy().into_owned(),
            ],
        };
        let mu = vec![vec![0.5]];
        let params = ModelParams::drift_kernels(&[0.05], mu.clone(), vec![vec![spec.clone()]]);
        let schedule = matrix_schedule(1, &grid).unwrap();
        let bundle = emulated_bundle(&params, &grid, &schedule);
        let recovered = recover_normalization(&bundle, &[vec![spec]], &mu).unwrap();
        assert!(recovered[0].flagged_zero);
        assert!(recovered[0].divergence_integral.abs() <= 1e-10);
        assert_relative_eq!(recovered[0].scale, 1.0, max_relative = 1e-8);
    }

    #[test]
    fn extracted_runs_feed_recovery_within_the_epsilon_band() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let truth = 0.3;
        let params =
            ModelParams::drift_kernels(&[0.05], vec![vec![truth]], compact_bank(1));
        let probe = ProbeSpec::single(0, ProbePattern::PlaneWave { mode: vec![1, 0] });
        let extracted = extract_probe_run(
            &params,
            &grid,
            &probe,
            &DEFAULT_EPSILONS,
            DEFAULT_PROBE_HORIZON,
            200,
        )
        .unwrap();
        let direct =
            run_probe_direct(&params, &grid, &probe, DEFAULT_PROBE_HORIZON, 200).unwrap();
        let err = rel_l2_error(
            &extracted.trajectory.terminal()[0],
            &direct.trajectory.terminal()[0],
        )
        .unwrap();
        assert!(err < 0.05, "extraction drift {err:.3e}");

        let bundle = MeasurementBundle::new(vec![0.05], vec![extracted]);
        let recovered = recover_mu(&bundle, &compact_bank(1)).unwrap();
        assert!(
            (recovered.values[0][0] - truth).abs() < 0.05 * truth,
            "recovered {} vs {truth}",
            recovered.values[0][0]
        );
    }

    #[test]
    fn scalar_banks_are_rejected_for_vector_recovery() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let params = ModelParams::drift_kernels(&[0.05], vec![vec![0.3]], compact_bank(1));
        let schedule = matrix_schedule(1, &grid).unwrap();
        let bundle = emulated_bundle(&params, &grid, &schedule);
        let scalar_bank = vec![vec![KernelSpec::CosineMode {
            amplitude: 1.0,
            modes: vec![1, 0],
        }]];
        let err = recover_mu(&bundle, &scalar_bank).unwrap_err();
        assert!(err.to_string().contains("use sample_scalar"));
    }
}
