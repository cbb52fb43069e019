//! First- and second-order response fields of the models to small initial
//! data, produced two independent ways and cross-validated.
//!
//! Seeding the models with `eps*f1 + eps^2*f2` and expanding in `eps` gives
//! `u(eps) = eps*uI + (1/2)eps^2*uII + O(eps^3)`. Matching powers of `eps`:
//!
//! * order 1: every species of `uI` obeys the pure heat equation with
//!   initial value `f1` — the drift is quadratic, so it cannot contribute;
//! * order 2: `uII` obeys the heat equation driven by the source
//!   `2 div(uI_i * sum_j mu[i][j] (k[i][j] * uI_j))` (or the potential-
//!   gradient analogue), with initial value `2 f2`.
//!
//! [`solve_first_variation`] and [`solve_second_variation_m1`] /
//! [`solve_second_variation_m2`] integrate those linear systems directly.
//! [`extract_variations`] instead runs the full nonlinear solver over a
//! ladder of `eps` values and least-squares fits the expansion, returning
//! the fitted `(uI, uII)` with a residual diagnostic. Agreement of the two
//! routes (to first order in `eps`) is the harness' core cross-check.

use num_complex::Complex64;

use crate::error::{CoreError, Result};
use crate::field::Field;
use crate::grid::ensure_same_grid;
use crate::measure::{SnapshotPolicy, Trajectory};
use crate::params::{Coupling, Diffusion, ModelParams};
use crate::parallel::{map_units, try_map_units};
use crate::solver::{half_heat, simulate, FluxOperator};

/// Tolerance for matching the time grids of a supplied first-variation
/// trajectory against the second-variation stepping.
const TIME_GRID_TOL: f64 = 1e-9;

/// Small negative excursions of `f1` tolerated by the positivity gate
/// (sampling a non-negative function can dip below zero at rounding level).
const POSITIVITY_SLACK: f64 = -1e-12;

/// Initial data and epsilon ladder for the nonlinear extraction.
#[derive(Clone, Debug)]
pub struct VariationInput {
    /// Leading-order seed, one field per species; must be real and >= 0.
    pub f1: Vec<Field>,
    /// Second-order seed, one field per species; real, sign-free.
    pub f2: Vec<Field>,
    /// Strictly decreasing ladder of expansion parameters in (0, 1).
    pub epsilons: Vec<f64>,
}

/// Default epsilon ladder: large enough that the second-order signal stays
/// above solver noise on moderate grids, small enough for the cubic
/// remainder to be negligible.
pub const DEFAULT_EPSILONS: [f64; 3] = [1e-2, 5e-3, 2.5e-3];

impl VariationInput {
    pub fn new(f1: Vec<Field>, f2: Vec<Field>) -> Self {
        VariationInput {
            f1,
            f2,
            epsilons: DEFAULT_EPSILONS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.f1.is_empty() || self.f1.len() != self.f2.len() {
            return Err(CoreError::InvalidParameter(format!(
                "need matching non-empty seed lists, got {} and {}",
                self.f1.len(),
                self.f2.len()
            )));
        }
        for (i, f) in self.f1.iter().enumerate() {
            ensure_same_grid(f.grid(), self.f2[i].grid(), "variation seeds")?;
            if !f.is_real() || f.min_re() < POSITIVITY_SLACK {
                return Err(CoreError::InvalidParameter(format!(
                    "leading seed of species {i} must be real and non-negative (min {})",
                    f.min_re()
                )));
            }
            if !self.f2[i].is_real() {
                return Err(CoreError::InvalidParameter(format!(
                    "second-order seed of species {i} must be real",
                )));
            }
        }
        if self.epsilons.len() < 2 {
            return Err(CoreError::InvalidParameter(
                "epsilon ladder needs at least two values".into(),
            ));
        }
        for pair in self.epsilons.windows(2) {
            if pair[1] >= pair[0] {
                return Err(CoreError::InvalidParameter(
                    "epsilon ladder must be strictly decreasing".into(),
                ));
            }
        }
        if self
            .epsilons
            .iter()
            .any(|&e| !(e > 0.0 && e < 1.0) || !e.is_finite())
        {
            return Err(CoreError::InvalidParameter(
                "epsilon values must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Fitted first/second variation trajectories with the relative
/// least-squares residual of the expansion fit.
#[derive(Clone, Debug)]
pub struct VariationPair {
    pub u_i: Trajectory,
    pub u_ii: Trajectory,
    /// `sqrt(sum |u - fit|^2 / sum |u|^2)` over all epsilons, times, species
    /// and nodes; zero for an exactly quadratic response.
    pub residual: f64,
}

/// First-order variation: each species evolves by the pure heat equation
/// from `f1`. Complex seeds are permitted — the system is linear, and plane
/// waves make convenient probes.
pub fn solve_first_variation(
    diffusion: &[Diffusion],
    f1: &[Field],
    t_final: f64,
    dt: f64,
    policy: &SnapshotPolicy,
) -> Result<Trajectory> {
    let params = ModelParams {
        n_species: diffusion.len(),
        diffusion: diffusion.to_vec(),
        coupling: Coupling::Heat,
        clamp_enabled: true,
    };
    simulate(&params, f1, t_final, dt, policy)
}

/// Second-order variation for the vector-kernel model: heat with the source
/// `2 div(uI_i sum_j mu[i][j] (k[i][j] * uI_j))` and initial value `2 f2`.
pub fn solve_second_variation_m1(
    params: &ModelParams,
    u_i: &Trajectory,
    f2: &[Field],
    t_final: f64,
    dt: f64,
    policy: &SnapshotPolicy,
) -> Result<Trajectory> {
    if matches!(params.coupling, Coupling::GradientPotentials { .. }) {
        return Err(CoreError::InvalidParameter(
            "drift-kernel variation solver called with a gradient-potential coupling".into(),
        ));
    }
    solve_second_variation(params, u_i, f2, t_final, dt, policy)
}

/// Second-order variation for the potential model: heat with the source
/// `2 div(uI_i sum_j nu[i][j] grad(w[i][j] * uI_j))` and initial value `2 f2`.
pub fn solve_second_variation_m2(
    params: &ModelParams,
    u_i: &Trajectory,
    f2: &[Field],
    t_final: f64,
    dt: f64,
    policy: &SnapshotPolicy,
) -> Result<Trajectory> {
    if matches!(params.coupling, Coupling::DriftKernels { .. }) {
        return Err(CoreError::InvalidParameter(
            "gradient-potential variation solver called with a drift-kernel coupling".into(),
        ));
    }
    solve_second_variation(params, u_i, f2, t_final, dt, policy)
}

fn solve_second_variation(
    params: &ModelParams,
    u_i: &Trajectory,
    f2: &[Field],
    t_final: f64,
    dt: f64,
    policy: &SnapshotPolicy,
) -> Result<Trajectory> {
    if !(t_final > 0.0) || !t_final.is_finite() || !(dt > 0.0) || !dt.is_finite() {
        return Err(CoreError::InvalidParameter(format!(
            "time horizon and step must be positive and finite, got {t_final}, {dt}"
        )));
    }
    let grid = u_i.grid().clone();
    params.validate(&grid)?;
    if f2.len() != params.n_species || u_i.n_species() != params.n_species {
        return Err(CoreError::InvalidParameter(format!(
            "expected {} species in seeds and first variation, got {} and {}",
            params.n_species,
            f2.len(),
            u_i.n_species()
        )));
    }
    for field in f2 {
        ensure_same_grid(field.grid(), &grid, "second-variation seed")?;
    }

    let n_steps = (t_final / dt).round().max(1.0) as usize;
    let dt = t_final / n_steps as f64;
    // The source is sampled from uI at every step boundary, so the supplied
    // trajectory must live on exactly the stepping grid.
    if u_i.len() != n_steps + 1 {
        return Err(CoreError::InvalidParameter(format!(
            "first variation has {} states but the stepping needs {}",
            u_i.len(),
            n_steps + 1
        )));
    }
    let scale = TIME_GRID_TOL * t_final.max(1.0);
    for (k, &t) in u_i.times().iter().enumerate() {
        let expected = k as f64 * dt;
        if (t - expected).abs() > scale {
            return Err(CoreError::TimeNotRecorded(expected));
        }
    }

    let flux = FluxOperator::build(params, &grid)?;
    let sources: Vec<Vec<Field>> = try_map_units((0..u_i.len()).collect(), |k| {
        let (divs, _) = flux.flux_divergence(u_i.state(k), false)?;
        Ok::<Vec<Field>, CoreError>(
            divs.into_iter()
                .map(|d| d.scaled(Complex64::new(2.0, 0.0)))
                .collect(),
        )
    })?;

    let mut state: Vec<Field> = f2
        .iter()
        .map(|f| f.scaled(Complex64::new(2.0, 0.0)))
        .collect();
    let mut times = Vec::new();
    let mut states = Vec::new();
    if policy.wants(0, n_steps, dt) {
        times.push(0.0);
        states.push(state.clone());
    }
    let half = Complex64::new(dt / 2.0, 0.0);
    for step in 1..=n_steps {
        state = half_heat(params, state, dt)?;
        for (i, field) in state.iter_mut().enumerate() {
            field.axpy(half, &sources[step - 1][i]);
            field.axpy(half, &sources[step][i]);
        }
        state = half_heat(params, state, dt)?;
        for (i, field) in state.iter().enumerate() {
            if !field.all_finite() {
                return Err(CoreError::NanDetected {
                    step,
                    context: format!("second variation, species {i}"),
                });
            }
        }
        if policy.wants(step, n_steps, dt) {
            times.push(step as f64 * dt);
            states.push(state.clone());
        }
    }
    Ok(Trajectory::new(grid, times, states))
}

/// Run the nonlinear solver over the epsilon ladder with initial data
/// `eps*f1 + eps^2*f2` and fit `u(eps) ~ eps*a + (1/2)eps^2*b` per node and
/// recorded time. Returns `(a, b)` as the extracted first/second variations.
pub fn extract_variations(
    params: &ModelParams,
    input: &VariationInput,
    t_final: f64,
    dt: f64,
    policy: &SnapshotPolicy,
) -> Result<VariationPair> {
    input.validate()?;
    let grid = input.f1[0].grid().clone();
    params.validate(&grid)?;
    if input.f1.len() != params.n_species {
        return Err(CoreError::InvalidParameter(format!(
            "expected {} species in seeds, got {}",
            params.n_species,
            input.f1.len()
        )));
    }

    let eps = input.epsilons.clone();
    let trajectories: Vec<Trajectory> = try_map_units(eps.clone(), |e| {
        let seed: Vec<Field> = input
            .f1
            .iter()
            .zip(&input.f2)
            .map(|(a, b)| {
                let mut u0 = a.scaled(Complex64::new(e, 0.0));
                u0.axpy(Complex64::new(e * e, 0.0), b);
                u0
            })
            .collect();
        simulate(params, &seed, t_final, dt, policy)
    })?;

    // Normal equations of the per-node least squares with regressors
    // [eps, eps^2/2]; the 2x2 system is shared by every node.
    let (mut m00, mut m01, mut m11) = (0.0, 0.0, 0.0);
    for &e in &eps {
        m00 += e * e;
        m01 += e * e * e / 2.0;
        m11 += e * e * e * e / 4.0;
    }
    let det = m00 * m11 - m01 * m01;
    if !(det > 1e-12 * m00 * m11) {
        return Err(CoreError::DegenerateFit(format!(
            "epsilon ladder {:?} gives a near-singular fit (det ratio {:.3e})",
            eps,
            det / (m00 * m11)
        )));
    }

    let times = trajectories[0].times().to_vec();
    let n_species = params.n_species;
    let n_times = times.len();
    let mut states_a: Vec<Vec<Field>> = Vec::with_capacity(n_times);
    let mut states_b: Vec<Vec<Field>> = Vec::with_capacity(n_times);
    let mut residual_num = 0.0;
    let mut residual_den = 0.0;

    let fits: Vec<(Vec<Field>, Vec<Field>, f64, f64)> =
        map_units((0..n_times).collect(), |t_idx| {
            let mut a_fields = Vec::with_capacity(n_species);
            let mut b_fields = Vec::with_capacity(n_species);
            let mut num = 0.0;
            let mut den = 0.0;
            for s in 0..n_species {
                let mut a = Field::zeros(&grid);
                let mut b = Field::zeros(&grid);
                {
                    let av = a.values_mut();
                    let bv = b.values_mut();
                    for node in 0..grid.len() {
                        let mut r1 = Complex64::default();
                        let mut r2 = Complex64::default();
                        for (ei, &e) in eps.iter().enumerate() {
                            let u = trajectories[ei].state(t_idx)[s].values()[node];
                            r1 += e * u;
                            r2 += e * e / 2.0 * u;
                        }
                        av[node] = (m11 * r1 - m01 * r2) / det;
                        bv[node] = (m00 * r2 - m01 * r1) / det;
                        for (ei, &e) in eps.iter().enumerate() {
                            let u = trajectories[ei].state(t_idx)[s].values()[node];
                            let fit = e * av[node] + e * e / 2.0 * bv[node];
                            num += (u - fit).norm_sqr();
                            den += u.norm_sqr();
                        }
                    }
                }
                a.refresh_realness();
                b.refresh_realness();
                a_fields.push(a);
                b_fields.push(b);
            }
            (a_fields, b_fields, num, den)
        });
    for (a_fields, b_fields, num, den) in fits {
        states_a.push(a_fields);
        states_b.push(b_fields);
        residual_num += num;
        residual_den += den;
    }

    let residual = if residual_den > 0.0 {
        (residual_num / residual_den).sqrt()
    } else {
        0.0
    };
    Ok(VariationPair {
        u_i: Trajectory::new(grid.clone(), times.clone(), states_a),
        u_ii: Trajectory::new(grid, times, states_b),
        residual,
    })
}
