//! Time integration of the nonlocal aggregation models.
//!
//! Both models share the structure `du_i/dt = d_i lap(u_i) + div(h(u_i) V_i)`
//! where the drift velocity is a convolution of the other species:
//! `V_i = sum_j mu[i][j] (k[i][j] * u_j)` for vector kernels, or
//! `V_i = sum_j nu[i][j] grad(w[i][j] * u_j)` for scalar potentials. Both
//! reduce spectrally to a per-axis transfer function applied to each
//! species' coefficients, so one flux operator serves both models.
//!
//! Stepping is Strang splitting: an exact spectral half-step of diffusion,
//! one Heun (explicit trapezoidal) step of the flux divergence, and another
//! exact diffusion half-step — second-order accurate overall, and exactly
//! mass-conservative because the divergence has zero mean on the torus.

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{CoreError, Result};
use crate::field::{dft_forward, divergence, Field, Spectrum};
use crate::grid::TorusGrid;
use crate::heat::step_heat_any;
use crate::measure::{SnapshotPolicy, Trajectory};
use crate::params::{Coupling, ModelParams};
use crate::parallel::try_map_units;

/// Fraction of a cell the drift may traverse per step.
pub const CFL_LIMIT: f64 = 0.5;

/// Clamp `h`: pass non-negative values through, zero out the rest. Applied
/// to the density inside the flux only; diffusion always acts on the raw
/// state.
pub fn apply_clamp(u: &Field) -> Field {
    u.map(|c| if c.re >= 0.0 { c } else { Complex64::default() })
}

/// Precomputed spectral velocity transfers: `V_i = sum_j ifft(T[i][j][axis]
/// .* fft(u_j))`, with the coupling coefficients folded in.
pub struct FluxOperator {
    grid: Arc<TorusGrid>,
    n_species: usize,
    /// `transfers[i][j][axis]`; empty when the coupling is pure heat.
    transfers: Vec<Vec<Vec<Spectrum>>>,
}

impl FluxOperator {
    /// Sample the kernel bank of `params` onto `grid` and fold the coupling
    /// matrix into per-axis transfer functions.
    pub fn build(params: &ModelParams, grid: &Arc<TorusGrid>) -> Result<Self> {
        let n = params.n_species;
        let ndim = grid.ndim();
        let vol = grid.volume();
        let transfers = match &params.coupling {
            Coupling::Heat => Vec::new(),
            Coupling::DriftKernels { mu, kernels } => {
                let mut rows = Vec::with_capacity(n);
                for i in 0..n {
                    let mut row = Vec::with_capacity(n);
                    for j in 0..n {
                        let components = kernels[i][j].sample_vector(grid)?;
                        let weight = Complex64::new(mu[i][j] * vol, 0.0);
                        let specs = components
                            .iter()
                            .map(|comp| {
                                let mut s = dft_forward(comp);
                                s.scale_slots(|_| weight);
                                s
                            })
                            .collect();
                        row.push(specs);
                    }
                    rows.push(row);
                }
                rows
            }
            Coupling::GradientPotentials { nu, kernels } => {
                let mut rows = Vec::with_capacity(n);
                for i in 0..n {
                    let mut row = Vec::with_capacity(n);
                    for j in 0..n {
                        let potential = kernels[i][j].sample_scalar(grid)?;
                        let base = dft_forward(&potential);
                        let weight = nu[i][j] * vol;
                        let specs = (0..ndim)
                            .map(|axis| {
                                let mut s = base.clone();
                                apply_axis_derivative(&mut s, grid, axis, weight);
                                s
                            })
                            .collect();
                        row.push(specs);
                    }
                    rows.push(row);
                }
                rows
            }
        };
        Ok(FluxOperator {
            grid: grid.clone(),
            n_species: n,
            transfers,
        })
    }

    pub fn is_trivial(&self) -> bool {
        self.transfers.is_empty()
    }

    /// Drift velocity components of species `i` given the spectra of all
    /// species.
    fn velocity(&self, i: usize, hats: &[Spectrum]) -> Vec<Field> {
        let ndim = self.grid.ndim();
        (0..ndim)
            .map(|axis| {
                let mut acc = Spectrum::zeros(&self.grid);
                for (j, hat) in hats.iter().enumerate() {
                    let t = &self.transfers[i][j][axis];
                    for ((o, tc), uc) in acc
                        .coeffs_mut()
                        .iter_mut()
                        .zip(t.coeffs())
                        .zip(hat.coeffs())
                    {
                        *o += tc * uc;
                    }
                }
                acc.to_field()
            })
            .collect()
    }

    /// Flux divergences `div(h(u_i) V_i)` for every species, plus the
    /// largest drift speed encountered (for the CFL check).
    ///
    /// With `clamp` false the raw state enters the flux — the form used by
    /// the linear variation systems, whose fields are signed.
    pub fn flux_divergence(&self, state: &[Field], clamp: bool) -> Result<(Vec<Field>, f64)> {
        if self.is_trivial() {
            let zeros = state
                .iter()
                .map(|u| Field::zeros(u.grid()))
                .collect();
            return Ok((zeros, 0.0));
        }
        let hats: Vec<Spectrum> = state.iter().map(dft_forward).collect();
        let indices: Vec<usize> = (0..self.n_species).collect();
        let results: Vec<(Field, f64)> = try_map_units(indices, |i| {
            let velocity = self.velocity(i, &hats);
            let speed = velocity
                .iter()
                .map(Field::max_abs)
                .fold(0.0, f64::max);
            let carried = if clamp {
                apply_clamp(&state[i])
            } else {
                state[i].clone()
            };
            let flux: Vec<Field> = velocity
                .iter()
                .map(|v| carried.mul_pointwise(v))
                .collect::<Result<_>>()?;
            Ok::<(Field, f64), CoreError>((divergence(&flux)?, speed))
        })?;
        let mut divs = Vec::with_capacity(results.len());
        let mut max_speed: f64 = 0.0;
        for (div, speed) in results {
            divs.push(div);
            max_speed = max_speed.max(speed);
        }
        Ok((divs, max_speed))
    }
}

fn apply_axis_derivative(s: &mut Spectrum, grid: &TorusGrid, axis: usize, weight: f64) {
    let coeffs = s.coeffs_mut();
    match grid.ndim() {
        1 => {
            for (k, c) in coeffs.iter_mut().enumerate() {
                *c *= Complex64::new(0.0, grid.deriv_freq(0, k) * weight);
            }
        }
        2 => {
            for (idx, c) in coeffs.iter_mut().enumerate() {
                let (i, j) = grid.split2(idx);
                let xi = match axis {
                    0 => grid.deriv_freq(0, i),
                    _ => grid.deriv_freq(1, j),
                };
                *c *= Complex64::new(0.0, xi * weight);
            }
        }
        _ => unreachable!(),
    }
}

fn check_initial_state(params: &ModelParams, f: &[Field], grid: &Arc<TorusGrid>) -> Result<()> {
    params.validate(grid)?;
    if f.len() != params.n_species {
        return Err(CoreError::InvalidParameter(format!(
            "expected {} initial fields, got {}",
            params.n_species,
            f.len()
        )));
    }
    for field in f {
        crate::grid::ensure_same_grid(field.grid(), grid, "initial state")?;
        if !field.all_finite() {
            return Err(CoreError::NanDetected {
                step: 0,
                context: "initial state".into(),
            });
        }
    }
    if !params.clamp_enabled {
        for (i, field) in f.iter().enumerate() {
            if field.is_real() && field.min_re() < 0.0 {
                return Err(CoreError::InvalidParameter(format!(
                    "species {i} has negative initial values ({:.3e}) but the clamp is disabled",
                    field.min_re()
                )));
            }
        }
    }
    Ok(())
}

/// Integrate the model to time `t_final` with steps of (approximately) `dt`,
/// recording states per `policy`. The step count is `round(t_final / dt)`,
/// and the effective step is `t_final / n_steps`, so requested horizons are
/// hit exactly.
pub fn simulate(
    params: &ModelParams,
    f: &[Field],
    t_final: f64,
    dt: f64,
    policy: &SnapshotPolicy,
) -> Result<Trajectory> {
    if !(t_final > 0.0) || !t_final.is_finite() {
        return Err(CoreError::InvalidParameter(format!(
            "time horizon must be positive and finite, got {t_final}"
        )));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(CoreError::InvalidParameter(format!(
            "time step must be positive and finite, got {dt}"
        )));
    }
    let grid = f
        .first()
        .map(|field| field.grid().clone())
        .ok_or_else(|| CoreError::InvalidParameter("no initial fields supplied".into()))?;
    check_initial_state(params, f, &grid)?;

    let n_steps = (t_final / dt).round().max(1.0) as usize;
    let dt = t_final / n_steps as f64;
    let flux = FluxOperator::build(params, &grid)?;
    let min_spacing = grid.min_spacing();

    let mut state: Vec<Field> = f.to_vec();
    let mut times = Vec::new();
    let mut states = Vec::new();
    if policy.wants(0, n_steps, dt) {
        times.push(0.0);
        states.push(state.clone());
    }

    for step in 1..=n_steps {
        state = half_heat(params, state, dt)?;

        if !flux.is_trivial() {
            let (k1, speed) = flux.flux_divergence(&state, params.clamp_enabled)?;
            if speed * dt > CFL_LIMIT * min_spacing {
                return Err(CoreError::CflViolation {
                    step,
                    speed,
                    dt,
                    cell: min_spacing,
                    limit: CFL_LIMIT,
                });
            }
            let mut predictor = state.clone();
            for (p, k) in predictor.iter_mut().zip(&k1) {
                p.axpy(Complex64::new(dt, 0.0), k);
            }
            let (k2, _) = flux.flux_divergence(&predictor, params.clamp_enabled)?;
            for ((s, a), b) in state.iter_mut().zip(&k1).zip(&k2) {
                s.axpy(Complex64::new(dt / 2.0, 0.0), a);
                s.axpy(Complex64::new(dt / 2.0, 0.0), b);
            }
        }

        state = half_heat(params, state, dt)?;

        for (i, field) in state.iter().enumerate() {
            if !field.all_finite() {
                return Err(CoreError::NanDetected {
                    step,
                    context: format!("species {i}"),
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

pub(crate) fn half_heat(params: &ModelParams, state: Vec<Field>, dt: f64) -> Result<Vec<Field>> {
    let pairs: Vec<(usize, Field)> = state.into_iter().enumerate().collect();
    try_map_units(pairs, |(i, u)| {
        step_heat_any(&u, &params.diffusion[i], dt / 2.0)
    })
}

/// Integrate the vector-kernel drift model (or pure heat).
pub fn simulate_m1(
    params: &ModelParams,
    f: &[Field],
    t_final: f64,
    dt: f64,
    policy: &SnapshotPolicy,
) -> Result<Trajectory> {
    if matches!(params.coupling, Coupling::GradientPotentials { .. }) {
        return Err(CoreError::InvalidParameter(
            "drift-kernel solver called with a gradient-potential coupling".into(),
        ));
    }
    simulate(params, f, t_final, dt, policy)
}

/// Integrate the gradient-potential model (or pure heat).
pub fn simulate_m2(
    params: &ModelParams,
    f: &[Field],
    t_final: f64,
    dt: f64,
    policy: &SnapshotPolicy,
) -> Result<Trajectory> {
    if matches!(params.coupling, Coupling::DriftKernels { .. }) {
        return Err(CoreError::InvalidParameter(
            "gradient-potential solver called with a drift-kernel coupling".into(),
        ));
    }
    simulate(params, f, t_final, dt, policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{mass, rel_l2_error};
    use crate::heat::step_heat;
    use crate::kernel::KernelSpec;
    use std::f64::consts::TAU;

    fn smooth_positive(grid: &Arc<TorusGrid>, seed: f64) -> Field {
        Field::from_fn_real(grid, |coords| {
            1.0 + 0.4 * (TAU * coords[0] + seed).cos() * (TAU * coords[1]).sin()
                + 0.2 * (TAU * 2.0 * coords[1] - seed).cos()
        })
    }

    fn sample_m1_params() -> ModelParams {
        let kernel = KernelSpec::CompactRadialVector {
            amplitude: 0.4,
            radius: 0.2,
        };
        ModelParams::drift_kernels(
            &[0.5, 0.8],
            vec![vec![0.3, -0.1], vec![0.2, 0.4]],
            vec![vec![kernel.clone(); 2]; 2],
        )
    }

    fn sample_m2_params() -> ModelParams {
        let kernel = KernelSpec::GaussianBump {
            amplitude: 0.5,
            width: 0.12,
        };
        ModelParams::gradient_potentials(
            &[0.5, 0.8],
            vec![vec![0.5, 0.1], vec![-0.2, 0.3]],
            vec![vec![kernel.clone(); 2]; 2],
        )
    }

    #[test]
    fn clamp_zeroes_negatives_only() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let mixed = Field::from_fn_real(&grid, |coords| (TAU * coords[0]).sin());
        let clamped = apply_clamp(&mixed);
        assert!(clamped.min_re() >= 0.0);
        for (orig, cl) in mixed.values().iter().zip(clamped.values()) {
            if orig.re >= 0.0 {
                assert_eq!(orig, cl);
            } else {
                assert_eq!(cl.re, 0.0);
            }
        }
        let positive = Field::from_fn_real(&grid, |coords| 1.0 + 0.5 * (TAU * coords[1]).cos());
        assert_eq!(apply_clamp(&positive).values(), positive.values());
    }

    #[test]
    fn zero_coupling_matches_pure_heat() {
        let grid = TorusGrid::unit_square(32).unwrap();
        let kernel = KernelSpec::CompactRadialVector {
            amplitude: 0.4,
            radius: 0.2,
        };
        let params = ModelParams::drift_kernels(
            &[0.7],
            vec![vec![0.0]],
            vec![vec![kernel]],
        );
        let f = smooth_positive(&grid, 0.3);
        let traj = simulate_m1(&params, &[f.clone()], 0.1, 0.01, &SnapshotPolicy::EveryStep)
            .unwrap();
        let mut heat_state = f;
        for _ in 0..10 {
            heat_state = step_heat(&heat_state, 0.7, 0.01).unwrap();
        }
        let err = rel_l2_error(&traj.terminal()[0], &heat_state).unwrap();
        assert!(err < 1e-12, "zero-mu trajectory deviates from heat: {err}");
    }

    #[test]
    fn zero_initial_data_stays_zero() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let zero = Field::zeros(&grid);
        for params in [sample_m1_params(), sample_m2_params()] {
            let traj = simulate(
                &params,
                &[zero.clone(), zero.clone()],
                0.05,
                0.01,
                &SnapshotPolicy::EveryStep,
            )
            .unwrap();
            assert_eq!(traj.terminal()[0].max_abs(), 0.0);
            assert_eq!(traj.terminal()[1].max_abs(), 0.0);
        }
    }

    #[test]
    fn mass_is_conserved_by_both_models() {
        let grid = TorusGrid::unit_square(32).unwrap();
        let f = [smooth_positive(&grid, 0.0), smooth_positive(&grid, 1.1)];
        for params in [sample_m1_params(), sample_m2_params()] {
            let traj = simulate(&params, &f, 0.2, 0.005, &SnapshotPolicy::EveryStep).unwrap();
            for i in 0..2 {
                let m0 = mass(&f[i]).re;
                let mt = mass(&traj.terminal()[i]).re;
                assert!(
                    (mt - m0).abs() <= 1e-10 * m0.abs(),
                    "species {i} mass drift {m0} -> {mt}"
                );
            }
        }
    }

    #[test]
    fn potential_shift_leaves_trajectory_unchanged() {
        // Only the gradient of the potential enters the drift, so w and
        // w + const must produce the same trajectory: the constant lands in
        // the zero mode, which differentiates to zero (up to FFT rounding).
        let grid = TorusGrid::unit_square(32).unwrap();
        let f = [smooth_positive(&grid, 0.4)];
        let w = KernelSpec::GaussianBump {
            amplitude: 0.5,
            width: 0.12,
        }
        .sample_scalar(&grid)
        .unwrap();
        let mut w_shifted = w.clone();
        w_shifted.axpy(Complex64::new(3.0, 0.0), &Field::constant(&grid, 1.0));

        let dir = tempfile::tempdir().unwrap();
        let path_w = dir.path().join("w.grd");
        let path_s = dir.path().join("w_shifted.grd");
        crate::grd1::write_field(&path_w, &w, 0.0).unwrap();
        crate::grd1::write_field(&path_s, &w_shifted, 0.0).unwrap();

        let params_for = |path: &std::path::Path| {
            ModelParams::gradient_potentials(
                &[0.5],
                vec![vec![0.4]],
                vec![vec![KernelSpec::GridSampled {
                    paths: vec![path.to_string_lossy().into_owned()],
                }]],
            )
        };
        let t1 = simulate_m2(&params_for(&path_w), &f, 0.1, 0.005, &SnapshotPolicy::EveryStep)
            .unwrap();
        let t2 = simulate_m2(&params_for(&path_s), &f, 0.1, 0.005, &SnapshotPolicy::EveryStep)
            .unwrap();
        let err = rel_l2_error(&t1.terminal()[0], &t2.terminal()[0]).unwrap();
        assert!(err <= 1e-12, "shifted-potential trajectories differ: {err}");
    }

    #[test]
    fn constant_potential_reduces_to_pure_heat() {
        let grid = TorusGrid::unit_square(32).unwrap();
        let f = smooth_positive(&grid, 0.9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("const.grd");
        crate::grd1::write_field(&path, &Field::constant(&grid, 2.5), 0.0).unwrap();
        let params = ModelParams::gradient_potentials(
            &[0.6],
            vec![vec![0.7]],
            vec![vec![KernelSpec::GridSampled {
                paths: vec![path.to_string_lossy().into_owned()],
            }]],
        );
        let traj = simulate_m2(&params, &[f.clone()], 0.1, 0.01, &SnapshotPolicy::EveryStep)
            .unwrap();
        let mut heat_state = f;
        for _ in 0..10 {
            heat_state = step_heat(&heat_state, 0.6, 0.01).unwrap();
        }
        let err = rel_l2_error(&traj.terminal()[0], &heat_state).unwrap();
        assert!(err <= 1e-12, "constant potential deviates from heat: {err}");
    }

    #[test]
    fn cfl_violation_is_reported() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let kernel = KernelSpec::GaussianBump {
            amplitude: 50.0,
            width: 0.15,
        };
        let params = ModelParams::drift_kernels(
            &[0.1],
            vec![vec![40.0]],
            vec![vec![kernel]],
        );
        let f = smooth_positive(&grid, 0.0);
        let err = simulate_m1(&params, &[f], 1.0, 0.05, &SnapshotPolicy::EveryStep).unwrap_err();
        assert!(matches!(err, CoreError::CflViolation { .. }), "got {err}");
    }

    #[test]
    fn negative_data_without_clamp_is_rejected() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let params = sample_m1_params().with_clamp(false);
        let mixed = Field::from_fn_real(&grid, |coords| (TAU * coords[0]).sin());
        let err = simulate_m1(
            &params,
            &[mixed.clone(), mixed],
            0.01,
            0.001,
            &SnapshotPolicy::EveryStep,
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::InvalidParameter(_)));
    }

    #[test]
    fn model_solver_mismatch_is_rejected() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let f = [smooth_positive(&grid, 0.0), smooth_positive(&grid, 0.5)];
        assert!(simulate_m2(&sample_m1_params(), &f, 0.01, 0.001, &SnapshotPolicy::EveryStep)
            .is_err());
        assert!(simulate_m1(&sample_m2_params(), &f, 0.01, 0.001, &SnapshotPolicy::EveryStep)
            .is_err());
    }

    #[test]
    fn splitting_converges_at_second_order() {
        let grid = TorusGrid::unit_square(32).unwrap();
        let params = sample_m2_params();
        let f = [smooth_positive(&grid, 0.7), smooth_positive(&grid, 1.9)];
        let t_final = 0.05;
        let run = |dt: f64| {
            simulate(&params, &f, t_final, dt, &SnapshotPolicy::AtTimes(vec![]))
                .unwrap()
                .terminal()
                .to_vec()
        };
        let coarse = run(t_final / 8.0);
        let medium = run(t_final / 16.0);
        let reference = run(t_final / 64.0);
        let err_c: f64 = (0..2)
            .map(|i| rel_l2_error(&coarse[i], &reference[i]).unwrap())
            .sum();
        let err_m: f64 = (0..2)
            .map(|i| rel_l2_error(&medium[i], &reference[i]).unwrap())
            .sum();
        let ratio = err_c / err_m;
        assert!(
            (3.5..=4.5).contains(&ratio),
            "expected ratio ~4 for second order, got {ratio} ({err_c:.3e}/{err_m:.3e})"
        );
    }

    #[test]
    fn positivity_persists_for_positive_data() {
        let grid = TorusGrid::unit_square(32).unwrap();
        let params = sample_m1_params();
        let f = [smooth_positive(&grid, 0.2), smooth_positive(&grid, 1.4)];
        assert!(f[0].min_re() > 0.0 && f[1].min_re() > 0.0);
        let traj = simulate(&params, &f, 0.1, 0.005, &SnapshotPolicy::EveryStep).unwrap();
        for state in (0..traj.len()).map(|k| traj.state(k)) {
            for field in state {
                assert!(field.min_re() > 0.0, "state went non-positive");
            }
        }
    }
}
