//! Interaction-kernel families and their sampling onto torus grids.
//!
//! Two roles exist: vector kernels drive the drift directly (model M1),
//! scalar potentials drive it through their gradient (model M2). A kernel is
//! described by a [`KernelSpec`] and turned into grid data with
//! [`KernelSpec::sample_scalar`] or [`KernelSpec::sample_vector`]; sampling
//! uses the minimum-image displacement so that radial profiles wrap
//! consistently on the torus.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::field::Field;
use crate::grd1;
use crate::grid::TorusGrid;

/// Which slot of the model a kernel occupies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelRole {
    /// Vector-valued kernel convolved with the density (drift model).
    VectorKernelK,
    /// Scalar potential whose gradient of the convolution drives the drift.
    ScalarPotentialW,
}

/// Parametric kernel families.
///
/// Radial profiles are functions of the minimum-image distance `|x|`;
/// `CompactRadial*` variants use the smooth bump `exp(1 - 1/(1 - (r/R)^2))`
/// supported in the ball of radius `R`, which is non-negative, non-increasing
/// in `r`, and smooth up to the support boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `amplitude * exp(-|x|^2 / (2 width^2))`; as a vector kernel the
    /// magnitude rides on the outward unit direction.
    GaussianBump { amplitude: f64, width: f64 },
    /// `amplitude * cos(xi_m . x)` where `xi_m` is the integer mode `modes`
    /// on the grid's frequency lattice. Scalar role only: exactly two Fourier
    /// modes at `±modes`.
    CosineMode { amplitude: f64, modes: Vec<i64> },
    /// Vector kernel `(x/|x|) * amplitude * bump(|x|/radius)`.
    CompactRadialVector { amplitude: f64, radius: f64 },
    /// Scalar potential `amplitude * bump(|x|/radius)`.
    CompactRadialPotential { amplitude: f64, radius: f64 },
    /// Kernel read from grid files (one per component for the vector role).
    GridSampled { paths: Vec<String> },
}

pub(crate) fn smooth_bump(s: f64) -> f64 {
    if s >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    }
}

/// Minimum-image displacement from the origin: each coordinate (given in
/// `[0, L)`) is wrapped to the centered representative in `[-L/2, L/2)`.
fn centered_displacement(coords: &[f64], periods: &[f64]) -> Vec<f64> {
    coords
        .iter()
        .zip(periods)
        .map(|(&x, &l)| if x >= l / 2.0 { x - l } else { x })
        .collect()
}

impl KernelSpec {
    /// Validate the parameters against a target grid (support must fit in a
    /// half period so the periodization is unambiguous; widths and
    /// amplitudes must be positive and finite).
    pub fn validate(&self, grid: &TorusGrid) -> Result<()> {
        let half_min_period = grid
            .periods()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
            / 2.0;
        let finite = |name: &str, v: f64| -> Result<()> {
            if v.is_finite() {
                Ok(())
            } else {
                Err(CoreError::InvalidParameter(format!(
                    "kernel parameter `{name}` must be finite, got {v}"
                )))
            }
        };
        match self {
            KernelSpec::GaussianBump { amplitude, width } => {
                finite("amplitude", *amplitude)?;
                finite("width", *width)?;
                if *width <= 0.0 {
                    return Err(CoreError::InvalidParameter(format!(
                        "gaussian width must be positive, got {width}"
                    )));
                }
            }
            KernelSpec::CosineMode { amplitude, modes } => {
                finite("amplitude", *amplitude)?;
                if modes.len() != grid.ndim() {
                    return Err(CoreError::InvalidParameter(format!(
                        "cosine kernel has {} mode components for a {}-d grid",
                        modes.len(),
                        grid.ndim()
                    )));
                }
                for (axis, m) in modes.iter().enumerate() {
                    let n = grid.dims()[axis] as i64;
                    if m.abs() > n / 2 {
                        return Err(CoreError::InvalidParameter(format!(
                            "cosine mode {m} on axis {axis} exceeds the Nyquist mode {}",
                            n / 2
                        )));
                    }
                }
            }
            KernelSpec::CompactRadialVector { amplitude, radius }
            | KernelSpec::CompactRadialPotential { amplitude, radius } => {
                finite("amplitude", *amplitude)?;
                finite("radius", *radius)?;
                if *radius <= 0.0 {
                    return Err(CoreError::InvalidParameter(format!(
                        "support radius must be positive, got {radius}"
                    )));
                }
                if *radius >= half_min_period {
                    return Err(CoreError::InvalidParameter(format!(
                        "support radius {radius} must be below half the shortest period \
                         ({half_min_period}) so the kernel wraps unambiguously"
                    )));
                }
            }
            KernelSpec::GridSampled { paths } => {
                if paths.is_empty() {
                    return Err(CoreError::InvalidParameter(
                        "grid-sampled kernel needs at least one file path".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Sample the kernel as a scalar field over the torus (potential role).
    pub fn sample_scalar(&self, grid: &Arc<TorusGrid>) -> Result<Field> {
        self.validate(grid)?;
        let periods = grid.periods().to_vec();
        match self {
            KernelSpec::GaussianBump { amplitude, width } => {
                let (a, s) = (*amplitude, *width);
                Ok(Field::from_fn_real(grid, move |coords| {
                    let d = centered_displacement(coords, &periods);
                    let r2: f64 = d.iter().map(|c| c * c).sum();
                    a * (-r2 / (2.0 * s * s)).exp()
                }))
            }
            KernelSpec::CosineMode { amplitude, modes } => {
                let a = *amplitude;
                let freqs: Vec<f64> = modes
                    .iter()
                    .enumerate()
                    .map(|(axis, m)| grid.freq_of_mode(axis, *m))
                    .collect();
                Ok(Field::from_fn_real(grid, move |coords| {
                    let phase: f64 = coords
                        .iter()
                        .zip(&freqs)
                        .map(|(x, f)| x * f)
                        .sum();
                    a * phase.cos()
                }))
            }
            KernelSpec::CompactRadialPotential { amplitude, radius } => {
                let (a, rr) = (*amplitude, *radius);
                Ok(Field::from_fn_real(grid, move |coords| {
                    let d = centered_displacement(coords, &periods);
                    let r = d.iter().map(|c| c * c).sum::<f64>().sqrt();
                    a * smooth_bump(r / rr)
                }))
            }
            KernelSpec::GridSampled { paths } => {
                if paths.len() != 1 {
                    return Err(CoreError::InvalidParameter(format!(
                        "scalar grid-sampled kernel needs exactly one file, got {}",
                        paths.len()
                    )));
                }
                let (field, _) = grd1::read_field(std::path::Path::new(&paths[0]))?;
                crate::grid::ensure_same_grid(field.grid(), grid, "grid-sampled kernel")?;
                Ok(field)
            }
            KernelSpec::CompactRadialVector { .. } => Err(CoreError::InvalidParameter(
                "compact_radial_vector is a vector kernel; use sample_vector".into(),
            )),
        }
    }

    /// Sample the kernel as one field per axis (vector role). The origin
    /// node, where the radial direction is undefined, is set to zero: it is a
    /// single quadrature point of a measure-zero ambiguity.
    pub fn sample_vector(&self, grid: &Arc<TorusGrid>) -> Result<Vec<Field>> {
        self.validate(grid)?;
        let periods = grid.periods().to_vec();
        let radial_vector = |magnitude: &dyn Fn(f64) -> f64| -> Vec<Field> {
            (0..grid.ndim())
                .map(|axis| {
                    Field::from_fn_real(grid, |coords| {
                        let d = centered_displacement(coords, &periods);
                        let r = d.iter().map(|c| c * c).sum::<f64>().sqrt();
                        if r == 0.0 {
                            0.0
                        } else {
                            magnitude(r) * d[axis] / r
                        }
                    })
                })
                .collect()
        };
        match self {
            KernelSpec::GaussianBump { amplitude, width } => {
                let (a, s) = (*amplitude, *width);
                Ok(radial_vector(&move |r| a * (-r * r / (2.0 * s * s)).exp()))
            }
            KernelSpec::CompactRadialVector { amplitude, radius } => {
                let (a, rr) = (*amplitude, *radius);
                Ok(radial_vector(&move |r| a * smooth_bump(r / rr)))
            }
            KernelSpec::GridSampled { paths } => {
                if paths.len() != grid.ndim() {
                    return Err(CoreError::InvalidParameter(format!(
                        "vector grid-sampled kernel needs {} component files, got {}",
                        grid.ndim(),
                        paths.len()
                    )));
                }
                let mut components = Vec::with_capacity(paths.len());
                for path in paths {
                    let (field, _) = grd1::read_field(std::path::Path::new(path))?;
                    crate::grid::ensure_same_grid(field.grid(), grid, "grid-sampled kernel")?;
                    components.push(field);
                }
                Ok(components)
            }
            KernelSpec::CosineMode { .. } => Err(CoreError::InvalidParameter(
                "cosine_mode is a scalar potential; use sample_scalar".into(),
            )),
            KernelSpec::CompactRadialPotential { .. } => Err(CoreError::InvalidParameter(
                "compact_radial_potential is a scalar potential; use sample_scalar".into(),
            )),
        }
    }
}
