//! Model parameters shared by the forward solvers and the inverse pipelines.

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::field::Field;
use crate::grid::TorusGrid;
use crate::kernel::KernelSpec;

/// Per-species diffusion coefficient: a positive constant, or a positive
/// field (supported only by the pure-heat coupling, which is all the
/// diffusion-reconstruction pipeline needs).
#[derive(Clone, Debug)]
pub enum Diffusion {
    Constant(f64),
    Variable(Field),
}

impl Diffusion {
    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Diffusion::Constant(d) => Some(*d),
            Diffusion::Variable(_) => None,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Diffusion::Constant(d) => {
                if !d.is_finite() || *d <= 0.0 {
                    return Err(CoreError::InvalidParameter(format!(
                        "diffusion coefficient must be positive and finite, got {d}"
                    )));
                }
            }
            Diffusion::Variable(field) => {
                if !field.all_finite() {
                    return Err(CoreError::InvalidParameter(
                        "diffusion field contains non-finite values".into(),
                    ));
                }
                if field.min_re() <= 0.0 {
                    return Err(CoreError::InvalidParameter(format!(
                        "diffusion field must be positive everywhere, min {}",
                        field.min_re()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The advective coupling of the system.
#[derive(Clone, Debug)]
pub enum Coupling {
    /// No advection: every species follows the heat equation.
    Heat,
    /// Drift velocity `sum_j mu[i][j] (k[i][j] * u_j)` built from vector
    /// kernels.
    DriftKernels {
        mu: Vec<Vec<f64>>,
        kernels: Vec<Vec<KernelSpec>>,
    },
    /// Drift velocity `sum_j nu[i][j] grad(w[i][j] * u_j)` built from scalar
    /// potentials.
    GradientPotentials {
        nu: Vec<Vec<f64>>,
        kernels: Vec<Vec<KernelSpec>>,
    },
}

/// Full parameter set for a simulation or variation solve.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub n_species: usize,
    pub diffusion: Vec<Diffusion>,
    pub coupling: Coupling,
    /// Whether the flux sees `max(u, 0)` instead of `u`. On the physical
    /// branch (non-negative data) the two coincide; the clamp guards against
    /// negative excursions feeding the drift.
    pub clamp_enabled: bool,
}

fn validate_matrix(name: &str, matrix: &[Vec<f64>], n: usize) -> Result<()> {
    if matrix.len() != n || matrix.iter().any(|row| row.len() != n) {
        return Err(CoreError::InvalidParameter(format!(
            "{name} must be a {n}x{n} matrix"
        )));
    }
    for row in matrix {
        for value in row {
            if !value.is_finite() {
                return Err(CoreError::InvalidParameter(format!(
                    "{name} contains a non-finite entry"
                )));
            }
        }
    }
    Ok(())
}

impl ModelParams {
    /// Pure heat evolution with constant per-species diffusion.
    pub fn heat(diffusion: &[f64]) -> Self {
        ModelParams {
            n_species: diffusion.len(),
            diffusion: diffusion.iter().map(|d| Diffusion::Constant(*d)).collect(),
            coupling: Coupling::Heat,
            clamp_enabled: true,
        }
    }

    /// Drift model with an `N x N` coupling matrix and kernel bank.
    pub fn drift_kernels(
        diffusion: &[f64],
        mu: Vec<Vec<f64>>,
        kernels: Vec<Vec<KernelSpec>>,
    ) -> Self {
        ModelParams {
            n_species: diffusion.len(),
            diffusion: diffusion.iter().map(|d| Diffusion::Constant(*d)).collect(),
            coupling: Coupling::DriftKernels { mu, kernels },
            clamp_enabled: true,
        }
    }

    /// Gradient-potential model with an `N x N` coupling matrix and kernel
    /// bank.
    pub fn gradient_potentials(
        diffusion: &[f64],
        nu: Vec<Vec<f64>>,
        kernels: Vec<Vec<KernelSpec>>,
    ) -> Self {
        ModelParams {
            n_species: diffusion.len(),
            diffusion: diffusion.iter().map(|d| Diffusion::Constant(*d)).collect(),
            coupling: Coupling::GradientPotentials { nu, kernels },
            clamp_enabled: true,
        }
    }

    pub fn with_clamp(mut self, enabled: bool) -> Self {
        self.clamp_enabled = enabled;
        self
    }

    /// Check shape and positivity constraints against a target grid.
    pub fn validate(&self, grid: &Arc<TorusGrid>) -> Result<()> {
        let n = self.n_species;
        if n == 0 {
            return Err(CoreError::InvalidParameter(
                "at least one species is required".into(),
            ));
        }
        if self.diffusion.len() != n {
            return Err(CoreError::InvalidParameter(format!(
                "expected {n} diffusion coefficients, got {}",
                self.diffusion.len()
            )));
        }
        for d in &self.diffusion {
            d.validate()?;
            if let Diffusion::Variable(field) = d {
                crate::grid::ensure_same_grid(field.grid(), grid, "diffusion field")?;
                if !matches!(self.coupling, Coupling::Heat) {
                    return Err(CoreError::InvalidParameter(
                        "variable diffusion is supported only with the heat coupling".into(),
                    ));
                }
            }
        }
        match &self.coupling {
            Coupling::Heat => {}
            Coupling::DriftKernels { mu, kernels } => {
                validate_matrix("mu", mu, n)?;
                validate_kernel_bank(kernels, n, grid)?;
            }
            Coupling::GradientPotentials { nu, kernels } => {
                validate_matrix("nu", nu, n)?;
                validate_kernel_bank(kernels, n, grid)?;
            }
        }
        Ok(())
    }
}

fn validate_kernel_bank(kernels: &[Vec<KernelSpec>], n: usize, grid: &Arc<TorusGrid>) -> Result<()> {
    if kernels.len() != n || kernels.iter().any(|row| row.len() != n) {
        return Err(CoreError::InvalidParameter(format!(
            "kernel bank must be a {n}x{n} grid of specs"
        )));
    }
    for row in kernels {
        for spec in row {
            spec.validate(grid)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nonpositive_diffusion() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let params = ModelParams::heat(&[1.0, 0.0]);
        assert!(params.validate(&grid).is_err());
        let params = ModelParams::heat(&[1.0, -2.0]);
        assert!(params.validate(&grid).is_err());
        let params = ModelParams::heat(&[1.0, 2.0]);
        assert!(params.validate(&grid).is_ok());
    }

    #[test]
    fn rejects_ragged_coupling_matrix() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let spec = KernelSpec::GaussianBump {
            amplitude: 1.0,
            width: 0.1,
        };
        let params = ModelParams::drift_kernels(
            &[1.0, 1.0],
            vec![vec![0.1, 0.2]],
            vec![vec![spec.clone(); 2]; 2],
        );
        assert!(params.validate(&grid).is_err());
    }

    #[test]
    fn variable_diffusion_requires_heat_coupling() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let d_field = Field::constant(&grid, 1.0);
        let spec = KernelSpec::GaussianBump {
            amplitude: 1.0,
            width: 0.1,
        };
        let mut params = ModelParams::drift_kernels(
            &[1.0],
            vec![vec![0.1]],
            vec![vec![spec]],
        );
        params.diffusion = vec![Diffusion::Variable(d_field.clone())];
        assert!(params.validate(&grid).is_err());

        let mut heat = ModelParams::heat(&[1.0]);
        heat.diffusion = vec![Diffusion::Variable(d_field)];
        assert!(heat.validate(&grid).is_ok());
    }

    #[test]
    fn variable_diffusion_must_be_positive() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let d_field = Field::from_fn_real(&grid, |coords| coords[0] - 0.2);
        let mut heat = ModelParams::heat(&[1.0]);
        heat.diffusion = vec![Diffusion::Variable(d_field)];
        assert!(heat.validate(&grid).is_err());
    }
}
