//! Uniform lattices on the periodic torus.
//!
//! A [`TorusGrid`] is a product of one or two circles, each sampled at a
//! power-of-two number of equispaced nodes. Node `i` on an axis of period `L`
//! with `N` points sits at `i * L / N`; the matching frequency lattice is
//! `xi = 2*pi*k/L` with the integer mode `k` stored in wrapped order
//! (`0, 1, .., N/2, -N/2+1, .., -1`).

use std::sync::Arc;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TorusGrid {
    dims: Vec<usize>,
    periods: Vec<f64>,
}

impl TorusGrid {
    /// Build a grid; every axis must have a power-of-two point count (>= 2)
    /// and a positive period.
    pub fn new(dims: &[usize], periods: &[f64]) -> Result<Arc<Self>> {
        if dims.is_empty() || dims.len() > 2 {
            return Err(CoreError::InvalidParameter(format!(
                "grid must have 1 or 2 axes, got {}",
                dims.len()
            )));
        }
        if dims.len() != periods.len() {
            return Err(CoreError::InvalidParameter(format!(
                "{} axis sizes but {} periods",
                dims.len(),
                periods.len()
            )));
        }
        for (axis, &n) in dims.iter().enumerate() {
            if n < 2 || !n.is_power_of_two() {
                return Err(CoreError::PowerOfTwoRequired { axis, points: n });
            }
        }
        for (axis, &p) in periods.iter().enumerate() {
            if !(p.is_finite() && p > 0.0) {
                return Err(CoreError::InvalidParameter(format!(
                    "axis {axis} period must be positive and finite, got {p}"
                )));
            }
        }
        Ok(Arc::new(TorusGrid {
            dims: dims.to_vec(),
            periods: periods.to_vec(),
        }))
    }

    /// Square 2-D grid with unit periods.
    pub fn unit_square(n: usize) -> Result<Arc<Self>> {
        Self::new(&[n, n], &[1.0, 1.0])
    }

    /// Square 2-D grid with equal periods `l`.
    pub fn square(n: usize, l: f64) -> Result<Arc<Self>> {
        Self::new(&[n, n], &[l, l])
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn periods(&self) -> &[f64] {
        &self.periods
    }

    /// Total node count.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Volume of one cell.
    pub fn cell_volume(&self) -> f64 {
        self.dims
            .iter()
            .zip(&self.periods)
            .map(|(&n, &l)| l / n as f64)
            .product()
    }

    /// Cell edge length along `axis`.
    pub fn spacing(&self, axis: usize) -> f64 {
        self.periods[axis] / self.dims[axis] as f64
    }

    /// Smallest cell edge over all axes (CFL reference length).
    pub fn min_spacing(&self) -> f64 {
        (0..self.ndim())
            .map(|a| self.spacing(a))
            .fold(f64::INFINITY, f64::min)
    }

    /// Total volume of the torus.
    pub fn volume(&self) -> f64 {
        self.periods.iter().product()
    }

    /// Physical coordinate of node `i` along `axis`, in `[0, L)`.
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        i as f64 * self.spacing(axis)
    }

    /// Coordinate of node `i` wrapped to the centered cell `[-L/2, L/2)`.
    pub fn centered_coord(&self, axis: usize, i: usize) -> f64 {
        let l = self.periods[axis];
        let x = self.coord(axis, i);
        if x >= l / 2.0 {
            x - l
        } else {
            x
        }
    }

    /// Signed integer mode number of storage slot `k` (wrapped order).
    /// Slot `N/2` is reported as `+N/2` (Nyquist).
    pub fn mode(&self, axis: usize, k: usize) -> i64 {
        let n = self.dims[axis];
        if k <= n / 2 {
            k as i64
        } else {
            k as i64 - n as i64
        }
    }

    /// Storage slot of signed integer mode `m` (must satisfy `|m| <= N/2`).
    pub fn slot(&self, axis: usize, m: i64) -> usize {
        let n = self.dims[axis] as i64;
        debug_assert!(m.abs() <= n / 2, "mode {m} outside band for N={n}");
        m.rem_euclid(n) as usize
    }

    /// Wrap an arbitrary signed mode onto the grid band `(-N/2, N/2]`,
    /// i.e. the alias actually carried by the lattice.
    pub fn alias_mode(&self, axis: usize, m: i64) -> i64 {
        let n = self.dims[axis] as i64;
        let r = m.rem_euclid(n); // 0..n
        if r <= n / 2 {
            r
        } else {
            r - n
        }
    }

    /// Angular frequency of storage slot `k`: `2*pi*mode/L`.
    pub fn freq(&self, axis: usize, k: usize) -> f64 {
        2.0 * std::f64::consts::PI * self.mode(axis, k) as f64 / self.periods[axis]
    }

    /// Angular frequency of a signed integer mode vector.
    pub fn freq_of_mode(&self, axis: usize, m: i64) -> f64 {
        2.0 * std::f64::consts::PI * m as f64 / self.periods[axis]
    }

    /// Differentiation frequency: as [`freq`](Self::freq), except the Nyquist
    /// slot maps to zero so derivatives of real fields stay real.
    pub fn deriv_freq(&self, axis: usize, k: usize) -> f64 {
        let n = self.dims[axis];
        if k == n / 2 {
            0.0
        } else {
            self.freq(axis, k)
        }
    }

    /// Squared magnitude of the frequency vector at flat spectral index `idx`.
    pub fn freq_sq(&self, idx: usize) -> f64 {
        match self.ndim() {
            1 => {
                let f = self.freq(0, idx);
                f * f
            }
            2 => {
                let (i, j) = self.split2(idx);
                let f0 = self.freq(0, i);
                let f1 = self.freq(1, j);
                f0 * f0 + f1 * f1
            }
            _ => unreachable!(),
        }
    }

    /// Row-major flat index of 2-D node `(i, j)`.
    pub fn idx2(&self, i: usize, j: usize) -> usize {
        debug_assert_eq!(self.ndim(), 2);
        i * self.dims[1] + j
    }

    /// Inverse of [`idx2`](Self::idx2).
    pub fn split2(&self, idx: usize) -> (usize, usize) {
        debug_assert_eq!(self.ndim(), 2);
        (idx / self.dims[1], idx % self.dims[1])
    }

    /// Physical coordinates of the node at flat index `idx`.
    pub fn node(&self, idx: usize) -> Vec<f64> {
        match self.ndim() {
            1 => vec![self.coord(0, idx)],
            2 => {
                let (i, j) = self.split2(idx);
                vec![self.coord(0, i), self.coord(1, j)]
            }
            _ => unreachable!(),
        }
    }

    /// Centered-cell coordinates of the node at flat index `idx`.
    pub fn centered_node(&self, idx: usize) -> Vec<f64> {
        match self.ndim() {
            1 => vec![self.centered_coord(0, idx)],
            2 => {
                let (i, j) = self.split2(idx);
                vec![self.centered_coord(0, i), self.centered_coord(1, j)]
            }
            _ => unreachable!(),
        }
    }

    /// True if `other` describes the same lattice.
    pub fn same_as(&self, other: &TorusGrid) -> bool {
        self == other
    }
}

/// Fail with a [`CoreError::GridMismatch`] unless the two grids agree.
pub fn ensure_same_grid(a: &TorusGrid, b: &TorusGrid, context: &str) -> Result<()> {
    if a.same_as(b) {
        Ok(())
    } else {
        Err(CoreError::GridMismatch {
            context: format!("{context}: {:?}/{:?} vs {:?}/{:?}", a.dims, a.periods, b.dims, b.periods),
        })
    }
}
