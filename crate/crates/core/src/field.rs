//! Scalar fields on a torus grid and their spectral calculus.
//!
//! A [`Field`] stores node values (complex storage, with a realness flag for
//! the common real case); a [`Spectrum`] stores trigonometric-polynomial
//! coefficients on the matching frequency lattice, so that
//!
//! ```text
//! f(x) = sum_xi  coeff(xi) * exp(i xi . x),      xi = 2 pi k / L
//! ```
//!
//! With this convention the coefficient at `xi = 0` is the mean of the field,
//! periodic convolution becomes `volume * coeff_k * coeff_u` slot by slot,
//! and Parseval reads `cell_volume * sum |f|^2 = volume * sum |coeff|^2`.
//!
//! Derivatives multiply coefficients by `i xi`; the Nyquist slot is treated
//! as frequency zero during differentiation so derivatives of real fields
//! stay real. [`laplacian`] uses the same convention and therefore equals
//! `divergence(gradient(.))` exactly; the diffusion propagator in
//! [`crate::heat`] instead damps every mode including Nyquist.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{CoreError, Result};
use crate::grid::{ensure_same_grid, TorusGrid};

/// Relative bound under which imaginary parts count as zero for realness.
pub const REALNESS_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// FFT plan cache
// ---------------------------------------------------------------------------

type PlanMap = HashMap<(usize, bool), Arc<dyn Fft<f64>>>;

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    static PLANS: OnceLock<Mutex<PlanMap>> = OnceLock::new();
    let plans = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = plans.lock().expect("fft plan cache poisoned");
    map.entry((len, inverse))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if inverse {
                planner.plan_fft_inverse(len)
            } else {
                planner.plan_fft_forward(len)
            }
        })
        .clone()
}

/// In-place unnormalized transform along both axes of a row-major buffer.
fn fft_nd(grid: &TorusGrid, buf: &mut [Complex64], inverse: bool) {
    match grid.ndim() {
        1 => plan(grid.dims()[0], inverse).process(buf),
        2 => {
            let (n0, n1) = (grid.dims()[0], grid.dims()[1]);
            // Rows are contiguous: one batched call.
            plan(n1, inverse).process(buf);
            // Columns: transpose, batch, transpose back.
            let mut t = vec![Complex64::default(); buf.len()];
            for i in 0..n0 {
                for j in 0..n1 {
                    t[j * n0 + i] = buf[i * n1 + j];
                }
            }
            plan(n0, inverse).process(&mut t);
            for j in 0..n1 {
                for i in 0..n0 {
                    buf[i * n1 + j] = t[j * n0 + i];
                }
            }
        }
        _ => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// Field
// ---------------------------------------------------------------------------

/// Node values of a scalar function on a [`TorusGrid`].
#[derive(Debug, Clone)]
pub struct Field {
    grid: Arc<TorusGrid>,
    values: Vec<Complex64>,
    is_real: bool,
}

impl Field {
    pub fn zeros(grid: &Arc<TorusGrid>) -> Self {
        Field {
            grid: grid.clone(),
            values: vec![Complex64::default(); grid.len()],
            is_real: true,
        }
    }

    pub fn constant(grid: &Arc<TorusGrid>, c: f64) -> Self {
        Field {
            grid: grid.clone(),
            values: vec![Complex64::new(c, 0.0); grid.len()],
            is_real: true,
        }
    }

    /// Sample a real-valued function of the physical coordinates.
    pub fn from_fn_real(grid: &Arc<TorusGrid>, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|idx| Complex64::new(f(&grid.node(idx)), 0.0))
            .collect();
        Field {
            grid: grid.clone(),
            values,
            is_real: true,
        }
    }

    /// Sample a complex-valued function of the physical coordinates.
    pub fn from_fn(grid: &Arc<TorusGrid>, f: impl Fn(&[f64]) -> Complex64) -> Self {
        let values = (0..grid.len()).map(|idx| f(&grid.node(idx))).collect();
        let mut out = Field {
            grid: grid.clone(),
            values,
            is_real: false,
        };
        out.refresh_realness();
        out
    }

    pub fn from_values(grid: &Arc<TorusGrid>, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(CoreError::InvalidParameter(format!(
                "value buffer has {} entries for a grid of {}",
                values.len(),
                grid.len()
            )));
        }
        let mut out = Field {
            grid: grid.clone(),
            values,
            is_real: false,
        };
        out.refresh_realness();
        Ok(out)
    }

    pub fn from_real_values(grid: &Arc<TorusGrid>, values: &[f64]) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(CoreError::InvalidParameter(format!(
                "value buffer has {} entries for a grid of {}",
                values.len(),
                grid.len()
            )));
        }
        Ok(Field {
            grid: grid.clone(),
            values: values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
            is_real: true,
        })
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    /// Whether imaginary parts are negligible relative to the field scale.
    pub fn is_real(&self) -> bool {
        self.is_real
    }

    /// Re-derive the realness flag from the stored values.
    pub fn refresh_realness(&mut self) {
        let scale = self
            .values
            .iter()
            .map(|c| c.norm_sqr())
            .fold(0.0_f64, f64::max)
            .sqrt();
        let max_im = self
            .values
            .iter()
            .map(|c| c.im.abs())
            .fold(0.0_f64, f64::max);
        self.is_real = max_im <= REALNESS_TOL * scale.max(f64::MIN_POSITIVE);
    }

    /// Apply `f` to every value (realness flag re-derived).
    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        let mut out = Field {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&c| f(c)).collect(),
            is_real: false,
        };
        out.refresh_realness();
        out
    }

    /// `self += s * other`, in place.
    pub fn axpy(&mut self, s: Complex64, other: &Field) {
        debug_assert!(self.grid.same_as(&other.grid));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
        self.is_real = self.is_real && other.is_real && s.im == 0.0;
    }

    pub fn scaled(&self, s: Complex64) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= s;
        }
        out.is_real = self.is_real && s.im == 0.0;
        out
    }

    pub fn add(&self, other: &Field) -> Result<Self> {
        ensure_same_grid(&self.grid, &other.grid, "field add")?;
        let mut out = self.clone();
        out.axpy(Complex64::new(1.0, 0.0), other);
        Ok(out)
    }

    pub fn sub(&self, other: &Field) -> Result<Self> {
        ensure_same_grid(&self.grid, &other.grid, "field sub")?;
        let mut out = self.clone();
        out.axpy(Complex64::new(-1.0, 0.0), other);
        Ok(out)
    }

    /// Pointwise product (used to assemble nonlinear fluxes).
    pub fn mul_pointwise(&self, other: &Field) -> Result<Self> {
        ensure_same_grid(&self.grid, &other.grid, "pointwise product")?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Field {
            grid: self.grid.clone(),
            values,
            is_real: self.is_real && other.is_real,
        })
    }

    /// Largest absolute value over nodes.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Quadrature-weighted L2 norm: `sqrt(cell_volume * sum |f|^2)`.
    pub fn l2_norm(&self) -> f64 {
        (self.grid.cell_volume()
            * self
                .values
                .iter()
                .map(|c| c.norm_sqr())
                .sum::<f64>())
        .sqrt()
    }

    /// Smallest real part over nodes (positivity checks).
    pub fn min_re(&self) -> f64 {
        self.values.iter().map(|c| c.re).fold(f64::INFINITY, f64::min)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Mutable access for builders that maintain the realness flag themselves.
    pub(crate) fn values_mut(&mut self) -> &mut Vec<Complex64> {
        &mut self.values
    }

    pub(crate) fn set_realness(&mut self, is_real: bool) {
        self.is_real = is_real;
    }
}

/// `||a - b||_2 / ||b||_2` (quadrature-weighted).
pub fn rel_l2_error(a: &Field, b: &Field) -> Result<f64> {
    let diff = a.sub(b)?;
    let denom = b.l2_norm();
    if denom == 0.0 {
        return Ok(diff.l2_norm());
    }
    Ok(diff.l2_norm() / denom)
}

// ---------------------------------------------------------------------------
// Spectrum
// ---------------------------------------------------------------------------

/// Trigonometric-polynomial coefficients of a field, on the wrapped
/// frequency lattice of the same grid.
#[derive(Debug, Clone)]
pub struct Spectrum {
    grid: Arc<TorusGrid>,
    coeffs: Vec<Complex64>,
}

impl Spectrum {
    pub fn zeros(grid: &Arc<TorusGrid>) -> Self {
        Spectrum {
            grid: grid.clone(),
            coeffs: vec![Complex64::default(); grid.len()],
        }
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        &self.grid
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    /// Coefficient of the signed integer mode vector `m` (`|m_a| <= N_a/2`).
    pub fn coeff(&self, m: &[i64]) -> Complex64 {
        self.coeffs[self.flat_slot(m)]
    }

    pub fn coeff_mut(&mut self, m: &[i64]) -> &mut Complex64 {
        let s = self.flat_slot(m);
        &mut self.coeffs[s]
    }

    fn flat_slot(&self, m: &[i64]) -> usize {
        debug_assert_eq!(m.len(), self.grid.ndim());
        match self.grid.ndim() {
            1 => self.grid.slot(0, m[0]),
            2 => self
                .grid
                .idx2(self.grid.slot(0, m[0]), self.grid.slot(1, m[1])),
            _ => unreachable!(),
        }
    }

    /// Multiply every coefficient by a per-slot factor.
    pub fn scale_slots(&mut self, factor: impl Fn(usize) -> Complex64) {
        for (idx, c) in self.coeffs.iter_mut().enumerate() {
            *c *= factor(idx);
        }
    }

    /// Largest coefficient magnitude.
    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Transforms
// ---------------------------------------------------------------------------

/// Forward transform: field values to trig-polynomial coefficients.
pub fn dft_forward(f: &Field) -> Spectrum {
    let mut buf = f.values().to_vec();
    fft_nd(&f.grid(), &mut buf, false);
    let scale = 1.0 / f.grid().len() as f64;
    for c in &mut buf {
        *c *= scale;
    }
    Spectrum {
        grid: f.grid().clone(),
        coeffs: buf,
    }
}

/// Inverse transform: coefficients back to node values.
pub fn dft_inverse(s: &Spectrum) -> Field {
    let mut buf = s.coeffs.clone();
    fft_nd(&s.grid, &mut buf, true);
    let mut out = Field {
        grid: s.grid.clone(),
        values: buf,
        is_real: false,
    };
    out.refresh_realness();
    out
}

impl Field {
    pub fn to_spectrum(&self) -> Spectrum {
        dft_forward(self)
    }
}

impl Spectrum {
    pub fn to_field(&self) -> Field {
        dft_inverse(self)
    }
}

// ---------------------------------------------------------------------------
// Calculus
// ---------------------------------------------------------------------------

/// Periodic convolution `(k * u)(x) = integral k(x - y) u(y) dy`, computed
/// spectrally: coefficient-wise product times the domain volume.
pub fn convolve(k: &Field, u: &Field) -> Result<Field> {
    ensure_same_grid(k.grid(), u.grid(), "convolve")?;
    let ks = dft_forward(k);
    let us = dft_forward(u);
    let vol = k.grid().volume();
    let mut out = Spectrum::zeros(k.grid());
    for ((o, a), b) in out.coeffs.iter_mut().zip(&ks.coeffs).zip(&us.coeffs) {
        *o = vol * a * b;
    }
    let mut f = dft_inverse(&out);
    // Exact realness propagates; the data-driven flag can only tighten it.
    if k.is_real() && u.is_real() {
        f.set_realness(true);
    }
    Ok(f)
}

/// Spectral gradient; one field per axis. Nyquist slots differentiate to 0.
pub fn gradient(f: &Field) -> Vec<Field> {
    let s = dft_forward(f);
    let grid = f.grid().clone();
    (0..grid.ndim())
        .map(|axis| {
            let mut ds = s.clone();
            match grid.ndim() {
                1 => {
                    for (k, c) in ds.coeffs.iter_mut().enumerate() {
                        *c *= Complex64::new(0.0, grid.deriv_freq(0, k));
                    }
                }
                2 => {
                    for (idx, c) in ds.coeffs.iter_mut().enumerate() {
                        let (i, j) = grid.split2(idx);
                        let xi = match axis {
                            0 => grid.deriv_freq(0, i),
                            _ => grid.deriv_freq(1, j),
                        };
                        *c *= Complex64::new(0.0, xi);
                    }
                }
                _ => unreachable!(),
            }
            let mut g = dft_inverse(&ds);
            if f.is_real() {
                g.set_realness(true);
            }
            g
        })
        .collect()
}

/// Spectral divergence of a vector field given per-axis components.
pub fn divergence(components: &[Field]) -> Result<Field> {
    if components.is_empty() {
        return Err(CoreError::InvalidParameter(
            "divergence of empty component list".into(),
        ));
    }
    let grid = components[0].grid().clone();
    if components.len() != grid.ndim() {
        return Err(CoreError::InvalidParameter(format!(
            "divergence expects {} components, got {}",
            grid.ndim(),
            components.len()
        )));
    }
    let mut acc = Spectrum::zeros(&grid);
    let mut all_real = true;
    for (axis, comp) in components.iter().enumerate() {
        ensure_same_grid(&grid, comp.grid(), "divergence")?;
        all_real = all_real && comp.is_real();
        let s = dft_forward(comp);
        match grid.ndim() {
            1 => {
                for (k, (a, c)) in acc.coeffs.iter_mut().zip(&s.coeffs).enumerate() {
                    *a += Complex64::new(0.0, grid.deriv_freq(0, k)) * c;
                }
            }
            2 => {
                for (idx, (a, c)) in acc.coeffs.iter_mut().zip(&s.coeffs).enumerate() {
                    let (i, j) = grid.split2(idx);
                    let xi = match axis {
                        0 => grid.deriv_freq(0, i),
                        _ => grid.deriv_freq(1, j),
                    };
                    *a += Complex64::new(0.0, xi) * c;
                }
            }
            _ => unreachable!(),
        }
    }
    let mut f = dft_inverse(&acc);
    if all_real {
        f.set_realness(true);
    }
    Ok(f)
}

/// Spectral Laplacian with the differentiation convention, so that
/// `laplacian(f) == divergence(gradient(f))` exactly.
pub fn laplacian(f: &Field) -> Field {
    let mut s = dft_forward(f);
    let grid = f.grid().clone();
    match grid.ndim() {
        1 => {
            for (k, c) in s.coeffs.iter_mut().enumerate() {
                let xi = grid.deriv_freq(0, k);
                *c *= -xi * xi;
            }
        }
        2 => {
            for (idx, c) in s.coeffs.iter_mut().enumerate() {
                let (i, j) = grid.split2(idx);
                let (a, b) = (grid.deriv_freq(0, i), grid.deriv_freq(1, j));
                *c *= -(a * a + b * b);
            }
        }
        _ => unreachable!(),
    }
    let mut g = dft_inverse(&s);
    if f.is_real() {
        g.set_realness(true);
    }
    g
}

/// Total mass: quadrature of the field over the torus.
pub fn mass(f: &Field) -> Complex64 {
    f.values.iter().sum::<Complex64>() * f.grid.cell_volume()
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
