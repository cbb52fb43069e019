//! Recovery of a spatially varying diffusion coefficient from point-source
//! response data at small Laplace parameters.
//!
//! The observable is `u~(x, p)`, the Laplace transform of the response to a
//! near-point initial mass, measured at receivers `x` for a ladder of small
//! `p > 0`. In two dimensions the free-medium response has the kernel
//! `K0(sqrt(p)|x-r|)/(2 pi)`, whose small-`p` expansion is a polynomial in
//! `ln p` with log-kernel coefficients. The pipeline:
//!
//! 1. `compute_g0` — quadrature of the expansion bracket against the source
//!    profile: the free-medium comparison profile `g0(x, p)`.
//! 2. `compute_h` — normalized deviation
//!    `h = (u~/ln p - g0) / [(p ln p / 4 pi^2)(1/2 + gamma/ln p)^2]`,
//!    which tends to a polynomial in `s = 1/(ln p + 2 gamma)` as `p -> 0`.
//! 3. `extract_h_coefficients` — least-squares fit `h = H0 + H1 s + H2 s^2`
//!    over the `p` ladder.
//! 4. `assemble_fredholm` — the `H2` coefficient is a bilinear log-kernel
//!    integral of `m(r) = 1 - 1/d(r)`; discretize it into a linear system
//!    `A m = H2` over reconstruction nodes.
//! 5. `solve_tikhonov` — regularized solve (first-kind log-kernel systems
//!    are ill-posed), then `d = 1/(1 - m)`.
//!
//! Geometry convention: everything is placed in the centered box
//! `[-L/2, L/2)^2` of a periodic grid that is large enough to act as a
//! free-space surrogate (the medium varies only inside a compact region
//! `omega`, sources and receivers sit outside it, and all distances are
//! Euclidean, not wrapped).

use std::f64::consts::{LN_2, PI};
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::field::Field;
use crate::grid::TorusGrid;
use crate::kernel::smooth_bump;
use crate::laplace::{laplace_transform, TailModel};
use crate::parallel::try_map_units;
use crate::special::{ln_cell_mean, EULER_GAMMA};

/// Relative residual above which a fitted receiver channel is flagged.
pub const DEFAULT_FIT_FLAG_TOL: f64 = 1e-2;

/// Smallest admissible magnitude of the `h` normalization denominator.
const MIN_DENOMINATOR: f64 = 1e-300;

/// Largest admissible Laplace parameter: the fit variable `1/(ln p + 2 gamma)`
/// must stay on the negative branch, which requires `p < exp(-2 gamma)`.
pub fn max_laplace_parameter() -> f64 {
    (-2.0 * EULER_GAMMA).exp()
}

/// Default ladder: 8 logarithmically spaced values from 1e-3 down to 1e-6.
pub fn default_p_ladder() -> Vec<f64> {
    let n = 8;
    (0..n)
        .map(|k| {
            let t = k as f64 / (n - 1) as f64;
            (1e-3f64.ln() * (1.0 - t) + 1e-6f64.ln() * t).exp()
        })
        .collect()
}

/// Check a Laplace-parameter ladder: finite, inside `(0, exp(-2 gamma))`,
/// strictly decreasing.
pub fn validate_p_ladder(p_values: &[f64]) -> Result<()> {
    if p_values.is_empty() {
        return Err(CoreError::InvalidParameter(
            "Laplace ladder is empty".into(),
        ));
    }
    let p_max = max_laplace_parameter();
    for &p in p_values {
        if !p.is_finite() || p <= 0.0 || p >= p_max {
            return Err(CoreError::InvalidParameter(format!(
                "Laplace parameter {p:e} outside (0, {p_max:.4})"
            )));
        }
    }
    for pair in p_values.windows(2) {
        if pair[1] >= pair[0] {
            return Err(CoreError::InvalidParameter(
                "Laplace ladder must be strictly decreasing".into(),
            ));
        }
    }
    Ok(())
}

/// Wrap raw node coordinates into the centered box `[-L/2, L/2)`.
fn centered(raw: &[f64], periods: &[f64]) -> [f64; 2] {
    let mut out = [0.0; 2];
    for k in 0..2 {
        let l = periods[k];
        out[k] = if raw[k] >= l / 2.0 { raw[k] - l } else { raw[k] };
    }
    out
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// `ln(r/2)` with the log singularity replaced by its exact average over a
/// quadrature cell of side `cell` whenever the points are closer than half a
/// cell. This keeps log-kernel quadratures finite and second-order accurate
/// at coincident nodes.
fn log_half_distance(r: f64, cell: f64) -> f64 {
    if r < cell / 2.0 {
        ln_cell_mean(cell) - LN_2
    } else {
        (r / 2.0).ln()
    }
}

fn require_2d(grid: &TorusGrid, context: &str) -> Result<()> {
    if grid.ndim() != 2 {
        return Err(CoreError::TwoDimensionalOnly {
            context: context.into(),
            ndim: grid.ndim(),
        });
    }
    Ok(())
}

fn require_point(point: &[f64], context: &str) -> Result<()> {
    if point.len() != 2 || point.iter().any(|c| !c.is_finite()) {
        return Err(CoreError::InvalidParameter(format!(
            "{context}: expected a finite 2D point, got {point:?}"
        )));
    }
    Ok(())
}

/// Effective square-cell side of a (near-square) 2D grid.
fn grid_cell(grid: &TorusGrid) -> f64 {
    (grid.spacing(0) * grid.spacing(1)).sqrt()
}

/// A normalized Gaussian of standard deviation `width`, truncated at
/// `8 * width` and scaled to unit discrete mass: the standard realization of
/// a near-point source on the quadrature grid.
pub fn gaussian_source(grid: &Arc<TorusGrid>, center: &[f64], width: f64) -> Result<Field> {
    require_2d(grid, "gaussian source")?;
    require_point(center, "gaussian source center")?;
    let max_spacing = (0..2).map(|k| grid.spacing(k)).fold(0.0, f64::max);
    if !width.is_finite() || width < max_spacing {
        return Err(CoreError::InvalidParameter(format!(
            "source width {width} is below one grid cell ({max_spacing}); the profile would be unresolved"
        )));
    }
    let periods = grid.periods().to_vec();
    let cutoff_sq = (8.0 * width) * (8.0 * width);
    let raw = Field::from_fn_real(grid, |x| {
        let c = centered(x, &periods);
        let dx = c[0] - center[0];
        let dy = c[1] - center[1];
        let r_sq = dx * dx + dy * dy;
        if r_sq > cutoff_sq {
            0.0
        } else {
            (-r_sq / (2.0 * width * width)).exp()
        }
    });
    let mass: f64 = raw.values().iter().map(|c| c.re).sum::<f64>() * grid.cell_volume();
    if mass <= 0.0 {
        return Err(CoreError::InvalidParameter(
            "source profile has no mass on the grid".into(),
        ));
    }
    Ok(raw.scaled((1.0 / mass).into()))
}

/// A compactly supported radial bump `amplitude * exp(1 - 1/(1 - (r/radius)^2))`
/// centered at `center` (centered-box coordinates), exactly zero outside.
pub fn radial_bump_field(
    grid: &Arc<TorusGrid>,
    center: &[f64],
    radius: f64,
    amplitude: f64,
) -> Result<Field> {
    require_2d(grid, "radial bump")?;
    require_point(center, "radial bump center")?;
    if !(radius > 0.0) || !radius.is_finite() || !amplitude.is_finite() {
        return Err(CoreError::InvalidParameter(
            "radial bump needs a positive finite radius and finite amplitude".into(),
        ));
    }
    let periods = grid.periods().to_vec();
    Ok(Field::from_fn_real(grid, |x| {
        let c = centered(x, &periods);
        amplitude * smooth_bump(dist2(&c, center) / radius)
    }))
}

/// Contrast function `m = 1 - 1/d` of a strictly positive diffusion field.
pub fn m_from_d(d: &Field) -> Result<Field> {
    if !d.is_real() {
        return Err(CoreError::InvalidParameter(
            "diffusion field must be real".into(),
        ));
    }
    if d.min_re() <= 0.0 {
        return Err(CoreError::InvalidParameter(format!(
            "diffusion field must be strictly positive (min {})",
            d.min_re()
        )));
    }
    Ok(d.map(|c| (1.0 - 1.0 / c.re).into()))
}

/// Free-medium comparison profile `g0(x, p)`: quadrature of the small-`p`
/// expansion bracket of the free kernel against the source profile `f1`,
///
/// ```text
/// g0 = -(1/2pi) * sum_r [ 1/2 + gamma/ln p + ln(|x-r|/2)/ln p
///                         + p |x-r|^2 / 8
///                         + (p/ln p) (|x-r|^2/4) ln(|x-r|/2)
///                         + (p/ln p) (gamma-1) |x-r|^2 / 4 ] f1(r) w
/// ```
///
/// A receiver closer than half a cell to a quadrature node uses the exact
/// cell average of the log factor instead of the (singular) point value.
pub fn compute_g0(f1: &Field, receiver: &[f64], p: f64) -> Result<f64> {
    let grid = f1.grid();
    require_2d(grid, "free-medium profile")?;
    require_point(receiver, "receiver")?;
    if !f1.is_real() {
        return Err(CoreError::InvalidParameter(
            "source profile must be real".into(),
        ));
    }
    if !p.is_finite() || p <= 0.0 || p >= 1.0 {
        return Err(CoreError::InvalidParameter(format!(
            "Laplace parameter {p:e} outside (0, 1)"
        )));
    }
    let cell = grid_cell(grid);
    let lnp = p.ln();
    let inv_lnp = 1.0 / lnp;
    let mut acc = 0.0;
    for (idx, value) in f1.values().iter().enumerate() {
        let f = value.re;
        if f == 0.0 {
            continue;
        }
        let node = grid.centered_node(idx);
        let r = dist2(receiver, &node);
        let lg = log_half_distance(r, cell);
        let r_sq = r * r;
        let bracket = 0.5
            + EULER_GAMMA * inv_lnp
            + lg * inv_lnp
            + r_sq / 8.0 * p
            + r_sq / 4.0 * p * inv_lnp * lg
            + (EULER_GAMMA - 1.0) * r_sq / 4.0 * p * inv_lnp;
        acc += bracket * f;
    }
    Ok(-acc * grid.cell_volume() / (2.0 * PI))
}

/// Normalized deviation of the measured transform from the free-medium
/// profile,
///
/// ```text
/// h = (u~/ln p - g0) / D(p),    D(p) = (p ln p / 4 pi^2)(1/2 + gamma/ln p)^2,
/// ```
///
/// computed as `(u~ - ln p * g0) / (ln p * D)` so that data assembled from
/// the same `g0` cancels exactly in a uniform medium.
pub fn compute_h(u_tilde: f64, g0: f64, p: f64) -> Result<f64> {
    let p_max = max_laplace_parameter();
    if !p.is_finite() || p <= 0.0 || p >= p_max {
        return Err(CoreError::InvalidParameter(format!(
            "Laplace parameter {p:e} outside (0, {p_max:.4})"
        )));
    }
    if !u_tilde.is_finite() || !g0.is_finite() {
        return Err(CoreError::InvalidParameter(
            "non-finite transform or comparison profile".into(),
        ));
    }
    let lnp = p.ln();
    let q = 0.5 + EULER_GAMMA / lnp;
    let d_p = p * lnp / (4.0 * PI * PI) * q * q;
    if d_p.abs() < MIN_DENOMINATOR {
        return Err(CoreError::InvalidParameter(format!(
            "h normalization denominator {:.3e} below {MIN_DENOMINATOR:e}",
            d_p
        )));
    }
    Ok((u_tilde - lnp * g0) / (lnp * d_p))
}

/// Laplace-domain data for one source: the transform, the free-medium
/// profile, and the normalized deviation, per ladder value and receiver.
#[derive(Clone, Debug, Serialize)]
pub struct LaplaceProfile {
    /// Strictly decreasing ladder in `(0, exp(-2 gamma))`.
    pub p_values: Vec<f64>,
    /// `u_tilde[k][i]`: transform at `p_values[k]`, receiver `i`.
    pub u_tilde: Vec<Vec<f64>>,
    /// Free-medium profile, same shape.
    pub g0: Vec<Vec<f64>>,
    /// Normalized deviation, same shape.
    pub h: Vec<Vec<f64>>,
}

impl LaplaceProfile {
    pub fn new(p_values: Vec<f64>, u_tilde: Vec<Vec<f64>>, g0: Vec<Vec<f64>>) -> Result<Self> {
        validate_p_ladder(&p_values)?;
        if u_tilde.len() != p_values.len() || g0.len() != p_values.len() {
            return Err(CoreError::InvalidParameter(format!(
                "profile rows ({} transforms, {} comparisons) do not match {} ladder values",
                u_tilde.len(),
                g0.len(),
                p_values.len()
            )));
        }
        let n_recv = u_tilde.first().map_or(0, Vec::len);
        if n_recv == 0 {
            return Err(CoreError::InvalidParameter(
                "profile has no receivers".into(),
            ));
        }
        let mut h = Vec::with_capacity(p_values.len());
        for (k, &p) in p_values.iter().enumerate() {
            if u_tilde[k].len() != n_recv || g0[k].len() != n_recv {
                return Err(CoreError::InvalidParameter(
                    "ragged receiver rows in Laplace profile".into(),
                ));
            }
            let mut row = Vec::with_capacity(n_recv);
            for i in 0..n_recv {
                row.push(compute_h(u_tilde[k][i], g0[k][i], p)?);
            }
            h.push(row);
        }
        Ok(LaplaceProfile {
            p_values,
            u_tilde,
            g0,
            h,
        })
    }

    pub fn n_receivers(&self) -> usize {
        self.u_tilde[0].len()
    }
}

/// Result of the small-`p` asymptotic fit, per data channel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AsymptoticCoefficients {
    pub h0: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    /// Coefficient of the `p` nuisance regressor (zero when not fitted).
    pub p_linear: Vec<f64>,
    /// Coefficient of the `p ln p` nuisance regressor (zero when not fitted).
    pub p_log: Vec<f64>,
    /// Relative fit residual per channel.
    pub residual: Vec<f64>,
    /// Channels whose residual exceeded the declared tolerance.
    pub flagged: Vec<bool>,
}

/// Least-squares fit `h(p) = H0 + H1 s + H2 s^2`, `s = 1/(ln p + 2 gamma)`,
/// per channel. `h[k][c]` is the value at ladder entry `k`, channel `c`.
/// Needs at least four ladder values; rejects ladders so clustered that the
/// design matrix is numerically rank-deficient.
///
/// The subtracted expansion is accurate to `o(p^0)` only: real data carries a
/// next-order remainder spanned by `p` and `p ln p`, and on a narrow ladder
/// those shapes are close enough to a quadratic in `s` that an unmodeled
/// remainder of size `eps` can bias `H2` by more than `100 eps`. When the
/// ladder affords the degrees of freedom (seven points for `p`, eight for
/// both), the fit therefore carries nuisance regressors that absorb the
/// remainder; their coefficients are reported for diagnostics and are not
/// used downstream.
pub fn extract_h_coefficients(
    h: &[Vec<f64>],
    p_values: &[f64],
    flag_tol: f64,
) -> Result<AsymptoticCoefficients> {
    validate_p_ladder(p_values)?;
    if p_values.len() < 4 {
        return Err(CoreError::InvalidParameter(format!(
            "asymptotic fit needs at least 4 ladder values, got {}",
            p_values.len()
        )));
    }
    if h.len() != p_values.len() {
        return Err(CoreError::InvalidParameter(format!(
            "{} data rows for {} ladder values",
            h.len(),
            p_values.len()
        )));
    }
    let n_channels = h.first().map_or(0, Vec::len);
    if n_channels == 0 || h.iter().any(|row| row.len() != n_channels) {
        return Err(CoreError::InvalidParameter(
            "fit data must be a non-empty rectangular array".into(),
        ));
    }
    if !(flag_tol > 0.0) {
        return Err(CoreError::InvalidParameter(
            "flag tolerance must be positive".into(),
        ));
    }

    let s: Vec<f64> = p_values
        .iter()
        .map(|&p| 1.0 / (p.ln() + 2.0 * EULER_GAMMA))
        .collect();
    let n_nuisance = p_values.len().saturating_sub(6).min(2);
    let design = DMatrix::from_fn(p_values.len(), 3 + n_nuisance, |r, c| match c {
        0 => 1.0,
        1 => s[r],
        2 => s[r] * s[r],
        3 => p_values[r],
        _ => p_values[r] * p_values[r].ln(),
    });
    let svd = SVD::new(design.clone(), true, true);
    let sv_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let sv_min = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if !(sv_min > 1e-12 * sv_max) {
        return Err(CoreError::DegenerateFit(format!(
            "Laplace ladder too clustered for a quadratic fit (singular values {sv_min:.3e}..{sv_max:.3e})"
        )));
    }

    let mut out = AsymptoticCoefficients {
        h0: Vec::with_capacity(n_channels),
        h1: Vec::with_capacity(n_channels),
        h2: Vec::with_capacity(n_channels),
        p_linear: Vec::with_capacity(n_channels),
        p_log: Vec::with_capacity(n_channels),
        residual: Vec::with_capacity(n_channels),
        flagged: Vec::with_capacity(n_channels),
    };
    for c in 0..n_channels {
        let y = DVector::from_fn(p_values.len(), |r, _| h[r][c]);
        let beta = svd
            .solve(&y, 0.0)
            .map_err(|e| CoreError::DegenerateFit(e.to_string()))?;
        let residual = (&design * &beta - &y).norm();
        let scale = y.norm().max(f64::MIN_POSITIVE);
        let rel = residual / scale;
        out.h0.push(beta[0]);
        out.h1.push(beta[1]);
        out.h2.push(beta[2]);
        out.p_linear.push(if n_nuisance >= 1 { beta[3] } else { 0.0 });
        out.p_log.push(if n_nuisance >= 2 { beta[4] } else { 0.0 });
        out.residual.push(rel);
        out.flagged.push(rel > flag_tol);
    }
    Ok(out)
}

/// Discretized bilinear log-kernel system `A m = H2`.
///
/// Rows are (receiver, source) pairs in receiver-major order: row
/// `i * n_sources + j` couples receiver `x_i` with source `q_j`, and
/// `A[row, k] = 4 ln(|x_i - r_k|/2) ln(|r_k - q_j|/2) w_k` over
/// reconstruction nodes `r_k` with quadrature weights `w_k`. Distances
/// below half a node cell use the exact cell average of the log.
#[derive(Clone, Debug)]
pub struct FredholmSystem {
    pub receivers: Vec<Vec<f64>>,
    pub sources: Vec<Vec<f64>>,
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Side of a reconstruction-node cell.
    pub cell: f64,
    pub matrix: DMatrix<f64>,
    /// Discrete gradient over node adjacencies (smoothing operator).
    pub gradient: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

impl FredholmSystem {
    /// Build a system from an explicit matrix (the kernel-quadrature path is
    /// [`assemble_fredholm`]). Validates shapes and builds the node-adjacency
    /// gradient.
    pub fn with_matrix(
        receivers: Vec<Vec<f64>>,
        sources: Vec<Vec<f64>>,
        nodes: Vec<Vec<f64>>,
        weights: Vec<f64>,
        cell: f64,
        matrix: DMatrix<f64>,
        rhs: Vec<f64>,
    ) -> Result<Self> {
        if receivers.is_empty() || sources.is_empty() || nodes.is_empty() {
            return Err(CoreError::InvalidParameter(
                "system needs at least one receiver, source, and node".into(),
            ));
        }
        for point in receivers.iter().chain(&sources).chain(&nodes) {
            require_point(point, "system geometry")?;
        }
        if weights.len() != nodes.len() {
            return Err(CoreError::InvalidParameter(format!(
                "{} weights for {} nodes",
                weights.len(),
                nodes.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(CoreError::InvalidParameter(
                "node weights must be positive and finite".into(),
            ));
        }
        if !(cell > 0.0) || !cell.is_finite() {
            return Err(CoreError::InvalidParameter(
                "node cell size must be positive".into(),
            ));
        }
        let n_rows = receivers.len() * sources.len();
        if matrix.nrows() != n_rows || matrix.ncols() != nodes.len() {
            return Err(CoreError::InvalidParameter(format!(
                "matrix is {}x{}, expected {}x{}",
                matrix.nrows(),
                matrix.ncols(),
                n_rows,
                nodes.len()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidParameter(
                "system matrix has non-finite entries".into(),
            ));
        }
        if rhs.len() != n_rows {
            return Err(CoreError::InvalidParameter(format!(
                "{} right-hand-side entries for {} (receiver, source) pairs",
                rhs.len(),
                n_rows
            )));
        }
        if rhs.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidParameter(
                "right-hand side has non-finite entries".into(),
            ));
        }

        // Discrete gradient: one row per adjacent node pair.
        let mut pairs = Vec::new();
        for k in 0..nodes.len() {
            for l in (k + 1)..nodes.len() {
                if dist2(&nodes[k], &nodes[l]) <= 1.3 * cell {
                    pairs.push((k, l));
                }
            }
        }
        let mut gradient = DMatrix::zeros(pairs.len(), nodes.len());
        for (row, &(k, l)) in pairs.iter().enumerate() {
            gradient[(row, k)] = 1.0 / cell;
            gradient[(row, l)] = -1.0 / cell;
        }

        Ok(FredholmSystem {
            receivers,
            sources,
            nodes,
            weights,
            cell,
            matrix,
            gradient,
            rhs: DVector::from_vec(rhs),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.receivers.len() * self.sources.len()
    }
}

/// Assemble the bilinear log-kernel quadrature matrix and pair it with the
/// fitted `H2` values (receiver-major channel order).
pub fn assemble_fredholm(
    receivers: &[Vec<f64>],
    sources: &[Vec<f64>],
    nodes: &[Vec<f64>],
    weights: &[f64],
    cell: f64,
    rhs: &[f64],
) -> Result<FredholmSystem> {
    if weights.len() != nodes.len() {
        return Err(CoreError::InvalidParameter(format!(
            "{} weights for {} nodes",
            weights.len(),
            nodes.len()
        )));
    }
    let n_rows = receivers.len() * sources.len();
    let mut matrix = DMatrix::zeros(n_rows, nodes.len());
    for (i, x) in receivers.iter().enumerate() {
        for (j, q) in sources.iter().enumerate() {
            let row = i * sources.len() + j;
            for (k, r) in nodes.iter().enumerate() {
                let lg_recv = log_half_distance(dist2(x, r), cell);
                let lg_src = log_half_distance(dist2(r, q), cell);
                matrix[(row, k)] = 4.0 * lg_recv * lg_src * weights[k];
            }
        }
    }
    FredholmSystem::with_matrix(
        receivers.to_vec(),
        sources.to_vec(),
        nodes.to_vec(),
        weights.to_vec(),
        cell,
        matrix,
        rhs.to_vec(),
    )
}

/// One point of the regularization sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlphaSample {
    pub alpha: f64,
    pub residual_norm: f64,
    pub solution_norm: f64,
    pub penalty_norm: f64,
}

/// Regularized solution with its sweep diagnostics.
#[derive(Clone, Debug, Serialize)]
pub struct TikhonovSolution {
    /// The regularization weight actually used.
    pub alpha: f64,
    /// Recovered contrast `m = 1 - 1/d` per node.
    pub m: Vec<f64>,
    /// Recovered diffusion `d = 1/(1 - m)` per node.
    pub d: Vec<f64>,
    pub residual_norm: f64,
    /// `|A m - rhs| / |rhs|` (zero when the right-hand side vanishes).
    pub relative_residual: f64,
    pub sweep: Vec<AlphaSample>,
}

fn solve_at(
    ata: &DMatrix<f64>,
    ltl: &DMatrix<f64>,
    atb: &DVector<f64>,
    alpha: f64,
) -> Result<DVector<f64>> {
    let normal = ata + ltl * alpha;
    let chol = Cholesky::new(normal).ok_or_else(|| {
        CoreError::DegenerateFit(format!(
            "regularized normal matrix is not positive definite at alpha {alpha:e}"
        ))
    })?;
    Ok(chol.solve(atb))
}

/// Index of the corner of the L-curve (log residual vs log penalty), by
/// maximum discrete curvature; midpoint when the curve is degenerate.
fn l_curve_corner(samples: &[AlphaSample]) -> usize {
    if samples.len() < 3 {
        return 0;
    }
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .map(|s| {
            (
                s.residual_norm.max(1e-300).ln(),
                s.penalty_norm.max(1e-300).ln(),
            )
        })
        .collect();
    let mut best = (0.0, samples.len() / 2);
    for i in 1..pts.len() - 1 {
        let (ax, ay) = pts[i - 1];
        let (bx, by) = pts[i];
        let (cx, cy) = pts[i + 1];
        let area2 = ((bx - ax) * (cy - ay) - (by - ay) * (cx - ax)).abs();
        let la = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt();
        let lb = ((cx - bx).powi(2) + (cy - by).powi(2)).sqrt();
        let lc = ((cx - ax).powi(2) + (cy - ay).powi(2)).sqrt();
        let denom = la * lb * lc;
        if denom > 0.0 {
            let kappa = 2.0 * area2 / denom;
            if kappa.is_finite() && kappa > best.0 {
                best = (kappa, i);
            }
        }
    }
    best.1
}

/// Minimize `|A m - rhs|^2 + alpha |L m|^2` over the sweep `alphas`
/// (ascending), pick the L-curve corner unless `alpha_override` is given,
/// and convert to `d = 1/(1 - m)`. A recovered contrast `m >= 1` anywhere is
/// reported as non-physical diffusion. When the node set has no adjacent
/// pairs the penalty falls back to the identity.
pub fn solve_tikhonov(
    system: &FredholmSystem,
    alphas: &[f64],
    alpha_override: Option<f64>,
) -> Result<TikhonovSolution> {
    if alphas.is_empty() {
        return Err(CoreError::InvalidParameter(
            "regularization sweep is empty".into(),
        ));
    }
    if alphas.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
        return Err(CoreError::InvalidParameter(
            "regularization weights must be positive and finite".into(),
        ));
    }
    if let Some(a) = alpha_override {
        if !(a > 0.0) || !a.is_finite() {
            return Err(CoreError::InvalidParameter(
                "regularization override must be positive and finite".into(),
            ));
        }
    }
    let mut sorted: Vec<f64> = alphas.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite alphas"));
    sorted.dedup();

    let a = &system.matrix;
    let n = system.nodes.len();
    let ata = a.tr_mul(a);
    let ltl = if system.gradient.nrows() == 0 {
        DMatrix::identity(n, n)
    } else {
        system.gradient.tr_mul(&system.gradient)
    };
    let atb = a.tr_mul(&system.rhs);

    let mut sweep = Vec::with_capacity(sorted.len());
    let mut solutions = Vec::with_capacity(sorted.len());
    for &alpha in &sorted {
        let m = solve_at(&ata, &ltl, &atb, alpha)?;
        sweep.push(AlphaSample {
            alpha,
            residual_norm: (a * &m - &system.rhs).norm(),
            solution_norm: m.norm(),
            penalty_norm: if system.gradient.nrows() == 0 {
                m.norm()
            } else {
                (&system.gradient * &m).norm()
            },
        });
        solutions.push(m);
    }

    let (alpha, m) = match alpha_override {
        Some(alpha) => (alpha, solve_at(&ata, &ltl, &atb, alpha)?),
        None => {
            let idx = l_curve_corner(&sweep);
            (sweep[idx].alpha, solutions[idx].clone())
        }
    };

    let bad: Vec<usize> = (0..n).filter(|&k| m[k] >= 1.0).collect();
    if !bad.is_empty() {
        return Err(CoreError::NonPhysicalDiffusion {
            count: bad.len(),
            total: n,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    let d: Vec<f64> = (0..n).map(|k| 1.0 / (1.0 - m[k])).collect();
    let residual_norm = (a * &m - &system.rhs).norm();
    let rhs_norm = system.rhs.norm();
    let relative_residual = if rhs_norm > 0.0 {
        residual_norm / rhs_norm
    } else {
        0.0
    };
    Ok(TikhonovSolution {
        alpha,
        m: m.iter().cloned().collect(),
        d,
        residual_norm,
        relative_residual,
        sweep,
    })
}

/// Placement of everything the reconstruction needs: the quadrature grid
/// (a large centered box treated as free space), receivers and sources
/// outside the reconstruction region, and the reconstruction nodes with
/// their quadrature weights.
#[derive(Clone, Debug)]
pub struct DiffusionGeometry {
    pub grid: Arc<TorusGrid>,
    /// Receiver positions (centered-box coordinates).
    pub receivers: Vec<Vec<f64>>,
    /// Source centers (centered-box coordinates).
    pub sources: Vec<Vec<f64>>,
    /// Standard deviation of the near-point source profiles.
    pub source_width: f64,
    /// Reconstruction nodes covering the region where the medium may vary.
    pub nodes: Vec<Vec<f64>>,
    pub node_weights: Vec<f64>,
    /// Side of a reconstruction-node cell.
    pub node_cell: f64,
}

impl DiffusionGeometry {
    /// Reference setup: a 256x256 box of side 8 (cell 1/32), 16 receivers on
    /// a ring of radius 1.8, 12 sources on a ring of radius 1.6, and a 24x24
    /// reconstruction lattice over `[-1, 1]^2`. The medium is assumed
    /// uniform outside `[-1, 1]^2`, so sources and receivers sit in the
    /// uniform annulus.
    pub fn standard() -> Result<Self> {
        let grid = TorusGrid::square(256, 8.0)?;
        let receivers = ring(16, 1.8, 0.5);
        let sources = ring(12, 1.6, 0.25);
        let n_nodes = 24;
        let node_cell = 2.0 / n_nodes as f64;
        let mut nodes = Vec::with_capacity(n_nodes * n_nodes);
        for iy in 0..n_nodes {
            for ix in 0..n_nodes {
                nodes.push(vec![
                    -1.0 + (ix as f64 + 0.5) * node_cell,
                    -1.0 + (iy as f64 + 0.5) * node_cell,
                ]);
            }
        }
        let node_weights = vec![node_cell * node_cell; nodes.len()];
        let source_width = 2.0 * grid.spacing(0);
        let geometry = DiffusionGeometry {
            grid,
            receivers,
            sources,
            source_width,
            nodes,
            node_weights,
            node_cell,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn validate(&self) -> Result<()> {
        require_2d(&self.grid, "reconstruction geometry")?;
        let (sx, sy) = (self.grid.spacing(0), self.grid.spacing(1));
        if (sx - sy).abs() > 1e-12 * sx {
            return Err(CoreError::InvalidParameter(
                "reconstruction geometry needs square grid cells".into(),
            ));
        }
        if self.receivers.is_empty() || self.sources.is_empty() || self.nodes.is_empty() {
            return Err(CoreError::InvalidParameter(
                "geometry needs at least one receiver, source, and node".into(),
            ));
        }
        let half = [self.grid.periods()[0] / 2.0, self.grid.periods()[1] / 2.0];
        for point in self
            .receivers
            .iter()
            .chain(&self.sources)
            .chain(&self.nodes)
        {
            require_point(point, "geometry point")?;
            if point[0].abs() > half[0] || point[1].abs() > half[1] {
                return Err(CoreError::InvalidParameter(format!(
                    "point {point:?} lies outside the centered box"
                )));
            }
        }
        if !self.source_width.is_finite() || self.source_width < sx {
            return Err(CoreError::InvalidParameter(format!(
                "source width {} is below one grid cell {sx}",
                self.source_width
            )));
        }
        if self.node_weights.len() != self.nodes.len()
            || self.node_weights.iter().any(|&w| !(w > 0.0))
        {
            return Err(CoreError::InvalidParameter(
                "node weights must be positive, one per node".into(),
            ));
        }
        if !(self.node_cell > 0.0) {
            return Err(CoreError::InvalidParameter(
                "node cell must be positive".into(),
            ));
        }
        for point in self.receivers.iter().chain(&self.sources) {
            for node in &self.nodes {
                if dist2(point, node) < 1e-9 {
                    return Err(CoreError::InvalidParameter(format!(
                        "receiver/source {point:?} coincides with a reconstruction node"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The realized profile of source `j`.
    pub fn source_field(&self, j: usize) -> Result<Field> {
        let center = self.sources.get(j).ok_or_else(|| {
            CoreError::InvalidParameter(format!("source index {j} out of range"))
        })?;
        gaussian_source(&self.grid, center, self.source_width)
    }
}

fn ring(count: usize, radius: f64, phase: f64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|k| {
            let angle = 2.0 * PI * (k as f64 + phase) / count as f64;
            vec![radius * angle.cos(), radius * angle.sin()]
        })
        .collect()
}

/// Laplace-domain measurements: `u_tilde[species][source][p][receiver]`.
#[derive(Clone, Debug)]
pub struct DiffusionMeasurements {
    pub n_species: usize,
    /// Strictly decreasing ladder shared by all species and sources.
    pub p_values: Vec<f64>,
    pub u_tilde: Vec<Vec<Vec<Vec<f64>>>>,
}

impl DiffusionMeasurements {
    /// Transform uniformly sampled time series into ladder measurements.
    /// `series[species][source][receiver]` are samples at `k * dt`.
    pub fn from_time_series(
        series: &[Vec<Vec<Vec<f64>>>],
        dt: f64,
        p_values: Vec<f64>,
        tail: TailModel,
    ) -> Result<Self> {
        validate_p_ladder(&p_values)?;
        if series.is_empty() {
            return Err(CoreError::InvalidParameter("no species data".into()));
        }
        let mut u_tilde = Vec::with_capacity(series.len());
        for per_species in series {
            let mut per_source = Vec::with_capacity(per_species.len());
            for receivers in per_species {
                let mut rows: Vec<Vec<f64>> = vec![Vec::with_capacity(receivers.len()); p_values.len()];
                for samples in receivers {
                    for (k, &p) in p_values.iter().enumerate() {
                        rows[k].push(laplace_transform(samples, dt, p, tail)?);
                    }
                }
                per_source.push(rows);
            }
            u_tilde.push(per_source);
        }
        Ok(DiffusionMeasurements {
            n_species: series.len(),
            p_values,
            u_tilde,
        })
    }

    fn validate_against(&self, geometry: &DiffusionGeometry) -> Result<()> {
        validate_p_ladder(&self.p_values)?;
        if self.u_tilde.len() != self.n_species {
            return Err(CoreError::InvalidParameter(format!(
                "{} data blocks for {} species",
                self.u_tilde.len(),
                self.n_species
            )));
        }
        for block in &self.u_tilde {
            if block.len() != geometry.sources.len() {
                return Err(CoreError::InvalidParameter(format!(
                    "{} source blocks for {} sources",
                    block.len(),
                    geometry.sources.len()
                )));
            }
            for rows in block {
                if rows.len() != self.p_values.len()
                    || rows.iter().any(|r| r.len() != geometry.receivers.len())
                {
                    return Err(CoreError::InvalidParameter(
                        "measurement block shape does not match ladder/receivers".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Synthesize Laplace-domain measurements for media with contrasts
/// `m_fields` (one per species, on the geometry's grid, vanishing near all
/// sources).
///
/// The free part is assembled from the same expansion bracket the pipeline
/// compares against (`ln p * g0`), and the scattering series uses the pure
/// log kernel `-(ln p / 2 + gamma + ln(|y|/2)) / 2 pi` to second order in
/// the contrast:
///
/// ```text
/// u~ = ln p * g0 + p G[m (psi0 + p G[m psi0])],   psi0 = G[f1],
/// ```
///
/// a consistent small-`p` discretization of the scattering equation
/// `u~ = G f1 + p G[m u~]`. Terms dropped relative to the exact kernel are
/// `O(p^2 ln p)` in `u~`, below the retained second-order scattering term.
pub fn synthesize_laplace_measurements(
    geometry: &DiffusionGeometry,
    m_fields: &[Field],
    p_values: &[f64],
) -> Result<DiffusionMeasurements> {
    geometry.validate()?;
    validate_p_ladder(p_values)?;
    if m_fields.is_empty() {
        return Err(CoreError::InvalidParameter("no contrast fields".into()));
    }
    let grid = &geometry.grid;
    let cell = grid_cell(grid);
    let w = grid.cell_volume();
    let inv_2pi = 1.0 / (2.0 * PI);

    let mut u_tilde = Vec::with_capacity(m_fields.len());
    for m_field in m_fields {
        if !m_field.is_real() {
            return Err(CoreError::InvalidParameter(
                "contrast field must be real".into(),
            ));
        }
        if !m_field.grid().same_as(grid) {
            return Err(CoreError::GridMismatch {
                context: "contrast field vs reconstruction geometry".into(),
            });
        }
        // Support of the contrast, as (position, m * w) pairs.
        let mut supp_pos: Vec<[f64; 2]> = Vec::new();
        let mut supp_mw: Vec<f64> = Vec::new();
        for (idx, value) in m_field.values().iter().enumerate() {
            let m = value.re;
            if m == 0.0 {
                continue;
            }
            if !(m < 1.0) {
                return Err(CoreError::InvalidParameter(format!(
                    "contrast must stay below 1, found {m}"
                )));
            }
            let node = grid.centered_node(idx);
            supp_pos.push([node[0], node[1]]);
            supp_mw.push(m * w);
        }
        for q in &geometry.sources {
            for pos in &supp_pos {
                if dist2(pos, q) < 4.0 * geometry.source_width {
                    return Err(CoreError::InvalidParameter(
                        "a source overlaps the varying-diffusion region; place sources in the uniform annulus".into(),
                    ));
                }
            }
        }

        let n_s = supp_pos.len();
        // Pairwise log kernel over the support (the diagonal uses the exact
        // cell average), built once and reused for every source and p.
        let k_ln: Vec<f64> = if n_s == 0 {
            Vec::new()
        } else {
            let mut k_ln = vec![0.0; n_s * n_s];
            for a in 0..n_s {
                for b in 0..n_s {
                    k_ln[a * n_s + b] = log_half_distance(dist2(&supp_pos[a], &supp_pos[b]), cell);
                }
            }
            k_ln
        };
        let r_ln: Vec<Vec<f64>> = geometry
            .receivers
            .iter()
            .map(|x| {
                supp_pos
                    .iter()
                    .map(|rp| log_half_distance(dist2(x, rp), cell))
                    .collect()
            })
            .collect();

        let source_indices: Vec<usize> = (0..geometry.sources.len()).collect();
        let per_source: Vec<Vec<Vec<f64>>> = try_map_units(source_indices, |j| -> Result<Vec<Vec<f64>>> {
            let f1 = geometry.source_field(j)?;
            // Support of the source profile, and its log moments on the
            // contrast support: c0 = sum f1 w, c1[a] = sum ln(|r_a-s|/2) f1 w.
            let mut c0 = 0.0;
            let mut f1_pos: Vec<[f64; 2]> = Vec::new();
            let mut f1_w: Vec<f64> = Vec::new();
            for (idx, value) in f1.values().iter().enumerate() {
                let f = value.re;
                if f == 0.0 {
                    continue;
                }
                let node = grid.centered_node(idx);
                f1_pos.push([node[0], node[1]]);
                f1_w.push(f * w);
                c0 += f * w;
            }
            let c1: Vec<f64> = supp_pos
                .iter()
                .map(|rp| {
                    f1_pos
                        .iter()
                        .zip(&f1_w)
                        .map(|(s, fw)| log_half_distance(dist2(rp, s), cell) * fw)
                        .sum()
                })
                .collect();

            let mut rows = Vec::with_capacity(p_values.len());
            for &p in p_values {
                let lnp = p.ln();
                let lambda = 0.5 * lnp + EULER_GAMMA;
                let mut row = Vec::with_capacity(geometry.receivers.len());
                if n_s == 0 {
                    for x in &geometry.receivers {
                        row.push(lnp * compute_g0(&f1, x, p)?);
                    }
                } else {
                    let psi0: Vec<f64> = (0..n_s)
                        .map(|a| -(lambda * c0 + c1[a]) * inv_2pi)
                        .collect();
                    let s0: f64 = (0..n_s).map(|a| supp_mw[a] * psi0[a]).sum();
                    let psi1: Vec<f64> = (0..n_s)
                        .map(|a| {
                            let t1: f64 = (0..n_s)
                                .map(|b| k_ln[a * n_s + b] * supp_mw[b] * psi0[b])
                                .sum();
                            psi0[a] + p * (-(lambda * s0 + t1) * inv_2pi)
                        })
                        .collect();
                    let s1: f64 = (0..n_s).map(|a| supp_mw[a] * psi1[a]).sum();
                    for (i, x) in geometry.receivers.iter().enumerate() {
                        let t2: f64 = (0..n_s)
                            .map(|a| r_ln[i][a] * supp_mw[a] * psi1[a])
                            .sum();
                        let scattered = -p * (lambda * s1 + t2) * inv_2pi;
                        row.push(lnp * compute_g0(&f1, x, p)? + scattered);
                    }
                }
                rows.push(row);
            }
            Ok(rows)
        })?;
        u_tilde.push(per_source);
    }
    Ok(DiffusionMeasurements {
        n_species: m_fields.len(),
        p_values: p_values.to_vec(),
        u_tilde,
    })
}

/// Tuning knobs of the reconstruction pipeline.
#[derive(Clone, Debug)]
pub struct DiffusionConfig {
    /// Regularization sweep (ascending order is not required; it is sorted).
    pub alphas: Vec<f64>,
    /// Bypass the L-curve corner with an explicit weight.
    pub alpha_override: Option<f64>,
    /// Fit-residual tolerance above which a channel is flagged.
    pub fit_flag_tol: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        let alphas = (0..11).map(|k| 10f64.powi(k - 12)).collect();
        DiffusionConfig {
            alphas,
            alpha_override: None,
            fit_flag_tol: DEFAULT_FIT_FLAG_TOL,
        }
    }
}

/// Per-species reconstruction output. The recovery of species `i` reads only
/// the data block of species `i`; `species` records that provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpeciesDiffusionReport {
    /// Index of the species whose data produced this reconstruction.
    pub species: usize,
    pub coefficients: AsymptoticCoefficients,
    pub alpha: f64,
    pub sweep: Vec<AlphaSample>,
    /// Recovered contrast per reconstruction node.
    pub m: Vec<f64>,
    /// Recovered diffusion per reconstruction node.
    pub d: Vec<f64>,
    /// `|A m - H2| / |H2|` at the selected regularization.
    pub forward_residual: f64,
    pub max_fit_residual: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffusionReport {
    pub p_values: Vec<f64>,
    pub species: Vec<SpeciesDiffusionReport>,
}

/// Full reconstruction: per species, compare the measured transforms against
/// the free-medium profile, fit the small-`p` asymptotics, assemble the
/// log-kernel system, and solve it with Tikhonov regularization.
///
/// The identification argument behind the `H2` equation is specific to
/// systems of exactly two species; other counts are rejected.
pub fn invert_diffusion(
    geometry: &DiffusionGeometry,
    measurements: &DiffusionMeasurements,
    config: &DiffusionConfig,
) -> Result<DiffusionReport> {
    geometry.validate()?;
    measurements.validate_against(geometry)?;
    if measurements.n_species != 2 {
        return Err(CoreError::InvalidParameter(format!(
            "diffusion recovery is established for exactly two species, got {}",
            measurements.n_species
        )));
    }
    if !(config.fit_flag_tol > 0.0) {
        return Err(CoreError::InvalidParameter(
            "fit flag tolerance must be positive".into(),
        ));
    }

    let n_recv = geometry.receivers.len();
    let n_src = geometry.sources.len();
    let n_p = measurements.p_values.len();

    let mut species_reports = Vec::with_capacity(measurements.n_species);
    for (species, block) in measurements.u_tilde.iter().enumerate() {
        // Free-medium profiles per source, then per-source normalized
        // deviations.
        let source_indices: Vec<usize> = (0..n_src).collect();
        let profiles: Vec<LaplaceProfile> = try_map_units(source_indices, |j| -> Result<LaplaceProfile> {
            let f1 = geometry.source_field(j)?;
            let mut g0 = Vec::with_capacity(n_p);
            for &p in &measurements.p_values {
                let mut row = Vec::with_capacity(n_recv);
                for x in &geometry.receivers {
                    row.push(compute_g0(&f1, x, p)?);
                }
                g0.push(row);
            }
            LaplaceProfile::new(measurements.p_values.clone(), block[j].clone(), g0)
        })?;

        // Channel layout must match the system rows: receiver-major.
        let mut h = vec![vec![0.0; n_recv * n_src]; n_p];
        for (j, profile) in profiles.iter().enumerate() {
            for k in 0..n_p {
                for i in 0..n_recv {
                    h[k][i * n_src + j] = profile.h[k][i];
                }
            }
        }
        let coefficients =
            extract_h_coefficients(&h, &measurements.p_values, config.fit_flag_tol)?;
        let system = assemble_fredholm(
            &geometry.receivers,
            &geometry.sources,
            &geometry.nodes,
            &geometry.node_weights,
            geometry.node_cell,
            &coefficients.h2,
        )?;
        let solution = solve_tikhonov(&system, &config.alphas, config.alpha_override)?;
        let max_fit_residual = coefficients
            .residual
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        species_reports.push(SpeciesDiffusionReport {
            species,
            coefficients,
            alpha: solution.alpha,
            sweep: solution.sweep.clone(),
            m: solution.m.clone(),
            d: solution.d.clone(),
            forward_residual: solution.relative_residual,
            max_fit_residual,
        });
    }
    Ok(DiffusionReport {
        p_values: measurements.p_values.clone(),
        species: species_reports,
    })
}
