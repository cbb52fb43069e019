//! Probe design for kernel and coupling recovery.
//!
//! A probe seeds the linear variation systems with per-species patterns whose
//! spectrum sits on a single frequency magnitude, so the first variation
//! evolves as a pure exponential `e^{lambda t} A(x)` and the second variation
//! is driven by sources at a handful of known frequencies. Each coupling
//! entry `(i, j)` then answers at its own "read" frequency — the sum of the
//! two species' probe modes — and a schedule is valid when every read
//! frequency is untouched by the other entries sourcing the same species.
//!
//! Patterns are real (`cos`), which keeps every solver real-valued; the
//! complex kernel information is read off the complex Fourier coefficient at
//! the response frequency.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::field::Field;
use crate::grid::TorusGrid;
use crate::params::{Coupling, ModelParams};

/// First-order pattern planted in one species.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProbePattern {
    /// The constant function `1`; stationary under the heat flow.
    ConstantOne,
    /// `cos(xi_m . x)` for the integer lattice mode `m`; decays at
    /// `exp(-d |xi_m|^2 t)`.
    PlaneWave { mode: Vec<i64> },
}

impl ProbePattern {
    /// Shape checks against a grid: plane-wave modes must have one component
    /// per axis, lie within the representable band, and be nonzero.
    pub fn validate(&self, grid: &TorusGrid) -> Result<()> {
        match self {
            ProbePattern::ConstantOne => Ok(()),
            ProbePattern::PlaneWave { mode } => {
                if mode.len() != grid.ndim() {
                    return Err(CoreError::InvalidParameter(format!(
                        "plane-wave mode {:?} has {} components for a {}-d grid",
                        mode,
                        mode.len(),
                        grid.ndim()
                    )));
                }
                for (axis, &m) in mode.iter().enumerate() {
                    let nyquist = grid.dims()[axis] as i64 / 2;
                    if m.abs() > nyquist {
                        return Err(CoreError::InvalidParameter(format!(
                            "plane-wave mode {m} on axis {axis} exceeds the Nyquist mode {nyquist}"
                        )));
                    }
                }
                if mode.iter().all(|&m| m == 0) {
                    return Err(CoreError::InvalidParameter(
                        "plane-wave probes need a nonzero lattice frequency".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// The probe field itself.
    pub fn realize(&self, grid: &Arc<TorusGrid>) -> Field {
        match self {
            ProbePattern::ConstantOne => Field::constant(grid, 1.0),
            ProbePattern::PlaneWave { mode } => {
                let freqs: Vec<f64> = mode
                    .iter()
                    .enumerate()
                    .map(|(axis, &m)| grid.freq_of_mode(axis, m))
                    .collect();
                Field::from_fn_real(grid, move |coords| {
                    let phase: f64 = coords.iter().zip(&freqs).map(|(x, f)| x * f).sum();
                    phase.cos()
                })
            }
        }
    }

    /// Signed-mode coefficient table of the realized pattern: `1` at the
    /// origin for the constant, `1/2` at `±m` for a cosine (collapsing to a
    /// single coefficient `1` when `±m` alias to the same slot, i.e. on the
    /// Nyquist lines).
    pub fn mode_table(&self, grid: &TorusGrid) -> Vec<(Vec<i64>, f64)> {
        match self {
            ProbePattern::ConstantOne => vec![(vec![0; grid.ndim()], 1.0)],
            ProbePattern::PlaneWave { mode } => {
                let plus: Vec<i64> = mode
                    .iter()
                    .enumerate()
                    .map(|(axis, &m)| grid.alias_mode(axis, m))
                    .collect();
                let minus: Vec<i64> = mode
                    .iter()
                    .enumerate()
                    .map(|(axis, &m)| grid.alias_mode(axis, -m))
                    .collect();
                if plus == minus {
                    vec![(plus, 1.0)]
                } else {
                    vec![(plus, 0.5), (minus, 0.5)]
                }
            }
        }
    }

    /// Squared frequency magnitude shared by every mode of the pattern; this
    /// is the quantity the heat semigroup sees.
    pub fn freq_sq(&self, grid: &TorusGrid) -> f64 {
        match self {
            ProbePattern::ConstantOne => 0.0,
            ProbePattern::PlaneWave { mode } => mode
                .iter()
                .enumerate()
                .map(|(axis, &m)| {
                    let f = grid.freq_of_mode(axis, m);
                    f * f
                })
                .sum(),
        }
    }

    /// The spec'd mode vector (zeros for the constant pattern).
    fn mode_or_zero(&self, ndim: usize) -> Vec<i64> {
        match self {
            ProbePattern::ConstantOne => vec![0; ndim],
            ProbePattern::PlaneWave { mode } => mode.clone(),
        }
    }
}

impl fmt::Display for ProbePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbePattern::ConstantOne => write!(f, "constant_one"),
            ProbePattern::PlaneWave { mode } => write!(f, "plane_wave{mode:?}"),
        }
    }
}

/// A probe: one or two active species, each carrying a pattern.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeSpec {
    entries: Vec<(usize, ProbePattern)>,
}

impl ProbeSpec {
    pub fn single(species: usize, pattern: ProbePattern) -> Self {
        ProbeSpec {
            entries: vec![(species, pattern)],
        }
    }

    pub fn pair(
        species_a: usize,
        pattern_a: ProbePattern,
        species_b: usize,
        pattern_b: ProbePattern,
    ) -> Self {
        ProbeSpec {
            entries: vec![(species_a, pattern_a), (species_b, pattern_b)],
        }
    }

    pub fn entries(&self) -> &[(usize, ProbePattern)] {
        &self.entries
    }

    /// Active species indices, in entry order.
    pub fn species(&self) -> Vec<usize> {
        self.entries.iter().map(|(s, _)| *s).collect()
    }

    pub fn pattern_for(&self, species: usize) -> Option<&ProbePattern> {
        self.entries
            .iter()
            .find(|(s, _)| *s == species)
            .map(|(_, p)| p)
    }

    /// Validate against the model: one or two distinct species in range,
    /// patterns representable on the grid, and constant patterns only for
    /// the vector-kernel drift coupling (a constant probe of the
    /// gradient-potential model produces no drift at any order, so it can
    /// never be read back).
    pub fn validate(&self, params: &ModelParams, grid: &TorusGrid) -> Result<()> {
        if self.entries.is_empty() || self.entries.len() > 2 {
            return Err(CoreError::InvalidParameter(format!(
                "a probe activates one or two species, got {}",
                self.entries.len()
            )));
        }
        if self.entries.len() == 2 && self.entries[0].0 == self.entries[1].0 {
            return Err(CoreError::InvalidParameter(format!(
                "pair probe lists species {} twice",
                self.entries[0].0
            )));
        }
        for (species, pattern) in &self.entries {
            if *species >= params.n_species {
                return Err(CoreError::InvalidParameter(format!(
                    "probe species {species} out of range for {} species",
                    params.n_species
                )));
            }
            pattern.validate(grid)?;
            if matches!(pattern, ProbePattern::ConstantOne)
                && matches!(params.coupling, Coupling::GradientPotentials { .. })
            {
                return Err(CoreError::InvalidParameter(
                    "constant_one probes apply only to the vector-kernel drift model".into(),
                ));
            }
        }
        Ok(())
    }

    /// Decay rate `lambda = -d |xi|^2` of the active species' first
    /// variation (zero for inactive species, which stay identically zero).
    pub fn rate(&self, species: usize, d: f64, grid: &TorusGrid) -> f64 {
        self.pattern_for(species)
            .map_or(0.0, |p| -d * p.freq_sq(grid))
    }

    /// Realize the probe as one field per species (zeros for inactive).
    pub fn realize(&self, grid: &Arc<TorusGrid>, n_species: usize) -> Vec<Field> {
        (0..n_species)
            .map(|s| match self.pattern_for(s) {
                Some(pattern) => pattern.realize(grid),
                None => Field::zeros(grid),
            })
            .collect()
    }

    /// Read frequency of coupling entry `(row, col)` under this probe: the
    /// aliased sum of the two species' spec'd modes. `None` when either
    /// species is inactive.
    pub fn read_mode(&self, row: usize, col: usize, grid: &TorusGrid) -> Option<Vec<i64>> {
        let a = self.pattern_for(row)?.mode_or_zero(grid.ndim());
        let b = self.pattern_for(col)?.mode_or_zero(grid.ndim());
        Some(
            a.iter()
                .zip(&b)
                .enumerate()
                .map(|(axis, (&p, &q))| grid.alias_mode(axis, p + q))
                .collect(),
        )
    }

    /// All frequencies at which entry `(row, col)` sources species `row`:
    /// the aliased sums over both patterns' mode tables, minus the origin
    /// (killed by the outer divergence).
    pub fn source_modes(&self, row: usize, col: usize, grid: &TorusGrid) -> HashSet<Vec<i64>> {
        let mut out = HashSet::new();
        let (Some(pa), Some(pb)) = (self.pattern_for(row), self.pattern_for(col)) else {
            return out;
        };
        for (ma, _) in pa.mode_table(grid) {
            for (mb, _) in pb.mode_table(grid) {
                let sum: Vec<i64> = ma
                    .iter()
                    .zip(&mb)
                    .enumerate()
                    .map(|(axis, (&p, &q))| grid.alias_mode(axis, p + q))
                    .collect();
                if sum.iter().any(|&m| m != 0) {
                    out.insert(sum);
                }
            }
        }
        out
    }

    /// Human-readable provenance tag for reports.
    pub fn label(&self) -> String {
        let parts: Vec<String> = self
            .entries
            .iter()
            .map(|(s, p)| format!("species {s}: {p}"))
            .collect();
        parts.join("; ")
    }
}

/// Whether the read frequency of entry `(row, col)` is usable and isolated:
/// nonzero, carrying a nonzero differentiation frequency, and untouched by
/// the sources of every other entry `(row, d)` feeding the same species.
/// Entries whose read lands at the origin (both patterns constant) are
/// exempt — their information channel is the constant pattern itself, not a
/// Fourier read.
pub fn check_read_isolation(probe: &ProbeSpec, row: usize, col: usize, grid: &TorusGrid) -> Result<()> {
    let read = probe.read_mode(row, col, grid).ok_or_else(|| {
        CoreError::InvalidParameter(format!(
            "probe [{}] does not activate entry ({row}, {col})",
            probe.label()
        ))
    })?;
    if read.iter().all(|&m| m == 0) {
        return Ok(()); // constant-pattern channel; nothing to isolate
    }
    let degenerate = read
        .iter()
        .enumerate()
        .all(|(axis, &m)| grid.deriv_freq(axis, grid.slot(axis, m)) == 0.0);
    if degenerate {
        return Err(CoreError::InvalidParameter(format!(
            "read frequency {read:?} of entry ({row}, {col}) carries no differentiation \
             frequency; the response divergence vanishes there"
        )));
    }
    for other in probe.species() {
        if other == col {
            continue;
        }
        if probe.source_modes(row, other, grid).contains(&read) {
            return Err(CoreError::InvalidParameter(format!(
                "probe [{}]: read frequency {read:?} of entry ({row}, {col}) collides with \
                 sources of entry ({row}, {other})",
                probe.label()
            )));
        }
    }
    Ok(())
}

/// Validate every read the matrix recovery will take from a schedule: each
/// single-species probe is read on its diagonal, each pair probe on both
/// off-diagonal entries.
pub fn check_schedule(schedule: &[ProbeSpec], grid: &TorusGrid) -> Result<()> {
    for probe in schedule {
        let species = probe.species();
        match species.as_slice() {
            [s] => check_read_isolation(probe, *s, *s, grid)?,
            [a, b] => {
                check_read_isolation(probe, *a, *b, grid)?;
                check_read_isolation(probe, *b, *a, grid)?;
            }
            _ => {
                return Err(CoreError::InvalidParameter(format!(
                    "schedule holds a probe with {} active species",
                    species.len()
                )))
            }
        }
    }
    Ok(())
}

/// Default schedule for recovering a full `N x N` coupling matrix: one
/// single-species plane wave per diagonal entry and one pair probe per
/// unordered off-diagonal pair, with frequencies chosen so every read is
/// isolated.
pub fn matrix_schedule(n_species: usize, grid: &TorusGrid) -> Result<Vec<ProbeSpec>> {
    if n_species == 0 {
        return Err(CoreError::InvalidParameter(
            "matrix schedule needs at least one species".into(),
        ));
    }
    let ndim = grid.ndim();
    let axis_mode = |axis: usize, value: i64| -> Vec<i64> {
        let mut m = vec![0; ndim];
        m[axis] = value;
        m
    };
    let mut schedule = Vec::new();
    for i in 0..n_species {
        schedule.push(ProbeSpec::single(
            i,
            ProbePattern::PlaneWave {
                mode: axis_mode(0, 1),
            },
        ));
    }
    for i in 0..n_species {
        for j in (i + 1)..n_species {
            let (ma, mb) = if ndim >= 2 {
                (axis_mode(0, 1), axis_mode(1, 1))
            } else {
                (axis_mode(0, 1), axis_mode(0, 4))
            };
            schedule.push(ProbeSpec::pair(
                i,
                ProbePattern::PlaneWave { mode: ma },
                j,
                ProbePattern::PlaneWave { mode: mb },
            ));
        }
    }
    check_schedule(&schedule, grid)?;
    Ok(schedule)
}

/// Largest per-axis mode magnitude a kernel sweep should visit by default:
/// two modes below Nyquist, so the quadratic response `alias(2m)` of every
/// visited mode stays meaningfully representable.
pub fn default_sweep_cutoff(grid: &TorusGrid) -> i64 {
    let nyquist = grid.dims().iter().copied().min().unwrap_or(2) as i64 / 2;
    (nyquist - 2).max(1)
}

/// One probe per lattice frequency for recovering the scalar kernel of entry
/// `(row, col)`: canonical representatives of `±m` with `0 < |m|_inf <=
/// cutoff`. Diagonal entries use single-species probes read at `alias(2m)`;
/// off-diagonal entries pair the target mode in species `col` with a small
/// auxiliary mode in species `row`. Frequencies whose read would be
/// degenerate or collide are skipped — they surface as gaps in the recovered
/// table. Returns `(target mode, probe)` pairs.
pub fn kernel_sweep_schedule(
    row: usize,
    col: usize,
    grid: &TorusGrid,
    cutoff: i64,
) -> Result<Vec<(Vec<i64>, ProbeSpec)>> {
    if cutoff < 1 {
        return Err(CoreError::InvalidParameter(format!(
            "sweep cutoff must be at least 1, got {cutoff}"
        )));
    }
    for (axis, &n) in grid.dims().iter().enumerate() {
        if cutoff > n as i64 / 2 {
            return Err(CoreError::InvalidParameter(format!(
                "sweep cutoff {cutoff} exceeds the Nyquist mode {} on axis {axis}",
                n as i64 / 2
            )));
        }
    }
    let ndim = grid.ndim();
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for mode in canonical_modes(ndim, cutoff) {
        // A cutoff at the Nyquist mode makes ±Nyquist components alias to
        // the same grid slot; keep one probe per slot.
        if !seen.insert(alias_canonical(grid, &mode).0) {
            continue;
        }
        let probe = if row == col {
            ProbeSpec::single(row, ProbePattern::PlaneWave { mode: mode.clone() })
        } else {
            let Some(aux) = auxiliary_mode(&mode, grid, cutoff) else {
                continue;
            };
            ProbeSpec::pair(
                row,
                ProbePattern::PlaneWave { mode: aux },
                col,
                ProbePattern::PlaneWave { mode: mode.clone() },
            )
        };
        if check_read_isolation(&probe, row, col, grid).is_ok() {
            out.push((mode, probe));
        }
    }
    Ok(out)
}

/// Canonical slot representative of an (aliased) mode: components wrapped
/// into the grid's mode range, then the whole vector negated if its first
/// nonzero component is negative. Returns the representative and whether
/// the sign was flipped (a flipped mode's coefficient is the conjugate).
pub fn alias_canonical(grid: &TorusGrid, mode: &[i64]) -> (Vec<i64>, bool) {
    let aliased: Vec<i64> = mode
        .iter()
        .enumerate()
        .map(|(axis, &m)| grid.alias_mode(axis, m))
        .collect();
    let flip = match aliased.iter().find(|&&m| m != 0) {
        Some(&first) => first < 0,
        None => false,
    };
    if flip {
        let negated: Vec<i64> = aliased
            .iter()
            .enumerate()
            .map(|(axis, &m)| grid.alias_mode(axis, -m))
            .collect();
        (negated, true)
    } else {
        (aliased, false)
    }
}

/// Canonical half-lattice: one representative per `±m` pair (the first
/// nonzero component positive), excluding the origin.
pub fn canonical_modes(ndim: usize, cutoff: i64) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    let mut current = vec![-cutoff; ndim];
    'outer: loop {
        let canonical = match current.iter().find(|&&m| m != 0) {
            Some(&first) => first > 0,
            None => false, // origin
        };
        if canonical {
            out.push(current.clone());
        }
        for axis in (0..ndim).rev() {
            if current[axis] < cutoff {
                current[axis] += 1;
                continue 'outer;
            }
            current[axis] = -cutoff;
        }
        break;
    }
    out
}

/// A small mode for the auxiliary species of an off-diagonal sweep probe:
/// the first candidate distinct from the target frequency whose read
/// `alias(aux + m)` is isolated and carries a usable differentiation
/// frequency aligned with the target.
fn auxiliary_mode(target: &[i64], grid: &TorusGrid, cutoff: i64) -> Option<Vec<i64>> {
    let ndim = grid.ndim();
    let mut candidates: Vec<Vec<i64>> = Vec::new();
    for axis in 0..ndim {
        for value in [1i64, 2, 3] {
            let mut m = vec![0; ndim];
            m[axis] = value;
            candidates.push(m);
        }
    }
    if ndim >= 2 {
        let mut diag = vec![0; ndim];
        diag[0] = 1;
        diag[1] = 1;
        candidates.push(diag);
    }
    candidates.retain(|m| m.iter().enumerate().all(|(axis, &v)| v.abs() <= grid.dims()[axis] as i64 / 2));
    let _ = cutoff;
    for aux in candidates {
        let aliased_target: Vec<i64> = target
            .iter()
            .enumerate()
            .map(|(axis, &m)| grid.alias_mode(axis, m))
            .collect();
        if aux == aliased_target {
            continue;
        }
        // The response amplitude carries xi_read . xi_target; reject
        // auxiliaries that make it vanish.
        let read: Vec<i64> = aux
            .iter()
            .zip(target)
            .enumerate()
            .map(|(axis, (&a, &t))| grid.alias_mode(axis, a + t))
            .collect();
        let dot: f64 = read
            .iter()
            .zip(target)
            .enumerate()
            .map(|(axis, (&r, &t))| {
                grid.deriv_freq(axis, grid.slot(axis, r)) * grid.freq_of_mode(axis, t)
            })
            .sum();
        if dot == 0.0 {
            continue;
        }
        return Some(aux);
    }
    None
}

/// Time horizon for one probe: long enough to accumulate signal, short
/// enough that the fastest read rate has not fully flattened the response.
pub fn probe_horizon(max_abs_rate: f64, base: f64) -> f64 {
    if max_abs_rate <= 1e-9 {
        base
    } else {
        base.min(2.0 / max_abs_rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelSpec;
    use approx::assert_relative_eq;
    use std::f64::consts::TAU;

    fn drift_params(n: usize) -> ModelParams {
        let spec = KernelSpec::CompactRadialVector {
            amplitude: 1.0,
            radius: 0.2,
        };
        ModelParams::drift_kernels(
            &vec![0.5; n],
            vec![vec![0.1; n]; n],
            vec![vec![spec; n]; n],
        )
    }

    fn potential_params(n: usize) -> ModelParams {
        let spec = KernelSpec::GaussianBump {
            amplitude: 1.0,
            width: 0.1,
        };
        ModelParams::gradient_potentials(
            &vec![0.5; n],
            vec![vec![0.1; n]; n],
            vec![vec![spec; n]; n],
        )
    }

    #[test]
    fn plane_wave_realizes_as_cosine_with_half_coefficients() {
        let grid = TorusGrid::unit_square(32).unwrap();
        let pattern = ProbePattern::PlaneWave { mode: vec![2, -1] };
        let field = pattern.realize(&grid);
        for flat in 0..grid.len() {
            let x = grid.node(flat);
            let expected = (TAU * (2.0 * x[0] - x[1])).cos();
            assert_relative_eq!(field.values()[flat].re, expected, epsilon = 1e-12);
        }
        let spectrum = field.to_spectrum();
        assert_relative_eq!(spectrum.coeff(&[2, -1]).re, 0.5, max_relative = 1e-12);
        assert_relative_eq!(spectrum.coeff(&[-2, 1]).re, 0.5, max_relative = 1e-12);
        let table = pattern.mode_table(&grid);
        assert_eq!(table.len(), 2);
        assert!(table.contains(&(vec![2, -1], 0.5)));
        assert!(table.contains(&(vec![-2, 1], 0.5)));
    }

    #[test]
    fn nyquist_pattern_collapses_to_one_coefficient() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let pattern = ProbePattern::PlaneWave { mode: vec![8, 0] };
        let table = pattern.mode_table(&grid);
        assert_eq!(table, vec![(vec![8, 0], 1.0)]);
        let spectrum = pattern.realize(&grid).to_spectrum();
        assert_relative_eq!(spectrum.coeff(&[8, 0]).re, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn pattern_validation_rejects_bad_modes() {
        let grid = TorusGrid::unit_square(16).unwrap();
        assert!(ProbePattern::PlaneWave { mode: vec![0, 0] }
            .validate(&grid)
            .is_err());
        assert!(ProbePattern::PlaneWave { mode: vec![1] }.validate(&grid).is_err());
        assert!(ProbePattern::PlaneWave { mode: vec![9, 0] }
            .validate(&grid)
            .is_err());
        assert!(ProbePattern::PlaneWave { mode: vec![3, -2] }
            .validate(&grid)
            .is_ok());
        assert!(ProbePattern::ConstantOne.validate(&grid).is_ok());
    }

    #[test]
    fn rates_follow_the_heat_semigroup() {
        let grid = TorusGrid::unit_square(32).unwrap();
        let probe = ProbeSpec::single(0, ProbePattern::PlaneWave { mode: vec![1, 2] });
        let d = 0.7;
        let expected = -d * TAU * TAU * 5.0;
        assert_relative_eq!(probe.rate(0, d, &grid), expected, max_relative = 1e-12);
        assert_eq!(probe.rate(1, d, &grid), 0.0);
        let constant = ProbeSpec::single(0, ProbePattern::ConstantOne);
        assert_eq!(constant.rate(0, d, &grid), 0.0);
    }

    #[test]
    fn probe_validation_enforces_species_and_model_rules() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let wave = ProbePattern::PlaneWave { mode: vec![1, 0] };
        let dup = ProbeSpec::pair(1, wave.clone(), 1, wave.clone());
        assert!(dup.validate(&drift_params(2), &grid).is_err());
        let out_of_range = ProbeSpec::single(2, wave.clone());
        assert!(out_of_range.validate(&drift_params(2), &grid).is_err());

        let constant = ProbeSpec::single(0, ProbePattern::ConstantOne);
        assert!(constant.validate(&drift_params(2), &grid).is_ok());
        assert!(constant.validate(&potential_params(2), &grid).is_err());
    }

    #[test]
    fn realize_fills_inactive_species_with_zeros() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let probe = ProbeSpec::pair(
            0,
            ProbePattern::PlaneWave { mode: vec![1, 0] },
            2,
            ProbePattern::ConstantOne,
        );
        let fields = probe.realize(&grid, 3);
        assert_eq!(fields.len(), 3);
        assert!(fields[0].max_abs() > 0.9);
        assert_eq!(fields[1].max_abs(), 0.0);
        assert_relative_eq!(fields[2].values()[5].re, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn read_modes_alias_the_sum_of_probe_modes() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let probe = ProbeSpec::pair(
            0,
            ProbePattern::PlaneWave { mode: vec![1, 0] },
            1,
            ProbePattern::PlaneWave { mode: vec![0, 1] },
        );
        assert_eq!(probe.read_mode(0, 0, &grid), Some(vec![2, 0]));
        assert_eq!(probe.read_mode(0, 1, &grid), Some(vec![1, 1]));
        assert_eq!(probe.read_mode(1, 0, &grid), Some(vec![1, 1]));
        assert_eq!(probe.read_mode(0, 2, &grid), None);

        // Beyond-band sums wrap onto the lattice.
        let high = ProbeSpec::single(0, ProbePattern::PlaneWave { mode: vec![7, 0] });
        assert_eq!(high.read_mode(0, 0, &grid), Some(vec![-2, 0]));
    }

    #[test]
    fn source_modes_cover_all_sign_combinations() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let probe = ProbeSpec::pair(
            0,
            ProbePattern::PlaneWave { mode: vec![1, 0] },
            1,
            ProbePattern::PlaneWave { mode: vec![0, 2] },
        );
        let sources = probe.source_modes(0, 1, &grid);
        let expected: HashSet<Vec<i64>> = [
            vec![1, 2],
            vec![1, -2],
            vec![-1, 2],
            vec![-1, -2],
        ]
        .into_iter()
        .collect();
        assert_eq!(sources, expected);

        // Diagonal sources drop the origin (divergence of a constant).
        let diag = probe.source_modes(0, 0, &grid);
        let expected: HashSet<Vec<i64>> = [vec![2, 0], vec![-2, 0]].into_iter().collect();
        assert_eq!(diag, expected);
    }

    #[test]
    fn collision_checker_rejects_equal_pair_frequencies() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let same = ProbeSpec::pair(
            0,
            ProbePattern::PlaneWave { mode: vec![1, 0] },
            1,
            ProbePattern::PlaneWave { mode: vec![1, 0] },
        );
        // Read of (0,1) at [2,0] collides with the self-sources {±[2,0]}.
        let err = check_read_isolation(&same, 0, 1, &grid).unwrap_err();
        assert!(err.to_string().contains("collides"));

        let crossed = ProbeSpec::pair(
            0,
            ProbePattern::PlaneWave { mode: vec![1, 0] },
            1,
            ProbePattern::PlaneWave { mode: vec![0, 1] },
        );
        assert!(check_read_isolation(&crossed, 0, 1, &grid).is_ok());
        assert!(check_read_isolation(&crossed, 1, 0, &grid).is_ok());
    }

    #[test]
    fn collision_checker_rejects_nyquist_reads() {
        let grid = TorusGrid::unit_square(16).unwrap();
        // 2m lands exactly on the Nyquist line, where the divergence read is zero.
        let probe = ProbeSpec::single(0, ProbePattern::PlaneWave { mode: vec![4, 0] });
        let err = check_read_isolation(&probe, 0, 0, &grid).unwrap_err();
        assert!(err.to_string().contains("differentiation frequency"));
    }

    #[test]
    fn constant_probes_pass_the_checker_via_the_origin_exemption() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let probe = ProbeSpec::single(0, ProbePattern::ConstantOne);
        assert!(check_read_isolation(&probe, 0, 0, &grid).is_ok());
    }

    #[test]
    fn matrix_schedule_covers_every_entry_and_passes_checks() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let schedule = matrix_schedule(2, &grid).unwrap();
        assert_eq!(schedule.len(), 3);
        assert_eq!(schedule[0].species(), vec![0]);
        assert_eq!(schedule[1].species(), vec![1]);
        assert_eq!(schedule[2].species(), vec![0, 1]);

        let line = TorusGrid::new(&[64], &[1.0]).unwrap();
        let schedule = matrix_schedule(2, &line).unwrap();
        assert!(check_schedule(&schedule, &line).is_ok());
    }

    #[test]
    fn sweep_schedule_visits_the_half_lattice_and_skips_degenerate_reads() {
        let grid = TorusGrid::unit_square(16).unwrap();
        let sweep = kernel_sweep_schedule(0, 0, &grid, 6).unwrap();
        // Half of the 13x13 box minus the origin, minus the |m0| = 4 line
        // (whose doubled read hits the Nyquist line with zero derivative).
        let visited: HashSet<Vec<i64>> = sweep.iter().map(|(m, _)| m.clone()).collect();
        assert!(visited.contains(&vec![1, 0]));
        assert!(visited.contains(&vec![6, -6]));
        assert!(!visited.contains(&vec![4, 0]), "degenerate doubled read must be skipped");
        assert!(!visited.contains(&vec![-1, 0]), "only canonical representatives");
        for (mode, probe) in &sweep {
            assert_eq!(probe.species(), vec![0]);
            assert_eq!(
                probe.pattern_for(0),
                Some(&ProbePattern::PlaneWave { mode: mode.clone() })
            );
        }

        let off = kernel_sweep_schedule(0, 1, &grid, 3).unwrap();
        for (mode, probe) in &off {
            assert_eq!(probe.species(), vec![0, 1]);
            assert_eq!(
                probe.pattern_for(1),
                Some(&ProbePattern::PlaneWave { mode: mode.clone() })
            );
            assert!(check_read_isolation(probe, 0, 1, &grid).is_ok());
        }
        assert!(off.len() > 20, "off-diagonal sweep covers most of the band");
    }

    #[test]
    fn probe_horizon_shrinks_with_the_rate() {
        assert_eq!(probe_horizon(0.0, 0.5), 0.5);
        assert_relative_eq!(probe_horizon(40.0, 0.5), 0.05, max_relative = 1e-12);
        assert_eq!(probe_horizon(1.0, 0.5), 0.5);
    }

    #[test]
    fn labels_identify_the_probe() {
        let probe = ProbeSpec::pair(
            0,
            ProbePattern::PlaneWave { mode: vec![1, 0] },
            1,
            ProbePattern::ConstantOne,
        );
        let label = probe.label();
        assert!(label.contains("species 0: plane_wave[1, 0]"));
        assert!(label.contains("species 1: constant_one"));
    }
}
