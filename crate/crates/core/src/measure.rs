//! Trajectories, accessible-region masks, and measurement extraction.
//!
//! A simulation produces a [`Trajectory`] (per-species states at recorded
//! times). The measurement maps restrict a trajectory to an accessible
//! region: interior observations are snapshots masked to a region `omega`
//! over an open time window, and terminal observations are full-torus
//! snapshots at the final time.

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{CoreError, Result};
use crate::field::Field;
use crate::grid::{ensure_same_grid, TorusGrid};

/// Relative slack used when matching requested times against recorded ones.
const TIME_MATCH_TOL: f64 = 1e-9;

/// Sentinel stored at nodes outside the accessible region. Inversion code
/// must never read it; NaN poisons any accidental use.
pub const MASKED_SENTINEL: f64 = f64::NAN;

/// Boolean indicator of an accessible sub-region of the torus.
#[derive(Clone, Debug)]
pub struct Mask {
    grid: Arc<TorusGrid>,
    inside: Vec<bool>,
}

impl Mask {
    /// Build from a predicate on node coordinates.
    pub fn from_predicate(grid: &Arc<TorusGrid>, pred: impl Fn(&[f64]) -> bool) -> Self {
        let inside = (0..grid.len()).map(|flat| pred(&grid.node(flat))).collect();
        Mask {
            grid: Arc::clone(grid),
            inside,
        }
    }

    /// The whole torus.
    pub fn full(grid: &Arc<TorusGrid>) -> Self {
        Mask {
            grid: Arc::clone(grid),
            inside: vec![true; grid.len()],
        }
    }

    /// Periodic ball of radius `radius` around `center`.
    pub fn disk(grid: &Arc<TorusGrid>, center: &[f64], radius: f64) -> Self {
        let periods = grid.periods().to_vec();
        let center = center.to_vec();
        Self::from_predicate(grid, move |coords| {
            let mut dist2 = 0.0;
            for (axis, (&x, &c)) in coords.iter().zip(&center).enumerate() {
                let period = periods[axis];
                let mut delta = (x - c).rem_euclid(period);
                if delta > period / 2.0 {
                    delta -= period;
                }
                dist2 += delta * delta;
            }
            dist2 <= radius * radius
        })
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        &self.grid
    }

    pub fn contains(&self, flat: usize) -> bool {
        self.inside[flat]
    }

    pub fn count(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.inside.iter().all(|&b| !b)
    }

    /// Flat indices of accessible nodes, in row-major order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.inside
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }
}

/// Recorded evolution of an `N`-species state.
#[derive(Clone, Debug)]
pub struct Trajectory {
    grid: Arc<TorusGrid>,
    times: Vec<f64>,
    /// `states[t][i]` is species `i` at `times[t]`.
    states: Vec<Vec<Field>>,
}

impl Trajectory {
    pub fn new(grid: Arc<TorusGrid>, times: Vec<f64>, states: Vec<Vec<Field>>) -> Self {
        assert_eq!(times.len(), states.len(), "one state per recorded time");
        Trajectory {
            grid,
            times,
            states,
        }
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_species(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, index: usize) -> &[Field] {
        &self.states[index]
    }

    pub fn terminal(&self) -> &[Field] {
        self.states.last().expect("trajectory holds at least one state")
    }

    /// Index of the recorded time matching `t` within a relative tolerance.
    pub fn index_of_time(&self, t: f64) -> Result<usize> {
        let scale = self.times.last().copied().unwrap_or(1.0).abs().max(1.0);
        self.times
            .iter()
            .position(|&rec| (rec - t).abs() <= TIME_MATCH_TOL * scale)
            .ok_or(CoreError::TimeNotRecorded(t))
    }

    /// Per-time complex samples of one species at one node.
    pub fn node_series(&self, species: usize, flat: usize) -> Vec<Complex64> {
        self.states
            .iter()
            .map(|state| state[species].values()[flat])
            .collect()
    }
}

/// Observed data: interior snapshots over a mask, plus an optional terminal
/// full-torus snapshot.
#[derive(Clone, Debug)]
pub struct MeasurementSet {
    pub mask: Mask,
    pub times: Vec<f64>,
    /// `snapshots[t][i]`: species `i` at `times[t]`, sentinel outside the
    /// mask.
    pub snapshots: Vec<Vec<Field>>,
    /// Terminal-time snapshot over the full torus, when the scenario uses
    /// the terminal measurement map.
    pub terminal: Option<Vec<Field>>,
}

/// Restrict a trajectory to the accessible region at the requested times.
pub fn observe(trajectory: &Trajectory, mask: &Mask, times: &[f64]) -> Result<MeasurementSet> {
    ensure_same_grid(trajectory.grid(), mask.grid(), "observation mask")?;
    if mask.is_empty() {
        return Err(CoreError::EmptyMeasurementRegion);
    }
    let mut snapshots = Vec::with_capacity(times.len());
    for &t in times {
        let index = trajectory.index_of_time(t)?;
        let masked: Vec<Field> = trajectory
            .state(index)
            .iter()
            .map(|field| {
                let mut out = field.clone();
                for (flat, value) in out.values_mut().iter_mut().enumerate() {
                    if !mask.contains(flat) {
                        *value = Complex64::new(MASKED_SENTINEL, MASKED_SENTINEL);
                    }
                }
                out.refresh_realness();
                out
            })
            .collect();
        snapshots.push(masked);
    }
    Ok(MeasurementSet {
        mask: mask.clone(),
        times: times.to_vec(),
        snapshots,
        terminal: None,
    })
}

/// Attach the trajectory's terminal full-torus state to a measurement set.
pub fn with_terminal(mut set: MeasurementSet, trajectory: &Trajectory) -> MeasurementSet {
    set.terminal = Some(trajectory.terminal().to_vec());
    set
}

/// Which states a solver records.
#[derive(Clone, Debug)]
pub enum SnapshotPolicy {
    /// Record the state after every time step (plus the initial state).
    EveryStep,
    /// Record only the initial state, the listed times, and the final state.
    AtTimes(Vec<f64>),
}

impl SnapshotPolicy {
    /// Whether the state at step `step` (time `t`) should be recorded,
    /// given `n_steps` total steps of size `dt`.
    pub(crate) fn wants(&self, step: usize, n_steps: usize, dt: f64) -> bool {
        match self {
            SnapshotPolicy::EveryStep => true,
            SnapshotPolicy::AtTimes(times) => {
                if step == 0 || step == n_steps {
                    return true;
                }
                let t = step as f64 * dt;
                let scale = (n_steps as f64 * dt).abs().max(1.0);
                times.iter().any(|&req| (req - t).abs() <= TIME_MATCH_TOL * scale)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_trajectory() -> Trajectory {
        let grid = TorusGrid::unit_square(8).unwrap();
        let f0 = Field::from_fn_real(&grid, |coords| coords[0]);
        let f1 = Field::from_fn_real(&grid, |coords| coords[1]);
        Trajectory::new(
            Arc::clone(&grid),
            vec![0.0, 0.5, 1.0],
            vec![vec![f0.clone()], vec![f1.clone()], vec![f0.clone()]],
        )
    }

    #[test]
    fn full_mask_observation_matches_trajectory() {
        let traj = tiny_trajectory();
        let mask = Mask::full(traj.grid());
        let set = observe(&traj, &mask, &[0.5]).unwrap();
        let expected = traj.state(1)[0].values();
        assert_eq!(set.snapshots[0][0].values(), expected);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let traj = tiny_trajectory();
        let mask = Mask::from_predicate(traj.grid(), |_| false);
        let err = observe(&traj, &mask, &[0.0]).unwrap_err();
        assert!(matches!(err, CoreError::EmptyMeasurementRegion));
    }

    #[test]
    fn unrecorded_time_is_rejected() {
        let traj = tiny_trajectory();
        let mask = Mask::full(traj.grid());
        let err = observe(&traj, &mask, &[0.25]).unwrap_err();
        assert!(matches!(err, CoreError::TimeNotRecorded(_)));
    }

    #[test]
    fn masked_nodes_carry_sentinel() {
        let traj = tiny_trajectory();
        let mask = Mask::from_predicate(traj.grid(), |coords| coords[0] < 0.5);
        assert!(!mask.is_empty());
        let set = observe(&traj, &mask, &[1.0]).unwrap();
        let grid = traj.grid();
        let field = &set.snapshots[0][0];
        for flat in 0..grid.len() {
            if mask.contains(flat) {
                assert!(field.values()[flat].re.is_finite());
            } else {
                assert!(field.values()[flat].re.is_nan());
            }
        }
    }

    #[test]
    fn disk_mask_wraps_periodically() {
        let grid = TorusGrid::unit_square(32).unwrap();
        // Disk centered at the origin corner: wraps into all four quadrants.
        let mask = Mask::disk(&grid, &[0.0, 0.0], 0.1);
        let near_wrap = grid.idx2(31, 31); // coordinate (31/32, 31/32), distance ~0.044
        assert!(mask.contains(near_wrap));
        let center = grid.idx2(16, 16);
        assert!(!mask.contains(center));
    }

    #[test]
    fn snapshot_policy_samples_endpoints() {
        let policy = SnapshotPolicy::AtTimes(vec![0.5]);
        assert!(policy.wants(0, 10, 0.1));
        assert!(policy.wants(10, 10, 0.1));
        assert!(policy.wants(5, 10, 0.1));
        assert!(!policy.wants(3, 10, 0.1));
    }
}
