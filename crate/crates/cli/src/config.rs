//! Strict JSON experiment configuration.
//!
//! Every section rejects unknown fields, parse failures name the offending
//! field path, and semantic checks (shapes, counts, positivity) run before
//! any numerics, so a bad configuration is reported as a configuration error
//! rather than surfacing as a mid-run failure.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use aggrekit_core::diffusion::DiffusionGeometry;
use aggrekit_core::field::Field;
use aggrekit_core::grd1;
use aggrekit_core::grid::{ensure_same_grid, TorusGrid};
use aggrekit_core::kernel::KernelSpec;
use aggrekit_core::measure::SnapshotPolicy;
use aggrekit_core::params::{Coupling, Diffusion, ModelParams};
use aggrekit_core::recovery::DEFAULT_PROBE_HORIZON;
use aggrekit_core::variation::{VariationInput, DEFAULT_EPSILONS};

use crate::error::CliError;

/// The one schema version this build reads.
pub const CONFIG_VERSION: u32 = 1;

fn config_err(context: &str, message: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{context}: {message}"))
}

/// Top-level experiment description. `grid` and `model` are always required;
/// the stage sections are consumed by the verbs that need them.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Schema version; must equal [`CONFIG_VERSION`].
    pub version: u32,
    pub grid: GridConfig,
    pub model: ModelConfig,
    /// Recorded in the manifest for reproducibility of randomized choices.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
    #[serde(default)]
    pub variation: Option<VariationConfig>,
    #[serde(default)]
    pub probes: Option<ProbeConfig>,
    #[serde(default)]
    pub inversion: Option<InversionConfig>,
}

impl ScenarioConfig {
    /// Parse a configuration file. Returns the parsed value together with
    /// the raw text (persisted verbatim into the run directory). Relative
    /// file references inside the configuration are resolved against the
    /// configuration file's directory.
    pub fn load(path: &Path) -> Result<(ScenarioConfig, String), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config = Self::parse(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut config = config;
        config.rebase_paths(base);
        Ok((config, text))
    }

    /// Parse configuration text; errors carry the JSON path of the bad field.
    pub fn parse(text: &str) -> Result<ScenarioConfig, CliError> {
        let mut de = serde_json::Deserializer::from_str(text);
        let config: ScenarioConfig = serde_path_to_error::deserialize(&mut de)
            .map_err(|e| CliError::Config(format!("at {}: {}", e.path(), e.inner())))?;
        if config.version != CONFIG_VERSION {
            return Err(config_err(
                "version",
                format!(
                    "unsupported schema version {}; this build reads version {CONFIG_VERSION}",
                    config.version
                ),
            ));
        }
        Ok(config)
    }

    /// Resolve every relative file reference against `base`.
    fn rebase_paths(&mut self, base: &Path) {
        if let Some(kernels) = self.model.kernels_mut() {
            for row in kernels {
                for k in row {
                    rebase_kernel(k, base);
                }
            }
        }
        for d in self.model.diffusion_list_mut() {
            if let DiffusionInit::Field { file } = d {
                rebase_pathbuf(file, base);
            }
        }
        if let Some(sim) = &mut self.simulation {
            for f in &mut sim.initial {
                rebase_init(f, base);
            }
        }
        if let Some(var) = &mut self.variation {
            for f in &mut var.f1 {
                rebase_init(f, base);
            }
            if let Some(f2) = &mut var.f2 {
                for f in f2 {
                    rebase_init(f, base);
                }
            }
        }
        if let Some(inv) = &mut self.inversion {
            for k in inv.banks_mut() {
                rebase_kernel(k, base);
            }
        }
    }

    pub fn build_grid(&self) -> Result<Arc<TorusGrid>, CliError> {
        self.grid.build()
    }
}

fn rebase_pathbuf(p: &mut PathBuf, base: &Path) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn rebase_kernel(k: &mut KernelSpec, base: &Path) {
    if let KernelSpec::GridSampled { paths } = k {
        for p in paths {
            if Path::new(p.as_str()).is_relative() {
                *p = base.join(p.as_str()).to_string_lossy().into_owned();
            }
        }
    }
}

fn rebase_init(f: &mut FieldInit, base: &Path) {
    if let FieldInit::File { path } = f {
        rebase_pathbuf(path, base);
    }
}

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Nodes per axis; each entry must be a power of two.
    pub dims: Vec<usize>,
    /// Axis periods; defaults to 1.0 per axis.
    #[serde(default)]
    pub lengths: Option<Vec<f64>>,
}

impl GridConfig {
    pub fn build(&self) -> Result<Arc<TorusGrid>, CliError> {
        let lengths = match &self.lengths {
            Some(l) => {
                if l.len() != self.dims.len() {
                    return Err(config_err(
                        "grid.lengths",
                        format!("expected {} entries, got {}", self.dims.len(), l.len()),
                    ));
                }
                l.clone()
            }
            None => vec![1.0; self.dims.len()],
        };
        TorusGrid::new(&self.dims, &lengths).map_err(|e| config_err("grid", e))
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Dynamics selection. The species count is the length of `diffusion`; all
/// coupling matrices and kernel banks must be square of that size.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "dynamics", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Independent heat flow; no coupling.
    Heat { diffusion: Vec<DiffusionInit> },
    /// Drift through vector kernels: `mu[i][j]` weights `kernels[i][j]`.
    DriftKernels {
        diffusion: Vec<DiffusionInit>,
        mu: Vec<Vec<f64>>,
        kernels: Vec<Vec<KernelSpec>>,
        /// Clamp negative density excursions out of the drift flux.
        #[serde(default)]
        clamp: bool,
    },
    /// Drift by gradients of scalar potentials: `nu[i][j]` weights
    /// `kernels[i][j]`.
    GradientPotentials {
        diffusion: Vec<DiffusionInit>,
        nu: Vec<Vec<f64>>,
        kernels: Vec<Vec<KernelSpec>>,
        #[serde(default)]
        clamp: bool,
    },
}

/// Either a constant diffusion coefficient (a bare number) or a grid file
/// holding a spatially varying one.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DiffusionInit {
    Constant(f64),
    Field { file: PathBuf },
}

impl DiffusionInit {
    fn build(&self, grid: &Arc<TorusGrid>, context: &str) -> Result<Diffusion, CliError> {
        match self {
            DiffusionInit::Constant(v) => Ok(Diffusion::Constant(*v)),
            DiffusionInit::Field { file } => {
                let (field, _) =
                    grd1::read_field(file).map_err(|e| config_err(context, e))?;
                ensure_same_grid(field.grid(), grid, context)
                    .map_err(|e| config_err(context, e))?;
                Ok(Diffusion::Variable(field))
            }
        }
    }
}

impl ModelConfig {
    pub fn n_species(&self) -> usize {
        self.diffusion_list().len()
    }

    fn diffusion_list(&self) -> &[DiffusionInit] {
        match self {
            ModelConfig::Heat { diffusion }
            | ModelConfig::DriftKernels { diffusion, .. }
            | ModelConfig::GradientPotentials { diffusion, .. } => diffusion,
        }
    }

    fn diffusion_list_mut(&mut self) -> &mut [DiffusionInit] {
        match self {
            ModelConfig::Heat { diffusion }
            | ModelConfig::DriftKernels { diffusion, .. }
            | ModelConfig::GradientPotentials { diffusion, .. } => diffusion,
        }
    }

    fn kernels_mut(&mut self) -> Option<&mut Vec<Vec<KernelSpec>>> {
        match self {
            ModelConfig::Heat { .. } => None,
            ModelConfig::DriftKernels { kernels, .. }
            | ModelConfig::GradientPotentials { kernels, .. } => Some(kernels),
        }
    }

    /// The kernel bank of the model, when the dynamics carry one.
    pub fn kernels(&self) -> Option<&Vec<Vec<KernelSpec>>> {
        match self {
            ModelConfig::Heat { .. } => None,
            ModelConfig::DriftKernels { kernels, .. }
            | ModelConfig::GradientPotentials { kernels, .. } => Some(kernels),
        }
    }

    /// The drift coupling matrix, when the dynamics are `drift_kernels`.
    pub fn mu(&self) -> Option<&Vec<Vec<f64>>> {
        match self {
            ModelConfig::DriftKernels { mu, .. } => Some(mu),
            _ => None,
        }
    }

    /// The potential coupling matrix, when the dynamics are
    /// `gradient_potentials`.
    pub fn nu(&self) -> Option<&Vec<Vec<f64>>> {
        match self {
            ModelConfig::GradientPotentials { nu, .. } => Some(nu),
            _ => None,
        }
    }

    pub fn build(&self, grid: &Arc<TorusGrid>) -> Result<ModelParams, CliError> {
        let diffusion: Vec<Diffusion> = self
            .diffusion_list()
            .iter()
            .enumerate()
            .map(|(s, d)| d.build(grid, &format!("model.diffusion[{s}]")))
            .collect::<Result<_, _>>()?;
        let (coupling, clamp) = match self {
            ModelConfig::Heat { .. } => (Coupling::Heat, false),
            ModelConfig::DriftKernels {
                mu, kernels, clamp, ..
            } => (
                Coupling::DriftKernels {
                    mu: mu.clone(),
                    kernels: kernels.clone(),
                },
                *clamp,
            ),
            ModelConfig::GradientPotentials {
                nu, kernels, clamp, ..
            } => (
                Coupling::GradientPotentials {
                    nu: nu.clone(),
                    kernels: kernels.clone(),
                },
                *clamp,
            ),
        };
        let params = ModelParams {
            n_species: diffusion.len(),
            diffusion,
            coupling,
            clamp_enabled: clamp,
        };
        params.validate(grid).map_err(|e| config_err("model", e))?;
        Ok(params)
    }
}

// ---------------------------------------------------------------------------
// Field initialization
// ---------------------------------------------------------------------------

/// Concrete initial or seed fields.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldInit {
    /// Uniform field.
    Constant { value: f64 },
    /// `baseline + amplitude * exp(-r^2 / (2 width^2))`, `r` the
    /// minimum-image distance from `center`.
    Gaussian {
        center: Vec<f64>,
        width: f64,
        amplitude: f64,
        #[serde(default)]
        baseline: f64,
    },
    /// `baseline + amplitude * cos(2 pi sum_a mode_a x_a / L_a)`.
    Cosine {
        mode: Vec<i64>,
        amplitude: f64,
        #[serde(default)]
        baseline: f64,
    },
    /// Field read from a grid file (its timestamp is ignored).
    File { path: PathBuf },
}

impl FieldInit {
    pub fn build(&self, grid: &Arc<TorusGrid>, context: &str) -> Result<Field, CliError> {
        match self {
            FieldInit::Constant { value } => Ok(Field::constant(grid, *value)),
            FieldInit::Gaussian {
                center,
                width,
                amplitude,
                baseline,
            } => {
                if center.len() != grid.ndim() {
                    return Err(config_err(
                        context,
                        format!("center needs {} coordinates", grid.ndim()),
                    ));
                }
                if !(*width > 0.0) || !width.is_finite() {
                    return Err(config_err(context, "width must be positive and finite"));
                }
                let periods = grid.periods().to_vec();
                let (c, w, a, b) = (center.clone(), *width, *amplitude, *baseline);
                Ok(Field::from_fn_real(grid, move |x| {
                    let mut r2 = 0.0;
                    for axis in 0..x.len() {
                        let l = periods[axis];
                        let mut dx = x[axis] - c[axis];
                        dx -= (dx / l).round() * l;
                        r2 += dx * dx;
                    }
                    b + a * (-r2 / (2.0 * w * w)).exp()
                }))
            }
            FieldInit::Cosine {
                mode,
                amplitude,
                baseline,
            } => {
                if mode.len() != grid.ndim() {
                    return Err(config_err(
                        context,
                        format!("mode needs {} components", grid.ndim()),
                    ));
                }
                let periods = grid.periods().to_vec();
                let (m, a, b) = (mode.clone(), *amplitude, *baseline);
                Ok(Field::from_fn_real(grid, move |x| {
                    let phase: f64 = x
                        .iter()
                        .zip(&m)
                        .zip(&periods)
                        .map(|((&xa, &ma), &la)| 2.0 * PI * ma as f64 * xa / la)
                        .sum();
                    b + a * phase.cos()
                }))
            }
            FieldInit::File { path } => {
                let (field, _) = grd1::read_field(path).map_err(|e| config_err(context, e))?;
                ensure_same_grid(field.grid(), grid, context)
                    .map_err(|e| config_err(context, e))?;
                Ok(field)
            }
        }
    }
}

/// Build one field per species, checking the count.
pub fn build_species_fields(
    inits: &[FieldInit],
    grid: &Arc<TorusGrid>,
    n_species: usize,
    section: &str,
) -> Result<Vec<Field>, CliError> {
    if inits.len() != n_species {
        return Err(config_err(
            section,
            format!("expected {n_species} fields, got {}", inits.len()),
        ));
    }
    inits
        .iter()
        .enumerate()
        .map(|(s, f)| f.build(grid, &format!("{section}[{s}]")))
        .collect()
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// One initial field per species.
    pub initial: Vec<FieldInit>,
    pub t_final: f64,
    pub dt: f64,
    #[serde(default)]
    pub snapshots: SnapshotConfig,
    /// Optional restricted observation window.
    #[serde(default)]
    pub observe: Option<ObserveConfig>,
}

/// Which states a run records.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotConfig {
    /// Initial and terminal states only.
    #[default]
    Endpoints,
    /// Every time step.
    EveryStep,
    /// Initial, terminal, and the listed interior times.
    Times(Vec<f64>),
}

impl SnapshotConfig {
    pub fn policy(&self) -> SnapshotPolicy {
        match self {
            SnapshotConfig::Endpoints => SnapshotPolicy::AtTimes(vec![]),
            SnapshotConfig::EveryStep => SnapshotPolicy::EveryStep,
            SnapshotConfig::Times(times) => SnapshotPolicy::AtTimes(times.clone()),
        }
    }
}

/// Observation restricted to a disk, at the listed times plus the terminal
/// time over the full torus.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserveConfig {
    pub center: Vec<f64>,
    pub radius: f64,
    pub times: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Variation extraction
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationConfig {
    /// Leading-order seed per species (real, non-negative).
    pub f1: Vec<FieldInit>,
    /// Second-order seed per species; defaults to zero.
    #[serde(default)]
    pub f2: Option<Vec<FieldInit>>,
    /// Strictly decreasing expansion ladder in (0, 1).
    #[serde(default)]
    pub epsilons: Option<Vec<f64>>,
    pub t_final: f64,
    pub dt: f64,
    #[serde(default)]
    pub snapshots: SnapshotConfig,
}

impl VariationConfig {
    pub fn build_input(
        &self,
        grid: &Arc<TorusGrid>,
        n_species: usize,
    ) -> Result<VariationInput, CliError> {
        let f1 = build_species_fields(&self.f1, grid, n_species, "variation.f1")?;
        let f2 = match &self.f2 {
            Some(inits) => build_species_fields(inits, grid, n_species, "variation.f2")?,
            None => (0..n_species).map(|_| Field::zeros(grid)).collect(),
        };
        let epsilons = self
            .epsilons
            .clone()
            .unwrap_or_else(|| DEFAULT_EPSILONS.to_vec());
        Ok(VariationInput { f1, f2, epsilons })
    }
}

// ---------------------------------------------------------------------------
// Probes
// ---------------------------------------------------------------------------

/// How probe responses are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    /// Variation solvers (exact first variation, stepped second variation).
    #[default]
    Direct,
    /// Exact per-mode quadrature; no stepping error.
    Emulated,
    /// Epsilon-ladder extraction from full nonlinear runs.
    Extracted,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default)]
    pub data: DataMode,
    /// Time steps per probe run (direct and extracted data).
    #[serde(default = "default_probe_steps")]
    pub steps: usize,
    /// Base horizon; each probe shortens it adaptively under fast decay.
    #[serde(default = "default_base_horizon")]
    pub base_horizon: f64,
    /// Expansion ladder for extracted data.
    #[serde(default)]
    pub epsilons: Option<Vec<f64>>,
}

fn default_probe_steps() -> usize {
    400
}

fn default_base_horizon() -> f64 {
    DEFAULT_PROBE_HORIZON
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            data: DataMode::Direct,
            steps: default_probe_steps(),
            base_horizon: default_base_horizon(),
            epsilons: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Inversion
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InversionConfig {
    /// Spatially varying diffusion from boundary Laplace-domain data.
    Diffusion {
        /// Diffusion contrast per species (the recovery needs exactly two).
        contrasts: Vec<ContrastConfig>,
        /// Laplace ladder; defaults to the standard decreasing ladder.
        #[serde(default)]
        p_values: Option<Vec<f64>>,
        /// Regularization sweep; defaults to a decade ladder.
        #[serde(default)]
        alphas: Option<Vec<f64>>,
        /// Pin the regularization weight instead of the corner heuristic.
        #[serde(default)]
        alpha_override: Option<f64>,
        #[serde(default)]
        geometry: GeometryConfig,
    },
    /// Drift coupling matrix, given the kernel bank.
    Mu {
        /// Kernel bank; defaults to the model's own kernels.
        #[serde(default)]
        bank: Option<Vec<Vec<KernelSpec>>>,
    },
    /// Potential coupling matrix, given the potential bank.
    Nu {
        #[serde(default)]
        bank: Option<Vec<Vec<KernelSpec>>>,
    },
    /// Kernel amplitudes against a known-shape bank, coupling known.
    Normalization { bank: Vec<Vec<KernelSpec>> },
    /// Full scalar-potential transform of one entry, coupling known.
    W {
        row: usize,
        col: usize,
        /// Largest per-axis mode the sweep visits; defaults to two below the
        /// Nyquist mode.
        #[serde(default)]
        cutoff: Option<i64>,
    },
}

impl InversionConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            InversionConfig::Diffusion { .. } => "diffusion",
            InversionConfig::Mu { .. } => "mu",
            InversionConfig::Nu { .. } => "nu",
            InversionConfig::Normalization { .. } => "normalization",
            InversionConfig::W { .. } => "w",
        }
    }

    fn banks_mut(&mut self) -> impl Iterator<Item = &mut KernelSpec> {
        let rows: Option<&mut Vec<Vec<KernelSpec>>> = match self {
            InversionConfig::Mu { bank } | InversionConfig::Nu { bank } => bank.as_mut(),
            InversionConfig::Normalization { bank } => Some(bank),
            _ => None,
        };
        rows.into_iter().flatten().flatten()
    }
}

/// Shape of one species' diffusion coefficient for synthetic boundary data.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum ContrastConfig {
    /// `d = 1` everywhere.
    Uniform,
    /// `d = 1 + amplitude * bump(|x - center| / radius)`; smooth and
    /// compactly supported inside the radius.
    RadialBump {
        center: Vec<f64>,
        radius: f64,
        amplitude: f64,
    },
}

fn smooth_bump(s: f64) -> f64 {
    if s >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    }
}

impl ContrastConfig {
    pub fn d_field(&self, grid: &Arc<TorusGrid>, context: &str) -> Result<Field, CliError> {
        match self {
            ContrastConfig::Uniform => Ok(Field::constant(grid, 1.0)),
            ContrastConfig::RadialBump {
                center,
                radius,
                amplitude,
            } => {
                if *amplitude <= -1.0 {
                    return Err(config_err(
                        context,
                        "amplitude must exceed -1 so the diffusion stays positive",
                    ));
                }
                let bump =
                    aggrekit_core::diffusion::radial_bump_field(grid, center, *radius, *amplitude)
                        .map_err(|e| config_err(context, e))?;
                Ok(bump.map(|c| c + 1.0))
            }
        }
    }

    /// Exact diffusion value at a point (plain Euclidean distance; the
    /// contrast support sits well inside the box).
    pub fn d_at(&self, point: &[f64]) -> f64 {
        match self {
            ContrastConfig::Uniform => 1.0,
            ContrastConfig::RadialBump {
                center,
                radius,
                amplitude,
            } => {
                let r = point
                    .iter()
                    .zip(center)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                1.0 + amplitude * smooth_bump(r / radius)
            }
        }
    }
}

/// Measurement geometry for the diffusion recovery.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeometryConfig {
    /// 256x256 box of side 8, 16 receivers on radius 1.8, 12 sources on
    /// radius 1.6, 24x24 reconstruction nodes over `[-1, 1]^2`.
    #[default]
    Standard,
    /// Custom ring geometry (same layout, different sizes).
    Custom {
        grid_n: usize,
        side: f64,
        receivers: usize,
        receiver_radius: f64,
        sources: usize,
        source_radius: f64,
        /// Source profile width; defaults to two grid cells.
        #[serde(default)]
        source_width: Option<f64>,
        nodes_per_axis: usize,
    },
}

fn ring(count: usize, radius: f64, phase: f64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|k| {
            let angle = 2.0 * PI * (k as f64 + phase) / count as f64;
            vec![radius * angle.cos(), radius * angle.sin()]
        })
        .collect()
}

impl GeometryConfig {
    pub fn build(&self) -> Result<DiffusionGeometry, CliError> {
        match self {
            GeometryConfig::Standard => {
                DiffusionGeometry::standard().map_err(|e| config_err("inversion.geometry", e))
            }
            GeometryConfig::Custom {
                grid_n,
                side,
                receivers,
                receiver_radius,
                sources,
                source_radius,
                source_width,
                nodes_per_axis,
            } => {
                let grid = TorusGrid::square(*grid_n, *side)
                    .map_err(|e| config_err("inversion.geometry", e))?;
                let n_nodes = *nodes_per_axis;
                if n_nodes == 0 {
                    return Err(config_err(
                        "inversion.geometry.nodes_per_axis",
                        "must be positive",
                    ));
                }
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
                let geometry = DiffusionGeometry {
                    source_width: source_width.unwrap_or(2.0 * grid.spacing(0)),
                    grid,
                    receivers: ring(*receivers, *receiver_radius, 0.5),
                    sources: ring(*sources, *source_radius, 0.25),
                    nodes,
                    node_weights,
                    node_cell,
                };
                geometry
                    .validate()
                    .map_err(|e| config_err("inversion.geometry", e))?;
                Ok(geometry)
            }
        }
    }
}
