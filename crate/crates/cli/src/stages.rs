//! Verb implementations: run the core stages, persist artifacts, emit tables.
//!
//! Every verb writes into `<out_root>/<verb>-<hash16>/` where `hash16` is the
//! leading 16 hex digits of the configuration hash, so each artifact path
//! carries the configuration it came from. The directory holds the verbatim
//! configuration, a `report.json` with everything the tables are derived
//! from, the tables themselves, any field files, and a `manifest.json`
//! hashing all of the above.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use aggrekit_core::diffusion::{
    default_p_ladder, invert_diffusion, m_from_d, synthesize_laplace_measurements,
    DiffusionConfig, DiffusionReport,
};
use aggrekit_core::error::CoreError;
use aggrekit_core::field::mass;
use aggrekit_core::grd1;
use aggrekit_core::grid::TorusGrid;
use aggrekit_core::kernel::KernelSpec;
use aggrekit_core::measure::{observe, with_terminal, Mask, SnapshotPolicy, Trajectory};
use aggrekit_core::parallel::try_map_units;
use aggrekit_core::params::{Coupling, ModelParams};
use aggrekit_core::probe::{default_sweep_cutoff, kernel_sweep_schedule, matrix_schedule, ProbeSpec};
use aggrekit_core::recovery::{
    divergence_quadrature, emulate_probe_run, extract_probe_run, recover_mu, recover_normalization,
    recover_nu, recover_w, run_probe_direct, MeasurementBundle, ProbeRun,
};
use aggrekit_core::report::{
    comparison_csv, format_float, ComparisonRow, KernelReport, MatrixReport, NormalizationReport,
};
use aggrekit_core::solver::simulate;
use aggrekit_core::variation::extract_variations;

use crate::config::{
    build_species_fields, DataMode, InversionConfig, ProbeConfig, ScenarioConfig,
};
use crate::error::CliError;
use crate::manifest::{config_hash, ArtifactSink};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "AGGREKIT_OUT";
/// Fallback output root when neither `--out` nor the environment names one.
pub const DEFAULT_OUT: &str = "aggrekit-out";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verb {
    Simulate,
    Linearize,
    InvertDiffusion,
    InvertAdvection,
    InvertKernel,
    Report,
}

impl Verb {
    pub fn name(self) -> &'static str {
        match self {
            Verb::Simulate => "simulate",
            Verb::Linearize => "linearize",
            Verb::InvertDiffusion => "invert-diffusion",
            Verb::InvertAdvection => "invert-advection",
            Verb::InvertKernel => "invert-kernel",
            Verb::Report => "report",
        }
    }

    /// The verbs that own run directories (everything except `report`).
    const RUN_VERBS: [Verb; 5] = [
        Verb::Simulate,
        Verb::Linearize,
        Verb::InvertDiffusion,
        Verb::InvertAdvection,
        Verb::InvertKernel,
    ];
}

/// What a finished invocation hands back to `main` for printing.
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest_path: PathBuf,
    /// Artifact paths written by this invocation, relative to `run_dir`.
    pub written: Vec<String>,
}

/// Everything a run's tables are derived from, persisted as `report.json` so
/// the `report` verb can re-emit them without recomputing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub tool_version: String,
    pub verb: String,
    pub payload: RunPayload,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum RunPayload {
    Simulate(SimulatePayload),
    Linearize(LinearizePayload),
    Diffusion(DiffusionPayload),
    CouplingMatrix(MatrixPayload),
    Normalization(NormalizationPayload),
    KernelTransform(KernelPayload),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulatePayload {
    pub times: Vec<f64>,
    /// `masses[t][s]`: total mass of species `s` at `times[t]`.
    pub masses: Vec<Vec<f64>>,
    /// Node count of the observation mask, when a window was requested.
    pub observed_nodes: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearizePayload {
    pub epsilons: Vec<f64>,
    /// Relative misfit of the quadratic fit across the whole ladder.
    pub residual: f64,
    pub times: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffusionPayload {
    /// `truth_d[s][node]`: exact diffusion at the reconstruction nodes.
    pub truth_d: Vec<Vec<f64>>,
    pub report: DiffusionReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixPayload {
    pub truth: Vec<Vec<f64>>,
    pub report: MatrixReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormalizationPayload {
    /// Exact divergence integrals of the model's kernels.
    pub truth: Vec<Vec<f64>>,
    pub report: NormalizationReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelPayload {
    /// Exact transform of the model's kernel at the recovered modes,
    /// aligned with `report.modes`.
    pub truth_re: Vec<f64>,
    pub truth_im: Vec<f64>,
    pub report: KernelReport,
}

/// Run `verb` for `config`, writing under `out_root`.
pub fn execute(
    verb: Verb,
    config: &ScenarioConfig,
    raw_config: &str,
    out_root: &Path,
    seed: u64,
) -> Result<RunOutcome, CliError> {
    let hash = config_hash(config)?;
    if verb == Verb::Report {
        return reemit_tables(&hash, out_root);
    }
    let run_dir = out_root.join(format!("{}-{}", verb.name(), &hash[..16]));
    let mut sink = ArtifactSink::new(&run_dir)?;
    sink.write_string("config.json", raw_config)?;

    let payload = match verb {
        Verb::Simulate => run_simulate(config, &mut sink)?,
        Verb::Linearize => run_linearize(config, &mut sink)?,
        Verb::InvertDiffusion => run_invert_diffusion(config, &mut sink)?,
        Verb::InvertAdvection => run_invert_advection(config, &mut sink)?,
        Verb::InvertKernel => run_invert_kernel(config, &mut sink)?,
        Verb::Report => unreachable!("handled above"),
    };

    let record = RunRecord {
        config_hash: hash.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        verb: verb.name().to_string(),
        payload,
    };
    let record_json = serde_json::to_string_pretty(&record)
        .map_err(|e| CliError::Config(format!("cannot serialize report: {e}")))?;
    sink.write_string("report.json", &record_json)?;

    let t_tables = Instant::now();
    for (rel, text) in render_tables(&record.payload)? {
        sink.write_string(&rel, &text)?;
    }
    sink.add_timing("tables", t_tables);

    let (manifest, manifest_path) = sink.finish(verb.name(), &hash, seed)?;
    Ok(RunOutcome {
        run_dir,
        manifest_path,
        written: manifest.artifacts.iter().map(|a| a.path.clone()).collect(),
    })
}

/// The `report` verb: find every completed run of this configuration and
/// rewrite its tables from the stored `report.json`.
fn reemit_tables(hash: &str, out_root: &Path) -> Result<RunOutcome, CliError> {
    let mut written = Vec::new();
    let mut last_dir = None;
    for verb in Verb::RUN_VERBS {
        let run_dir = out_root.join(format!("{}-{}", verb.name(), &hash[..16]));
        let record_path = run_dir.join("report.json");
        if !record_path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&record_path).map_err(CliError::io(format!(
            "cannot read {}",
            record_path.display()
        )))?;
        let record: RunRecord = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", record_path.display())))?;
        if record.config_hash != hash {
            return Err(CliError::Config(format!(
                "{} belongs to config {}, not {}",
                record_path.display(),
                &record.config_hash[..16],
                &hash[..16]
            )));
        }
        for (rel, table) in render_tables(&record.payload)? {
            let path = run_dir.join(&rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)
                    .map_err(CliError::io(format!("cannot create {}", parent.display())))?;
            }
            std::fs::write(&path, table)
                .map_err(CliError::io(format!("cannot write {}", path.display())))?;
            written.push(format!("{}/{}", run_dir.display(), rel));
        }
        last_dir = Some(run_dir);
    }
    let Some(run_dir) = last_dir else {
        return Err(CliError::Config(format!(
            "no completed run for this configuration under {} (hash {}); run a verb first",
            out_root.display(),
            &hash[..16]
        )));
    };
    let manifest_path = run_dir.join("manifest.json");
    Ok(RunOutcome {
        run_dir,
        manifest_path,
        written,
    })
}

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

/// Render every CSV table of a payload as (relative path, content) pairs.
pub fn render_tables(payload: &RunPayload) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    match payload {
        RunPayload::Simulate(p) => {
            let n_species = p.masses.first().map_or(0, |row| row.len());
            let mut csv = String::from("time");
            for s in 0..n_species {
                csv.push_str(&format!(",mass_{s}"));
            }
            csv.push('\n');
            for (t, row) in p.times.iter().zip(&p.masses) {
                csv.push_str(&format_float(*t));
                for m in row {
                    csv.push(',');
                    csv.push_str(&format_float(*m));
                }
                csv.push('\n');
            }
            out.push(("tables/masses.csv".to_string(), csv));
        }
        RunPayload::Linearize(p) => {
            let mut csv = String::from("quantity,value\n");
            csv.push_str(&format!("residual,{}\n", format_float(p.residual)));
            for (k, e) in p.epsilons.iter().enumerate() {
                csv.push_str(&format!("epsilon_{k},{}\n", format_float(*e)));
            }
            out.push(("tables/extraction.csv".to_string(), csv));
        }
        RunPayload::Diffusion(p) => {
            let mut rows = Vec::new();
            for (s, species) in p.report.species.iter().enumerate() {
                let truth = &p.truth_d[s];
                for (node, (&t, &r)) in truth.iter().zip(&species.d).enumerate() {
                    rows.push(ComparisonRow::new(format!("d{s}[{node}]"), t, r));
                }
            }
            out.push(("tables/comparison.csv".to_string(), comparison_csv(&rows)));
            for species in &p.report.species {
                let mut csv = String::from("alpha,residual_norm,solution_norm\n");
                for sample in &species.sweep {
                    csv.push_str(&format!(
                        "{},{},{}\n",
                        format_float(sample.alpha),
                        format_float(sample.residual_norm),
                        format_float(sample.solution_norm)
                    ));
                }
                out.push((format!("tables/lcurve_s{}.csv", species.species), csv));
            }
        }
        RunPayload::CouplingMatrix(p) => {
            let rows = p.report.comparison_rows(&p.truth);
            out.push(("tables/comparison.csv".to_string(), comparison_csv(&rows)));
        }
        RunPayload::Normalization(p) => {
            let rows = p.report.comparison_rows(&p.truth);
            out.push(("tables/comparison.csv".to_string(), comparison_csv(&rows)));
        }
        RunPayload::KernelTransform(p) => {
            let mut rows = Vec::new();
            for (k, mode) in p.report.modes.iter().enumerate() {
                let name: Vec<String> = mode.mode.iter().map(|m| m.to_string()).collect();
                let name = name.join(";");
                rows.push(ComparisonRow::new(
                    format!("w[{name}].re"),
                    p.truth_re[k],
                    mode.re,
                ));
                rows.push(ComparisonRow::new(
                    format!("w[{name}].im"),
                    p.truth_im[k],
                    mode.im,
                ));
            }
            out.push(("tables/comparison.csv".to_string(), comparison_csv(&rows)));
            out.push(("tables/modes.csv".to_string(), p.report.mode_table_csv()));
            let mut gaps = String::from("mode\n");
            for gap in &p.report.gaps {
                let name: Vec<String> = gap.iter().map(|m| m.to_string()).collect();
                gaps.push_str(&name.join(";"));
                gaps.push('\n');
            }
            out.push(("tables/gaps.csv".to_string(), gaps));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn write_trajectory(
    sink: &mut ArtifactSink,
    prefix: &str,
    trajectory: &Trajectory,
) -> Result<(), CliError> {
    for (k, &t) in trajectory.times().iter().enumerate() {
        for (s, field) in trajectory.state(k).iter().enumerate() {
            let rel = format!("fields/{prefix}{s}_{k:04}.grd1");
            let path = sink.path_for(&rel)?;
            grd1::write_field(&path, field, t)?;
            sink.record_external(&rel)?;
        }
    }
    Ok(())
}

fn run_simulate(config: &ScenarioConfig, sink: &mut ArtifactSink) -> Result<RunPayload, CliError> {
    let sim = config.simulation.as_ref().ok_or_else(|| {
        CliError::Config("simulation: section required for the simulate verb".into())
    })?;
    let grid = config.build_grid()?;
    let params = config.model.build(&grid)?;
    let initial = build_species_fields(&sim.initial, &grid, params.n_species, "simulation.initial")?;

    // Observation times must be recorded states; fold them into the policy.
    let policy = match (sim.snapshots.policy(), &sim.observe) {
        (SnapshotPolicy::AtTimes(mut times), Some(obs)) => {
            times.extend(obs.times.iter().copied());
            times.sort_by(f64::total_cmp);
            times.dedup();
            SnapshotPolicy::AtTimes(times)
        }
        (policy, _) => policy,
    };

    let t0 = Instant::now();
    let trajectory = simulate(&params, &initial, sim.t_final, sim.dt, &policy)?;
    sink.add_timing("simulate", t0);

    let t1 = Instant::now();
    write_trajectory(sink, "u", &trajectory)?;
    let masses: Vec<Vec<f64>> = (0..trajectory.times().len())
        .map(|k| trajectory.state(k).iter().map(|f| mass(f).re).collect())
        .collect();

    let mut observed_nodes = None;
    if let Some(obs) = &sim.observe {
        if obs.center.len() != grid.ndim() {
            return Err(CliError::Config(format!(
                "simulation.observe.center: needs {} coordinates",
                grid.ndim()
            )));
        }
        let mask = Mask::disk(&grid, &obs.center, obs.radius);
        let set = with_terminal(observe(&trajectory, &mask, &obs.times)?, &trajectory);
        for (k, &t) in set.times.iter().enumerate() {
            for (s, field) in set.snapshots[k].iter().enumerate() {
                let rel = format!("observed/m{s}_{k:04}.grd1");
                let path = sink.path_for(&rel)?;
                grd1::write_field(&path, field, t)?;
                sink.record_external(&rel)?;
            }
        }
        if let Some(terminal) = &set.terminal {
            let t_end = *trajectory.times().last().expect("nonempty trajectory");
            for (s, field) in terminal.iter().enumerate() {
                let rel = format!("observed/terminal{s}.grd1");
                let path = sink.path_for(&rel)?;
                grd1::write_field(&path, field, t_end)?;
                sink.record_external(&rel)?;
            }
        }
        observed_nodes = Some(set.mask.count());
    }
    sink.add_timing("persist", t1);

    Ok(RunPayload::Simulate(SimulatePayload {
        times: trajectory.times().to_vec(),
        masses,
        observed_nodes,
    }))
}

// ---------------------------------------------------------------------------
// linearize
// ---------------------------------------------------------------------------

fn run_linearize(config: &ScenarioConfig, sink: &mut ArtifactSink) -> Result<RunPayload, CliError> {
    let var = config.variation.as_ref().ok_or_else(|| {
        CliError::Config("variation: section required for the linearize verb".into())
    })?;
    let grid = config.build_grid()?;
    let params = config.model.build(&grid)?;
    let input = var.build_input(&grid, params.n_species)?;
    let epsilons = input.epsilons.clone();

    let t0 = Instant::now();
    let pair = extract_variations(&params, &input, var.t_final, var.dt, &var.snapshots.policy())?;
    sink.add_timing("extract", t0);

    let t1 = Instant::now();
    write_trajectory(sink, "ui", &pair.u_i)?;
    write_trajectory(sink, "uii", &pair.u_ii)?;
    sink.add_timing("persist", t1);

    Ok(RunPayload::Linearize(LinearizePayload {
        epsilons,
        residual: pair.residual,
        times: pair.u_i.times().to_vec(),
    }))
}

// ---------------------------------------------------------------------------
// invert-diffusion
// ---------------------------------------------------------------------------

fn run_invert_diffusion(
    config: &ScenarioConfig,
    sink: &mut ArtifactSink,
) -> Result<RunPayload, CliError> {
    let Some(InversionConfig::Diffusion {
        contrasts,
        p_values,
        alphas,
        alpha_override,
        geometry,
    }) = &config.inversion
    else {
        return Err(CliError::Config(
            "inversion: kind \"diffusion\" required for the invert-diffusion verb".into(),
        ));
    };
    let geometry = geometry.build()?;
    let p_values = p_values.clone().unwrap_or_else(default_p_ladder);

    let t0 = Instant::now();
    let mut m_fields = Vec::with_capacity(contrasts.len());
    let mut truth_d = Vec::with_capacity(contrasts.len());
    for (s, contrast) in contrasts.iter().enumerate() {
        let d = contrast.d_field(&geometry.grid, &format!("inversion.contrasts[{s}]"))?;
        m_fields.push(m_from_d(&d)?);
        truth_d.push(
            geometry
                .nodes
                .iter()
                .map(|node| contrast.d_at(node))
                .collect::<Vec<f64>>(),
        );
    }
    let measurements = synthesize_laplace_measurements(&geometry, &m_fields, &p_values)?;
    sink.add_timing("synthesize", t0);

    let mut dconfig = DiffusionConfig::default();
    if let Some(a) = alphas {
        dconfig.alphas = a.clone();
    }
    dconfig.alpha_override = *alpha_override;

    let t1 = Instant::now();
    let report = invert_diffusion(&geometry, &measurements, &dconfig)?;
    sink.add_timing("invert", t1);

    Ok(RunPayload::Diffusion(DiffusionPayload { truth_d, report }))
}

// ---------------------------------------------------------------------------
// probe-based inversions
// ---------------------------------------------------------------------------

fn generate_runs(
    params: &ModelParams,
    grid: &Arc<TorusGrid>,
    probes: Vec<ProbeSpec>,
    pc: &ProbeConfig,
) -> Result<Vec<ProbeRun>, CliError> {
    if pc.steps == 0 {
        return Err(CliError::Config("probes.steps: must be positive".into()));
    }
    if !(pc.base_horizon > 0.0) || !pc.base_horizon.is_finite() {
        return Err(CliError::Config(
            "probes.base_horizon: must be positive and finite".into(),
        ));
    }
    let epsilons = pc
        .epsilons
        .clone()
        .unwrap_or_else(|| aggrekit_core::variation::DEFAULT_EPSILONS.to_vec());
    let runs = try_map_units(probes, |probe| -> Result<ProbeRun, CoreError> {
        match pc.data {
            DataMode::Direct => run_probe_direct(params, grid, &probe, pc.base_horizon, pc.steps),
            DataMode::Emulated => emulate_probe_run(params, grid, &probe, pc.base_horizon),
            DataMode::Extracted => {
                extract_probe_run(params, grid, &probe, &epsilons, pc.base_horizon, pc.steps)
            }
        }
    })?;
    Ok(runs)
}

/// Known constant diffusion per species, required by the probe recoveries.
fn probe_diffusion(params: &ModelParams) -> Result<Vec<f64>, CliError> {
    params
        .diffusion
        .iter()
        .enumerate()
        .map(|(s, d)| {
            d.as_constant().ok_or_else(|| {
                CliError::Config(format!(
                    "model.diffusion[{s}]: probe recoveries need constant diffusion"
                ))
            })
        })
        .collect()
}

fn run_invert_advection(
    config: &ScenarioConfig,
    sink: &mut ArtifactSink,
) -> Result<RunPayload, CliError> {
    let (bank_override, want_mu) = match &config.inversion {
        Some(InversionConfig::Mu { bank }) => (bank, true),
        Some(InversionConfig::Nu { bank }) => (bank, false),
        _ => {
            return Err(CliError::Config(
                "inversion: kind \"mu\" or \"nu\" required for the invert-advection verb".into(),
            ))
        }
    };
    let grid = config.build_grid()?;
    let params = config.model.build(&grid)?;
    let n = params.n_species;

    let (truth, kind) = match (&params.coupling, want_mu) {
        (Coupling::DriftKernels { mu, .. }, true) => (mu.clone(), "mu"),
        (Coupling::GradientPotentials { nu, .. }, false) => (nu.clone(), "nu"),
        (_, true) => {
            return Err(CliError::Config(
                "inversion mu: model.dynamics must be \"drift_kernels\"".into(),
            ))
        }
        (_, false) => {
            return Err(CliError::Config(
                "inversion nu: model.dynamics must be \"gradient_potentials\"".into(),
            ))
        }
    };
    let bank = resolve_bank(bank_override, config, n)?;
    let pc = config.probes.clone().unwrap_or_default();

    let t0 = Instant::now();
    let schedule = matrix_schedule(n, &grid)?;
    let runs = generate_runs(&params, &grid, schedule, &pc)?;
    sink.add_timing("probes", t0);

    let t1 = Instant::now();
    let bundle = MeasurementBundle::new(probe_diffusion(&params)?, runs);
    let recovery = if want_mu {
        recover_mu(&bundle, &bank)?
    } else {
        recover_nu(&bundle, &bank)?
    };
    sink.add_timing("recover", t1);

    Ok(RunPayload::CouplingMatrix(MatrixPayload {
        truth,
        report: MatrixReport::from_recovery(kind, &recovery),
    }))
}

/// The kernel bank an inversion works against: an explicit override, or the
/// model's own kernels.
fn resolve_bank(
    bank: &Option<Vec<Vec<KernelSpec>>>,
    config: &ScenarioConfig,
    n: usize,
) -> Result<Vec<Vec<KernelSpec>>, CliError> {
    let bank = match bank {
        Some(b) => b.clone(),
        None => config
            .model
            .kernels()
            .cloned()
            .ok_or_else(|| CliError::Config("inversion.bank: required (model has no kernels)".into()))?,
    };
    if bank.len() != n || bank.iter().any(|row| row.len() != n) {
        return Err(CliError::Config(format!(
            "inversion.bank: must be {n} x {n}"
        )));
    }
    Ok(bank)
}

fn run_invert_kernel(
    config: &ScenarioConfig,
    sink: &mut ArtifactSink,
) -> Result<RunPayload, CliError> {
    match &config.inversion {
        Some(InversionConfig::Normalization { bank }) => {
            run_normalization(config, sink, bank.clone())
        }
        Some(InversionConfig::W { row, col, cutoff }) => {
            run_kernel_transform(config, sink, *row, *col, *cutoff)
        }
        _ => Err(CliError::Config(
            "inversion: kind \"normalization\" or \"w\" required for the invert-kernel verb"
                .into(),
        )),
    }
}

fn run_normalization(
    config: &ScenarioConfig,
    sink: &mut ArtifactSink,
    bank: Vec<Vec<KernelSpec>>,
) -> Result<RunPayload, CliError> {
    let grid = config.build_grid()?;
    let params = config.model.build(&grid)?;
    let n = params.n_species;
    let Coupling::DriftKernels { mu, kernels } = &params.coupling else {
        return Err(CliError::Config(
            "inversion normalization: model.dynamics must be \"drift_kernels\"".into(),
        ));
    };
    if bank.len() != n || bank.iter().any(|row| row.len() != n) {
        return Err(CliError::Config(format!(
            "inversion.bank: must be {n} x {n}"
        )));
    }
    let mu = mu.clone();
    let truth: Vec<Vec<f64>> = kernels
        .iter()
        .map(|row| {
            row.iter()
                .map(|k| divergence_quadrature(k, &grid))
                .collect::<Result<Vec<f64>, CoreError>>()
        })
        .collect::<Result<_, _>>()?;
    let pc = config.probes.clone().unwrap_or_default();

    let t0 = Instant::now();
    let schedule = matrix_schedule(n, &grid)?;
    let runs = generate_runs(&params, &grid, schedule, &pc)?;
    sink.add_timing("probes", t0);

    let t1 = Instant::now();
    let bundle = MeasurementBundle::new(probe_diffusion(&params)?, runs);
    let recoveries = recover_normalization(&bundle, &bank, &mu)?;
    sink.add_timing("recover", t1);

    Ok(RunPayload::Normalization(NormalizationPayload {
        truth,
        report: NormalizationReport::from_recovery(&recoveries),
    }))
}

fn run_kernel_transform(
    config: &ScenarioConfig,
    sink: &mut ArtifactSink,
    row: usize,
    col: usize,
    cutoff: Option<i64>,
) -> Result<RunPayload, CliError> {
    let grid = config.build_grid()?;
    let params = config.model.build(&grid)?;
    let n = params.n_species;
    if row >= n || col >= n {
        return Err(CliError::Config(format!(
            "inversion.w: entry ({row}, {col}) out of range for {n} species"
        )));
    }
    let Coupling::GradientPotentials { nu, kernels } = &params.coupling else {
        return Err(CliError::Config(
            "inversion w: model.dynamics must be \"gradient_potentials\"".into(),
        ));
    };
    let coupling = nu[row][col];
    let truth_kernel = kernels[row][col].clone();
    let cutoff = cutoff.unwrap_or_else(|| default_sweep_cutoff(&grid));
    let pc = config.probes.clone().unwrap_or_default();

    let t0 = Instant::now();
    let schedule: Vec<ProbeSpec> = kernel_sweep_schedule(row, col, &grid, cutoff)?
        .into_iter()
        .map(|(_, probe)| probe)
        .collect();
    let runs = generate_runs(&params, &grid, schedule, &pc)?;
    sink.add_timing("probes", t0);

    let t1 = Instant::now();
    let bundle = MeasurementBundle::new(probe_diffusion(&params)?, runs);
    let recovery = recover_w(&bundle, row, col, coupling, cutoff)?;
    sink.add_timing("recover", t1);

    let truth_spectrum = truth_kernel.sample_scalar(&grid)?.to_spectrum();
    let report = KernelReport::from_recovery(&recovery);
    let mut truth_re = Vec::with_capacity(report.modes.len());
    let mut truth_im = Vec::with_capacity(report.modes.len());
    for mode in &report.modes {
        let c = truth_spectrum.coeff(&mode.mode);
        truth_re.push(c.re);
        truth_im.push(c.im);
    }

    let rel = "fields/w_recovered.grd1";
    let path = sink.path_for(rel)?;
    grd1::write_field(&path, &recovery.field, 0.0)?;
    sink.record_external(rel)?;
    let truth_field = truth_kernel.sample_scalar(&grid)?;
    let rel = "fields/w_truth.grd1";
    let path = sink.path_for(rel)?;
    grd1::write_field(&path, &truth_field, 0.0)?;
    sink.record_external(rel)?;

    Ok(RunPayload::KernelTransform(KernelPayload {
        truth_re,
        truth_im,
        report,
    }))
}
