//! End-to-end tests of the `aggrekit` binary: exit codes, artifact layout,
//! manifest identity, determinism across reruns and thread counts, and
//! CSV round-trips.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aggrekit::manifest::RunManifest;
use aggrekit::stages::RunRecord;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_aggrekit")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary launches")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

const CRV: &str = r#"{ "kind": "compact_radial_vector", "amplitude": 1.0, "radius": 0.2 }"#;

fn mu_config() -> String {
    format!(
        r#"{{
            "version": 1,
            "grid": {{ "dims": [32, 32] }},
            "model": {{
                "dynamics": "drift_kernels",
                "diffusion": [0.02, 0.04],
                "mu": [[0.3, -0.1], [0.2, 0.4]],
                "kernels": [[{CRV}, {CRV}], [{CRV}, {CRV}]]
            }},
            "probes": {{ "data": "emulated" }},
            "inversion": {{ "kind": "mu" }}
        }}"#
    )
}

fn manifest_of(out_root: &Path) -> (PathBuf, RunManifest) {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out_root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    dirs.sort();
    assert_eq!(dirs.len(), 1, "expected one run dir in {}", out_root.display());
    let path = dirs[0].join("manifest.json");
    let manifest = RunManifest::load(&path).unwrap();
    (dirs[0].clone(), manifest)
}

#[test]
fn mu_inversion_writes_hashed_artifacts_and_exact_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &mu_config());
    let out = tmp.path().join("out");

    let result = run(&[
        "invert-advection",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        result.status.success(),
        "stderr: {}",
        stderr_of(&result)
    );

    let (run_dir, manifest) = manifest_of(&out);
    // The run directory and every artifact hang off the config hash.
    assert!(run_dir
        .file_name()
        .unwrap()
        .to_str()
        .unwrap()
        .starts_with("invert-advection-"));
    assert_eq!(manifest.verb, "invert-advection");
    assert!(run_dir
        .file_name()
        .unwrap()
        .to_str()
        .unwrap()
        .ends_with(&manifest.config_hash[..16]));
    for name in ["config.json", "report.json", "tables/comparison.csv"] {
        assert!(
            manifest.artifacts.iter().any(|a| a.path == name),
            "missing {name}"
        );
        assert!(run_dir.join(name).exists(), "missing file {name}");
    }

    // report.json embeds the hash and the recovered matrix.
    let record: RunRecord =
        serde_json::from_str(&fs::read_to_string(run_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(record.config_hash, manifest.config_hash);
    let aggrekit::stages::RunPayload::CouplingMatrix(payload) = &record.payload else {
        panic!("expected a coupling-matrix payload");
    };
    let truth = [[0.3, -0.1], [0.2, 0.4]];
    for i in 0..2 {
        for j in 0..2 {
            assert!(
                (payload.report.values[i][j] - truth[i][j]).abs() < 1e-8,
                "entry ({i}, {j}): {} vs {}",
                payload.report.values[i][j],
                truth[i][j]
            );
        }
    }

    // The CSV parses back to exactly the reported values (17 digits).
    let csv = fs::read_to_string(run_dir.join("tables/comparison.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "quantity,truth,recovered,abs_err,rel_err");
    let mut n_rows = 0;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 5, "bad row: {line}");
        let name = cells[0];
        let i: usize = name[3..4].parse().unwrap();
        let j: usize = name[6..7].parse().unwrap();
        let truth_parsed: f64 = cells[1].parse().unwrap();
        let recovered_parsed: f64 = cells[2].parse().unwrap();
        assert_eq!(truth_parsed.to_bits(), truth[i][j].to_bits());
        assert_eq!(
            recovered_parsed.to_bits(),
            payload.report.values[i][j].to_bits()
        );
        n_rows += 1;
    }
    assert_eq!(n_rows, 4, "one row per coupling entry");
}

#[test]
fn reruns_and_thread_counts_reproduce_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &mu_config());
    let roots = ["a", "b", "c"];
    let threads = ["1", "4", "1"];
    let mut manifests = Vec::new();
    for (root, t) in roots.iter().zip(threads) {
        let out = tmp.path().join(root);
        let result = run(&[
            "invert-advection",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--threads",
            t,
        ]);
        assert!(result.status.success(), "stderr: {}", stderr_of(&result));
        manifests.push(manifest_of(&out));
    }
    let (first_dir, first) = &manifests[0];
    for (dir, manifest) in &manifests[1..] {
        assert_eq!(manifest.identity, first.identity, "identity drifted");
        // Identity covers the content hashes; verify the bytes agree too.
        for artifact in &first.artifacts {
            let a = fs::read(first_dir.join(&artifact.path)).unwrap();
            let b = fs::read(dir.join(&artifact.path)).unwrap();
            assert_eq!(a, b, "artifact {} differs", artifact.path);
        }
    }
}

#[test]
fn unknown_config_fields_exit_2_with_the_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        r#"{
            "version": 1,
            "grid": { "dims": [16, 16], "bogus": 3 },
            "model": { "dynamics": "heat", "diffusion": [0.05] }
        }"#,
    );
    let result = run(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(2));
    let err = stderr_of(&result);
    assert!(err.contains("grid"), "stderr: {err}");
    assert!(err.contains("bogus"), "stderr: {err}");
}

#[test]
fn missing_sections_and_wrong_kinds_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    // No simulation section for the simulate verb.
    let config = write_config(
        tmp.path(),
        r#"{
            "version": 1,
            "grid": { "dims": [16, 16] },
            "model": { "dynamics": "heat", "diffusion": [0.05] }
        }"#,
    );
    let out = tmp.path().join("out");
    let result = run(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(2));
    assert!(stderr_of(&result).contains("simulation"));

    // Advection verb pointed at a diffusion inversion.
    let config2 = tmp.path().join("config2.json");
    fs::write(
        &config2,
        r#"{
            "version": 1,
            "grid": { "dims": [16, 16] },
            "model": { "dynamics": "heat", "diffusion": [0.05] },
            "inversion": { "kind": "diffusion", "contrasts": [{ "shape": "uniform" }, { "shape": "uniform" }] }
        }"#,
    )
    .unwrap();
    let result = run(&[
        "invert-advection",
        "--config",
        config2.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(2));
    assert!(stderr_of(&result).contains("mu"));
}

#[test]
fn zero_coupling_kernel_request_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let crp = r#"{ "kind": "compact_radial_potential", "amplitude": 1.0, "radius": 0.2 }"#;
    let config = write_config(
        tmp.path(),
        &format!(
            r#"{{
                "version": 1,
                "grid": {{ "dims": [16, 16] }},
                "model": {{
                    "dynamics": "gradient_potentials",
                    "diffusion": [0.02, 0.03],
                    "nu": [[0.5, 0.0], [0.0, 0.4]],
                    "kernels": [[{crp}, {crp}], [{crp}, {crp}]]
                }},
                "probes": {{ "data": "emulated" }},
                "inversion": {{ "kind": "w", "row": 0, "col": 1 }}
            }}"#
        ),
    );
    let result = run(&[
        "invert-kernel",
        "--config",
        config.to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(4), "stderr: {}", stderr_of(&result));
    let err = stderr_of(&result);
    assert!(err.contains("(0, 1)"), "stderr: {err}");
}

#[test]
fn simulate_persists_snapshots_and_conserves_mass() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        r#"{
            "version": 1,
            "grid": { "dims": [16, 16] },
            "model": { "dynamics": "heat", "diffusion": [0.05] },
            "simulation": {
                "initial": [{ "shape": "cosine", "mode": [1, 0], "amplitude": 0.2, "baseline": 1.0 }],
                "t_final": 0.1,
                "dt": 0.005,
                "observe": { "center": [0.5, 0.5], "radius": 0.3, "times": [0.05] }
            }
        }"#,
    );
    let out = tmp.path().join("out");
    let result = run(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "stderr: {}", stderr_of(&result));

    let (run_dir, manifest) = manifest_of(&out);
    for name in [
        "fields/u0_0000.grd1",
        "fields/u0_0001.grd1",
        "observed/m0_0000.grd1",
        "observed/terminal0.grd1",
        "tables/masses.csv",
    ] {
        assert!(run_dir.join(name).exists(), "missing {name}");
        assert!(manifest.artifacts.iter().any(|a| a.path == name));
    }

    let csv = fs::read_to_string(run_dir.join("tables/masses.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "time,mass_0");
    let masses: Vec<f64> = lines
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(masses.len(), 3, "endpoints plus the observed time");
    assert!((masses[0] - 1.0).abs() < 1e-12);
    for m in &masses[1..] {
        assert!((m - masses[0]).abs() < 1e-12, "mass drifted");
    }
}

#[test]
fn report_verb_reemits_deleted_tables_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &mu_config());
    let out = tmp.path().join("out");
    let result = run(&[
        "invert-advection",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "stderr: {}", stderr_of(&result));
    let (run_dir, manifest) = manifest_of(&out);

    let table = run_dir.join("tables/comparison.csv");
    let original = fs::read(&table).unwrap();
    fs::remove_file(&table).unwrap();

    let result = run(&[
        "report",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "stderr: {}", stderr_of(&result));
    let reemitted = fs::read(&table).unwrap();
    assert_eq!(reemitted, original, "report verb changed the table bytes");

    // The manifest's recorded hash still matches the re-emitted file.
    let entry = manifest
        .artifacts
        .iter()
        .find(|a| a.path == "tables/comparison.csv")
        .unwrap();
    assert_eq!(entry.sha256, aggrekit::manifest::sha256_hex(&reemitted));
}

#[test]
fn report_without_a_prior_run_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &mu_config());
    let result = run(&[
        "report",
        "--config",
        config.to_str().unwrap(),
        "--out",
        tmp.path().join("empty").to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(2));
    assert!(stderr_of(&result).contains("no completed run"));
}

#[test]
fn out_root_defaults_to_the_environment_variable() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &mu_config());
    let out = tmp.path().join("env-root");
    let result = Command::new(bin())
        .args(["invert-advection", "--config", config.to_str().unwrap()])
        .env("AGGREKIT_OUT", &out)
        .output()
        .unwrap();
    assert!(result.status.success(), "stderr: {}", stderr_of(&result));
    let (run_dir, _) = manifest_of(&out);
    assert!(run_dir.starts_with(&out));
}
