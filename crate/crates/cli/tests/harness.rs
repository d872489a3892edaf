//! Harness contracts: strict config handling, reproducible outputs,
//! thread-count invariance, manifest verification, exit-code mapping.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use emfluct::config::ExperimentConfig;
use emfluct::{emit_summary, run_experiment, verify_manifest, VerifyStatus};

fn config_with(dir: &Path, body: &str) -> ExperimentConfig {
    let text = format!("{body}\noutput_dir = {}\n", dir.display());
    ExperimentConfig::parse(&text).unwrap()
}

fn data_checksums(manifest: &emfluct::RunManifest) -> BTreeMap<String, String> {
    manifest
        .outputs
        .iter()
        .map(|o| (o.path.clone(), o.sha256.clone()))
        .collect()
}

#[test]
fn minimal_clt_run_emits_ensemble_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with(
        dir.path(),
        "experiment = clt\neta = 0.2\nn_replicas = 10\nmaster_seed = 5\n",
    );
    let manifest = run_experiment(&cfg).unwrap();
    let names: Vec<&str> = manifest.outputs.iter().map(|o| o.path.as_str()).collect();
    assert!(names.contains(&"ensemble.jsonl"));
    assert!(names.contains(&"clt_summary.csv"));
    assert!(dir.path().join("manifest.json").exists());

    // 10 replicas: ensemble file has 10 JSON lines with finite statistics
    let body = fs::read_to_string(dir.path().join("ensemble.jsonl")).unwrap();
    assert_eq!(body.lines().count(), 10);
    for line in body.lines() {
        assert!(line.starts_with('{') && line.ends_with('}'));
        assert!(line.contains("\"w_eta\":"));
    }

    let mut buf = Vec::new();
    emit_summary(&manifest, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.contains("experiment: clt"));
}

#[test]
fn same_config_twice_identical_checksums() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let body = "experiment = tail_ratio\neta = 0.2\nn_replicas = 400\nmaster_seed = 11\nx_grid = 0.5, 1.0\n";
    let m1 = run_experiment(&config_with(d1.path(), body)).unwrap();
    let m2 = run_experiment(&config_with(d2.path(), body)).unwrap();
    assert_eq!(data_checksums(&m1), data_checksums(&m2));
}

#[test]
fn thread_count_never_changes_outputs() {
    let mut sums = Vec::new();
    for threads in [1usize, 4, 16] {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "experiment = clt\neta = 0.125\nn_replicas = 600\nmaster_seed = 3\nthreads = {threads}\n"
        );
        let manifest = run_experiment(&config_with(dir.path(), &body)).unwrap();
        sums.push(data_checksums(&manifest));
    }
    assert_eq!(sums[0], sums[1]);
    assert_eq!(sums[0], sums[2]);
}

#[test]
fn verify_detects_deletion_and_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with(
        dir.path(),
        "experiment = clt\neta = 0.2\nn_replicas = 10\nmaster_seed = 1\n",
    );
    run_experiment(&cfg).unwrap();
    let manifest_path = dir.path().join("manifest.json");

    let all_ok = verify_manifest(&manifest_path).unwrap();
    assert!(all_ok.iter().all(|(_, s)| *s == VerifyStatus::Ok));

    let victim = dir.path().join("clt_summary.csv");
    let original = fs::read(&victim).unwrap();
    fs::write(&victim, b"tampered\n").unwrap();
    let tampered = verify_manifest(&manifest_path).unwrap();
    assert!(tampered
        .iter()
        .any(|(p, s)| p == "clt_summary.csv" && matches!(s, VerifyStatus::Mismatch { .. })));

    fs::write(&victim, original).unwrap();
    fs::remove_file(dir.path().join("ensemble.jsonl")).unwrap();
    let missing = verify_manifest(&manifest_path).unwrap();
    assert!(missing
        .iter()
        .any(|(p, s)| p == "ensemble.jsonl" && *s == VerifyStatus::Missing));
}

#[test]
fn unknown_key_maps_to_exit_code_two() {
    let err = ExperimentConfig::parse("experiment = clt\netaa = 0.1\n").unwrap_err();
    assert!(err.0.contains("etaa"));
    let harness_err: emfluct::HarnessError = err.into();
    assert_eq!(harness_err.exit_code(), 2);
}

#[test]
fn capability_error_maps_to_exit_code_four() {
    let err: emfluct::HarnessError =
        emfluct_core::Error::MissingThirdDerivative { term: "R_eta_4" }.into();
    assert_eq!(err.exit_code(), 4);
    let err: emfluct::HarnessError = emfluct_core::Error::DivergenceBudget {
        diverged: 5,
        total: 100,
    }
    .into();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn decompose_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with(
        dir.path(),
        "experiment = decompose\neta = 0.1\nobservable = quadratic\nn_trajectories = 5\nmaster_seed = 2\n",
    );
    let manifest = run_experiment(&cfg).unwrap();
    assert!(manifest.checks.iter().any(|c| c.name == "identity_residual_rounding_level" && c.pass));
    assert!(manifest.checks.iter().any(|c| c.name == "structural_zeros_r4_r6" && c.pass));
    let body = fs::read_to_string(dir.path().join("decomposition.jsonl")).unwrap();
    assert_eq!(body.lines().count(), 5);
    // every line is parseable JSON with the full term list
    for line in body.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["r_parts"].as_array().unwrap().len(), 6);
    }
}

#[test]
fn stein_residual_run_analytic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with(
        dir.path(),
        "experiment = stein_residual\nobservable = quadratic\nmaster_seed = 1\n",
    );
    let manifest = run_experiment(&cfg).unwrap();
    assert!(manifest
        .checks
        .iter()
        .any(|c| c.name == "analytic_residual_machine_zero" && c.pass));
    let body = fs::read_to_string(dir.path().join("stein_residual.csv")).unwrap();
    assert_eq!(body.lines().count(), 62); // header + 61 grid points
}

#[test]
fn concentration_g_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with(
        dir.path(),
        "experiment = concentration_g\neta = 0.1\nn_replicas = 500\nmaster_seed = 9\n",
    );
    let manifest = run_experiment(&cfg).unwrap();
    assert!(manifest.stats.contains_key("g_sum_slope"));
    assert!(dir.path().join("concentration_g.csv").exists());
}

#[test]
fn missing_eta_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with(dir.path(), "experiment = clt\nn_replicas = 10\n");
    let err = run_experiment(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn bias_curve_reference_oracle_for_double_well() {
    // no closed form: pi(f) comes from the fine-step reference chain
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with(
        dir.path(),
        "experiment = bias_curve\nmodel = double_well\nobservable = quadratic\neta_list = 0.2, 0.1\ndraws = 500\nmaster_seed = 6\n",
    );
    let manifest = run_experiment(&cfg).unwrap();
    assert!(manifest.stats.contains_key("max_ratio_to_sqrt_eta"));
    let body = fs::read_to_string(dir.path().join("bias_curve.csv")).unwrap();
    assert_eq!(body.lines().count(), 3);
}

#[test]
fn stein_residual_tanh_runs_numeric_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with(
        dir.path(),
        "experiment = stein_residual\nobservable = tanh\ngrid_min = -1\ngrid_max = 1\ngrid_points = 3\nmaster_seed = 12\n",
    );
    let manifest = run_experiment(&cfg).unwrap();
    let names: Vec<&str> = manifest.outputs.iter().map(|o| o.path.as_str()).collect();
    assert!(names.contains(&"phi_estimates.jsonl"));
    assert!(names.contains(&"stein_residual.csv"));
    // estimates carry full provenance
    let body = fs::read_to_string(dir.path().join("phi_estimates.jsonl")).unwrap();
    for line in body.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["value", "std_err", "t_max", "dt", "replicas", "master_seed", "algorithm"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
    assert!(manifest
        .checks
        .iter()
        .any(|c| c.name == "numeric_residual_reported"));
}

#[test]
fn binary_run_verify_and_exit_codes() {
    use std::process::Command;
    let bin = env!("CARGO_BIN_EXE_emfluct");
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config_path = dir.path().join("clt.conf");
    fs::write(
        &config_path,
        "experiment = clt\neta = 0.2\nn_replicas = 10\nmaster_seed = 5\n",
    )
    .unwrap();

    let run = Command::new(bin)
        .args(["run", "--config"])
        .arg(&config_path)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(run.status.success(), "stderr: {}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("experiment: clt"));

    let verify = Command::new(bin)
        .args(["verify", "--manifest"])
        .arg(out_dir.join("manifest.json"))
        .output()
        .unwrap();
    assert!(verify.status.success());

    // unknown key: exit code 2 naming the key
    let bad_path = dir.path().join("bad.conf");
    fs::write(&bad_path, "experiment = clt\netaa = 0.1\n").unwrap();
    let bad = Command::new(bin)
        .args(["run", "--config"])
        .arg(&bad_path)
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("etaa"));

    // deleting an output makes verify fail
    fs::remove_file(out_dir.join("ensemble.jsonl")).unwrap();
    let verify = Command::new(bin)
        .args(["verify", "--manifest"])
        .arg(out_dir.join("manifest.json"))
        .output()
        .unwrap();
    assert_eq!(verify.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&verify.stdout).contains("MISSING"));
}
