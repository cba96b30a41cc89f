//! End-to-end CLI checks: exit-code contract, artifact layout, overrides.

use std::path::{Path, PathBuf};
use std::process::Command;

fn nlfk() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nlfk"))
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// A quick single-level variant of the heat problem for CLI mechanics.
const SMOKE: &str = r#"
[problem]
name = "smoke"
state_dim = 1
noise_dim = 1
horizon = 1.0
ellipticity = 1.0

[problem.terminal]
function = "quadratic"
lipschitz = 12.0
growth = 7.0

[problem.driver]
form = "zero"

[[problem.control]]
diffusion = { form = "constant", values = [1.0] }

[solve]
seed = 7
solvers = ["dpp", "fd"]
test_points = [{ t = 0.0, x = [0.0] }]

[solve.dpp]
time_steps = 10
box_lo = [-6.0]
box_hi = [6.0]
spacing = 0.1

[solve.fd]
box_lo = [-6.0]
box_hi = [6.0]
spacing = 0.1

[checks]
suites = ["operator", "oracle_agreement", "determinism"]

[output]
dir = "out_unused"
write_fields = true
"#;

#[test]
fn run_writes_artifacts_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("smoke.cfg");
    std::fs::write(&cfg, SMOKE).unwrap();
    let out = tmp.path().join("artifacts");
    let result = nlfk().args(["run"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(result.status.success(), "stdout: {stdout}\nstderr: {}", String::from_utf8_lossy(&result.stderr));
    assert!(stdout.contains("overall: PASS"));
    for f in ["points.csv", "checks.csv", "orders.csv", "report.txt", "dpp_field.csv", "fd_field.csv", "fd_residuals.csv"] {
        assert!(out.join(f).exists(), "missing artifact {f}");
    }
    let points = std::fs::read_to_string(out.join("points.csv")).unwrap();
    assert!(points.lines().count() >= 3, "points.csv rows: {points}");
}

#[test]
fn nlfk_out_env_overrides_the_config_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("smoke.cfg");
    std::fs::write(&cfg, SMOKE).unwrap();
    let out = tmp.path().join("from_env");
    let result = nlfk().args(["run"]).arg(&cfg).env("NLFK_OUT", &out).output().unwrap();
    assert!(result.status.success());
    assert!(out.join("report.txt").exists());
}

#[test]
fn seed_flag_changes_nothing_for_quadrature_but_is_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("smoke.cfg");
    std::fs::write(&cfg, SMOKE).unwrap();
    let out = tmp.path().join("o");
    let result = nlfk()
        .args(["run"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "123", "--jobs", "2"])
        .output()
        .unwrap();
    assert!(result.status.success());
}

#[test]
fn cfl_violation_exits_three_and_names_the_admissible_step() {
    let tmp = tempfile::tempdir().unwrap();
    let result = nlfk()
        .args(["run"])
        .arg(config_path("cfl_violation.cfg"))
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(result.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("CFL"), "stderr: {stderr}");
    assert!(stderr.contains("admissible"), "stderr: {stderr}");
    assert!(stderr.contains("800"), "stderr should name the admissible step count: {stderr}");
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    // syntax error
    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "[problem").unwrap();
    let result = nlfk().args(["run"]).arg(&bad).output().unwrap();
    assert_eq!(result.status.code(), Some(2));
    // unknown check suite
    let unknown = tmp.path().join("unknown.cfg");
    std::fs::write(&unknown, SMOKE.replace("\"operator\"", "\"made_up\"")).unwrap();
    let result = nlfk().args(["run"]).arg(&unknown).output().unwrap();
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("made_up"), "stderr: {stderr}");
    // missing file
    let result = nlfk().args(["run", "no_such_file.cfg"]).output().unwrap();
    assert_eq!(result.status.code(), Some(2));
    // missing subcommand
    let result = nlfk().output().unwrap();
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn failed_check_exits_one() {
    // an affine drift with a deliberately understated Lipschitz bound makes
    // the assumptions suite fail
    let bad = SMOKE.replace(
        "diffusion = { form = \"constant\", values = [1.0] }",
        "drift = { form = \"affine\", linear = [[-1.0]] }\nlipschitz = 0.5\ndiffusion = { form = \"constant\", values = [1.0] }",
    );
    let bad = bad.replace("suites = [\"operator\", \"oracle_agreement\", \"determinism\"]", "suites = [\"assumptions\"]");
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad_bound.cfg");
    std::fs::write(&cfg, bad).unwrap();
    let out = tmp.path().join("o");
    let result = nlfk().args(["run"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(result.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("[FAIL] assumptions"), "stdout: {stdout}");
}

#[test]
fn list_checks_prints_the_registry() {
    let result = nlfk().arg("--list-checks").output().unwrap();
    assert!(result.status.success());
    let stdout = String::from_utf8_lossy(&result.stdout);
    for name in ["assumptions", "envelope", "dpp_consistency", "determinism"] {
        assert!(stdout.contains(name), "missing {name} in: {stdout}");
    }
}

#[test]
fn table_command_runs_the_zero_noise_study() {
    let cfg_text = format!(
        "{SMOKE}\n[table]\nkinds = [\"bsde_time\"]\n[table.bsde_time]\nrate = -0.1\nterminal = 1.0\nsteps = [100, 1000, 10000]\n"
    );
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("table.cfg");
    std::fs::write(&cfg, cfg_text).unwrap();
    let out = tmp.path().join("o");
    let result = nlfk().args(["table"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert!(result.status.success(), "stderr: {}", String::from_utf8_lossy(&result.stderr));
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("zero-noise backward Euler"), "stdout: {stdout}");
    assert!(out.join("orders_table.csv").exists());
    assert!(out.join("table.txt").exists());
}
