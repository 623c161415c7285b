//! End-to-end checks of the `diropt` binary: exit codes, emitted files, and
//! the desk-scale runtime budget.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

fn diropt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_diropt"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("exp.cfg");
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn run_desk_scale_smoke_completes_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(
        dir.path(),
        &format!(
            "experiment = l1_ls\nn = 5\np = 8\nm_i = 12\nlambda = 0.2\nseed = 7\n\
             alphas = 0.02, 0.008\nalgorithms = pg_extrapush, subgradient_push\n\
             max_iter = 500\nreference_horizon = 500\nrecord_every = 5\noutput_dir = {}\n",
            out.display()
        ),
    );
    let start = Instant::now();
    let output = diropt()
        .args(["run", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    let elapsed = start.elapsed();
    assert!(
        output.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(
        elapsed.as_secs_f64() < 5.0,
        "desk-scale smoke took {elapsed:?}"
    );
    for name in [
        "manifest.txt",
        "summary.txt",
        "plot.gp",
        "graph.adj",
        "mixing.csv",
    ] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("pg_extrapush"));
    assert!(stdout.contains("trace_pg_extrapush_a0.02.csv"));
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "experiment = l1_ls\nbogus = 1\n");
    let output = diropt()
        .args(["run", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("bogus"), "stderr: {stderr}");

    let output = diropt()
        .args(["run", "/nonexistent/path.cfg"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn divergence_only_failures_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    // 0.02 converges on this fixture, 50 is far past critical.
    let cfg = write_config(
        dir.path(),
        &format!(
            "experiment = l1_ls\nn = 5\np = 8\nm_i = 12\nlambda = 0.2\nseed = 7\n\
             alphas = 0.02, 50\nalgorithms = pg_extrapush\nmax_iter = 300\n\
             reference_horizon = 300\nrecord_every = 5\noutput_dir = {}\n",
            out.display()
        ),
    );
    let output = diropt()
        .args(["run", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("DIVERGED"), "stdout: {stdout}");
}

#[test]
fn sweep_prints_table_and_critical_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(
        dir.path(),
        &format!(
            "experiment = l1_ls\nn = 5\np = 8\nm_i = 12\nlambda = 0.2\nseed = 7\n\
             alphas = 0.02\nalgorithms = pg_extrapush\nmax_iter = 2000\n\
             reference_horizon = 2000\nrecord_every = 5\ntolerance = 1e-4\noutput_dir = {}\n",
            out.display()
        ),
    );
    let output = diropt()
        .args(["sweep", cfg.to_str().unwrap(), "--grid", "0.01,0.05,1.0"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("alpha,outcome,detail"), "stdout: {stdout}");
    assert!(
        stdout.contains("critical step-size estimate"),
        "stdout: {stdout}"
    );
    assert!(out.join("sweep.csv").exists());
}

#[test]
fn gen_graph_emits_adjacency_and_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let adj = dir.path().join("g.adj");
    let mat = dir.path().join("g.csv");
    let output = diropt()
        .args([
            "gen-graph",
            "--n",
            "6",
            "--seed",
            "3",
            "--adjacency",
            adj.to_str().unwrap(),
            "--matrix",
            mat.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(
        stdout.starts_with("6\n"),
        "adjacency text must start with n"
    );
    assert!(stdout.contains("stationary distribution"));
    let text = std::fs::read_to_string(&adj).unwrap();
    let parsed = diropt::graph::DirectedNetwork::from_adjacency_text(&text).unwrap();
    assert_eq!(parsed.n(), 6);
    let matrix = diropt::graph::matrix_from_csv(&std::fs::read_to_string(&mat).unwrap()).unwrap();
    assert_eq!(matrix.nrows(), 6);

    // Missing required flags.
    let output = diropt().args(["gen-graph", "--n", "6"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn verify_suite_passes() {
    let output = diropt().args(["verify"]).output().unwrap();
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(output.status.success(), "stdout: {stdout}");
    assert_eq!(stdout.matches("PASS").count(), 3, "stdout: {stdout}");
    assert!(stdout.contains("mixing-rate bound"));
    assert!(stdout.contains("solver reductions"));
    assert!(stdout.contains("prox oracle equivalence"));
}

#[test]
fn output_dir_env_override_wins() {
    let dir = tempfile::tempdir().unwrap();
    let override_dir = dir.path().join("override");
    let cfg = write_config(
        dir.path(),
        &format!(
            "experiment = geometric_median\nn = 4\np = 3\nseed = 2\nalphas = 2\n\
             algorithms = p_extrapush\nmax_iter = 200\nreference_horizon = 200\n\
             record_every = 5\noutput_dir = {}\n",
            dir.path().join("ignored").display()
        ),
    );
    let output = diropt()
        .env("DIROPT_OUTPUT_DIR", override_dir.to_str().unwrap())
        .args(["run", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(override_dir.join("manifest.txt").exists());
    assert!(!dir.path().join("ignored").exists());
}
