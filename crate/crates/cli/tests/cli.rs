use std::path::Path;
use std::process::{Command, Output};

fn mfgnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfgnet"))
        .args(args)
        .env("APAC_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const ANALYTIC: &str = "experiment = \"analytic\"\ndim = 2\nnu = 1.0\nmonitor_size = 256\nlog_interval = 5\n";

#[test]
fn train_writes_history_snapshot_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "analytic2d.toml", ANALYTIC);
    let out_dir = dir.path().join("run");
    let out = mfgnet(&[
        "train",
        "--config",
        &cfg,
        "--iterations",
        "10",
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let history = std::fs::read_to_string(out_dir.join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iter,l0,lt,lhjb,monitor_residual,rel_error_phi,rel_error_rho"
    );
    assert_eq!(lines.count(), 3);
    assert!(out_dir.join("checkpoint.bin").exists());
    let snapshot = std::fs::read_to_string(out_dir.join("config.resolved.toml")).unwrap();
    assert!(snapshot.contains("iterations = 10"));
    assert!(!out_dir.join(".lock").exists());
}

#[test]
fn zero_iterations_writes_initial_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", ANALYTIC);
    let out_dir = dir.path().join("run");
    let out = mfgnet(&["train", "--config", &cfg, "--iterations", "0", "--output-dir", out_dir.to_str().unwrap()]);
    assert!(out.status.success());
    let history = std::fs::read_to_string(out_dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);
    assert!(history.lines().nth(1).unwrap().starts_with("0,,,,"));
}

#[test]
fn missing_nu_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "experiment = \"obstacle\"\ndim = 2\n");
    let out = mfgnet(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`nu`"));
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", ANALYTIC);
    let out_dir = dir.path().join("run");
    std::fs::create_dir_all(&out_dir).unwrap();
    std::fs::write(out_dir.join(".lock"), "1").unwrap();
    let out = mfgnet(&["train", "--config", &cfg, "--iterations", "0", "--output-dir", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn export_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", ANALYTIC);
    let out_dir = dir.path().join("run");
    let run = out_dir.to_str().unwrap();
    assert!(mfgnet(&["train", "--config", &cfg, "--iterations", "2", "--output-dir", run])
        .status
        .success());
    let ckpt = out_dir.join("checkpoint.bin");
    let ckpt = ckpt.to_str().unwrap();

    let csv = dir.path().join("traj.csv");
    let out = mfgnet(&[
        "export-trajectories",
        "--checkpoint",
        ckpt,
        "--config",
        &cfg,
        "--n-samples",
        "100",
        "--n-times",
        "16",
        "--output",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "sample_id,t,x_1,x_2");
    assert_eq!(lines.count(), 1600);

    let out = mfgnet(&["validate", "--checkpoint", ckpt, "--config", &cfg, "--output-dir", run]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("evaluation points: 16384"), "{stdout}");
    let history = std::fs::read_to_string(out_dir.join("history.csv")).unwrap();
    let last = history.lines().last().unwrap();
    assert!(last.starts_with("2,,,,,"), "{last}");
}

#[test]
fn export_rejects_dimension_mismatch_and_validate_rejects_other_experiments() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", ANALYTIC);
    let run = dir.path().join("run");
    assert!(mfgnet(&["train", "--config", &cfg, "--iterations", "0", "--output-dir", run.to_str().unwrap()])
        .status
        .success());
    let ckpt = run.join("checkpoint.bin");
    let other = write_config(dir.path(), "o.toml", "experiment = \"obstacle\"\ndim = 3\nnu = 0.0\n");
    let out = mfgnet(&["export-trajectories", "--checkpoint", ckpt.to_str().unwrap(), "--config", &other]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension"));
    let out = mfgnet(&["validate", "--checkpoint", ckpt.to_str().unwrap(), "--config", &other]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("analytic"));
}

#[test]
fn list_experiments_names_all() {
    let out = mfgnet(&["list-experiments"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["nu_sweep", "obstacle", "congestion", "bottleneck", "symmetric", "analytic", "quadcopter"] {
        assert!(text.contains(name), "{name}");
    }
}
