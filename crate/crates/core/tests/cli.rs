use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["snls"];
    argv.extend_from_slice(args);
    snls::cli::run(argv)
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn simulate_plane_wave_keeps_mass() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = fixture("plane_wave.toml");
    assert_eq!(run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out, "--snapshots"]), 0);
    let csv = fs::read_to_string(dir.path().join("diagnostics_0.csv")).unwrap();
    let mass = column(&csv, "mass");
    assert_eq!(mass.len(), 101);
    assert!(mass.iter().all(|m| (m - mass[0]).abs() <= 1e-10 * mass[0]));
    assert!(dir.path().join("final_0.field").exists());
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn gradcheck_deterministic_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = fixture("tracking.toml");
    assert_eq!(run(&["gradcheck", "--config", cfg.to_str().unwrap(), "--out", out, "--directions", "2"]), 0);
    let csv = fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    let errors = column(
        &csv.lines()
            .enumerate()
            .filter(|(i, l)| *i == 0 || !l.split(',').nth(3).unwrap().is_empty())
            .map(|(_, l)| format!("{l}\n"))
            .collect::<String>(),
        "rel_error",
    );
    assert!(errors.iter().all(|e| *e <= 1e-3), "{errors:?}");
}

#[test]
fn dualcheck_residual_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = fixture("tracking.toml");
    assert_eq!(run(&["dualcheck", "--config", cfg.to_str().unwrap(), "--out", out, "--dt", "0.01", "--levels", "2"]), 0);
    let csv = fs::read_to_string(dir.path().join("dualcheck.csv")).unwrap();
    let r = column(&csv, "residual");
    assert_eq!(r.len(), 2);
    assert!(r[1] < r[0]);
}

#[test]
fn optimize_writes_history_and_control() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = fixture("tracking.toml");
    assert_eq!(run(&["optimize", "--config", cfg.to_str().unwrap(), "--out", out, "--max-iters", "5"]), 0);
    let iters = fs::read_to_string(dir.path().join("iters.csv")).unwrap();
    assert!(iters.starts_with("n,cost,stderr,grad_norm,rho,pmp_residual\n"));
    let cost = column(&iters, "cost");
    assert!(cost.windows(2).all(|w| w[1] < w[0]));
    let control = fs::read_to_string(dir.path().join("control.csv")).unwrap();
    assert!(control.starts_with("k,t,u_1\n"));
    assert_eq!(control.lines().count(), 101);
}

#[test]
fn missing_gamma2_under_optimize_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixture("tracking.toml")).unwrap();
    let cfg = dir.path().join("p.toml");
    fs::write(&cfg, text.replace("gamma2 = 0.1\n", "")).unwrap();
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_snls"))
        .args(["optimize", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cost.gamma2"));
    // simulate does not need it
    assert_eq!(run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
}

#[test]
fn unknown_config_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixture("tracking.toml")).unwrap();
    let cfg = dir.path().join("p.toml");
    fs::write(&cfg, text.replace("[grid]\n", "[grid]\nspacing = 0.1\n")).unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 1);
    assert_eq!(run(&["simulate", "--config", "/nonexistent.toml", "--out", out.to_str().unwrap()]), 1);
    assert_eq!(run(&["frobnicate"]), 1);
}

#[test]
fn blow_up_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixture("tracking.toml")).unwrap();
    let cfg = dir.path().join("p.toml");
    let text = text
        .replace("initial = \"gaussian width=1.0\"", "initial = \"gaussian width=1.0 amplitude=1e150\"")
        .replace("normalize = true", "");
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_snls"))
        .args(["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("numerical abort"));
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn outputs_identical_across_thread_counts_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("tracking_noisy.toml");
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let common = ["--config", cfg, "--paths", "6", "--dt", "0.02"];
    let mut args = vec!["optimize", "--max-iters", "3", "--threads", "1", "--out", a.to_str().unwrap()];
    args.extend_from_slice(&common);
    assert_eq!(run(&args), 0);
    let mut args = vec!["optimize", "--max-iters", "3", "--threads", "3", "--out", b.to_str().unwrap()];
    args.extend_from_slice(&common);
    assert_eq!(run(&args), 0);
    let fa = csv_files(&a);
    assert_eq!(fa.len(), 3);
    assert_eq!(fa, csv_files(&b));

    let c = dir.path().join("c");
    let manifest = a.join("manifest.json");
    assert_eq!(run(&["replay", "--manifest", manifest.to_str().unwrap(), "--out", c.to_str().unwrap(), "--threads", "2"]), 0);
    assert_eq!(fa, csv_files(&c));
}

#[test]
fn threads_env_var_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = fixture("tracking_noisy.toml");
    let o = Command::new(env!("CARGO_BIN_EXE_snls"))
        .env("SNLS_THREADS", "2")
        .args(["simulate", "--config", cfg.to_str().unwrap(), "--paths", "3", "--dt", "0.05", "--threads", "1"])
        .args(["--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["threads"], 2);
    assert_eq!(m["paths"], 3);
    let bad = Command::new(env!("CARGO_BIN_EXE_snls"))
        .env("SNLS_THREADS", "many")
        .args(["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
