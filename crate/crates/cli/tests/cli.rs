use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hjp_core::sim::{self, ScenarioConfig};

fn hjp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hjp"))
        .current_dir(dir)
        .env_remove("HJP_CACHE_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// Default scenario on coarse grids so builds take a fraction of a second.
fn coarse_config(dir: &Path, d: f64) -> PathBuf {
    let mut c = sim::scenario_form_platoon();
    c.evaluators.highway.counts = [41, 21];
    c.evaluators.join.counts = [41, 21];
    c.evaluators.safety.counts = [21, 11, 7];
    c.evaluators.max_slabs = 40;
    c.safety.d = d;
    let p = dir.join(format!("coarse_{d}.toml"));
    fs::write(&p, c.to_toml()).unwrap();
    p
}

fn hjvf_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".hjvf"))
        .collect();
    v.sort();
    v
}

#[test]
fn usage_errors_exit_with_two() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&hjp(t.path(), &["compute", "--no-such-flag"])), 2);
    assert_eq!(code(&hjp(t.path(), &["frobnicate"])), 2);
    assert_eq!(code(&hjp(t.path(), &[])), 2);
    assert_eq!(code(&hjp(t.path(), &["validate", "--suite", "everything"])), 2);
    assert_eq!(code(&hjp(t.path(), &["export", "set-slice", "--free", "0", "--at", "0,0,0,0,0,0"])), 2);
    assert_eq!(code(&hjp(t.path(), &["--help"])), 0);
}

#[test]
fn shipped_default_config_matches_builtin() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let c = ScenarioConfig::load(&path).unwrap();
    assert_eq!(c, sim::scenario_form_platoon());
}

#[test]
fn compute_writes_six_files_and_reuses_them() {
    let t = tempfile::tempdir().unwrap();
    let cfg = coarse_config(t.path(), 2.0);
    let cfg = cfg.to_str().unwrap();
    let first = hjp(t.path(), &["compute", "--config", cfg, "--cache-dir", "c"]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let files = hjvf_files(&t.path().join("c"));
    assert_eq!(files.len(), 6, "{files:?}");
    assert!(t.path().join("c/manifest.toml").exists());
    let before: Vec<Vec<u8>> = files.iter().map(|f| fs::read(t.path().join("c").join(f)).unwrap()).collect();

    let second = hjp(t.path(), &["compute", "--config", cfg, "--cache-dir", "c"]);
    assert_eq!(code(&second), 0);
    assert_eq!(stdout(&second).matches("up to date").count(), 3, "{}", stdout(&second));
    let after: Vec<Vec<u8>> = files.iter().map(|f| fs::read(t.path().join("c").join(f)).unwrap()).collect();
    assert_eq!(before, after);

    // a different collision distance only touches the safety set
    let cfg2 = coarse_config(t.path(), 2.5);
    let third = hjp(t.path(), &["compute", "--config", cfg2.to_str().unwrap(), "--cache-dir", "c"]);
    let out = stdout(&third);
    assert_eq!(code(&third), 0);
    assert!(out.contains("highway: up to date"), "{out}");
    assert!(out.contains("join: up to date"), "{out}");
    assert!(out.contains("safety: built"), "{out}");
}

#[test]
fn simulate_needs_matching_caches() {
    let t = tempfile::tempdir().unwrap();
    let cfg = coarse_config(t.path(), 2.0);
    let cfg = cfg.to_str().unwrap();
    let missing = hjp(t.path(), &["simulate", "--config", cfg, "--cache-dir", "c"]);
    assert_eq!(code(&missing), 1);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("hjp compute"));

    assert_eq!(code(&hjp(t.path(), &["compute", "--config", cfg, "--cache-dir", "c"])), 0);
    // built for d = 2, asked to run with d = 2.5
    let other = coarse_config(t.path(), 2.5);
    let stale = hjp(t.path(), &["simulate", "--config", other.to_str().unwrap(), "--cache-dir", "c"]);
    assert_eq!(code(&stale), 1);
    assert!(String::from_utf8_lossy(&stale.stderr).contains("different parameters"));

    // a modified cache file is refused
    let victim = t.path().join("c").join(&hjvf_files(&t.path().join("c"))[0]);
    let mut bytes = fs::read(&victim).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(&victim, bytes).unwrap();
    let tampered = hjp(t.path(), &["simulate", "--config", cfg, "--cache-dir", "c"]);
    assert_eq!(code(&tampered), 1);

    let unknown = hjp(t.path(), &["simulate", "no_such_scenario", "--cache-dir", "c"]);
    assert_eq!(code(&unknown), 1);
}

#[test]
fn cache_dir_falls_back_to_environment() {
    let t = tempfile::tempdir().unwrap();
    let cfg = coarse_config(t.path(), 2.0);
    let out = Command::new(env!("CARGO_BIN_EXE_hjp"))
        .current_dir(t.path())
        .env("HJP_CACHE_DIR", t.path().join("from_env"))
        .args(["compute", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert_eq!(hjvf_files(&t.path().join("from_env")).len(), 6);
}

#[test]
fn default_pipeline_end_to_end() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    assert_eq!(code(&hjp(p, &["compute"])), 0);

    let sim = hjp(p, &["simulate", "malfunction"]);
    let out = stdout(&sim);
    assert_eq!(code(&sim), 0, "{out}");
    assert!(out.contains("collisions: 0"), "{out}");
    assert!(out.contains("altitude changes: 0"), "{out}");
    let summary = fs::read_to_string(p.join("out/malfunction.summary.toml")).unwrap();
    assert!(summary.contains("altitude_changes = 0"));

    let intr = hjp(p, &["simulate", "intruder"]);
    assert_eq!(code(&intr), 0);
    assert!(stdout(&intr).contains("rejoined"), "{}", stdout(&intr));

    let traj = hjp(p, &["export", "trajectory", "--trace", "out/malfunction.csv"]);
    let out = stdout(&traj);
    assert_eq!(code(&traj), 0, "{out}");
    assert!(out.contains("5 polylines"), "{out}");
    let csv = fs::read_to_string(p.join("out/malfunction_trajectories.csv")).unwrap();
    let first3 = csv.lines().find(|l| l.starts_with("3,")).unwrap();
    assert!(first3.starts_with("3,0,") && first3.contains(",faulty,"), "{first3}");

    // relative velocity zero, own velocity at highway speed
    let slice = hjp(p, &["export", "set-slice", "--free", "0,2", "--at", "0,0,0,0,3,3", "--tau", "1.5"]);
    assert_eq!(code(&slice), 0, "{}", String::from_utf8_lossy(&slice.stderr));
    let grid = fs::read_to_string(p.join("out/safety_slice.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 81 * 81);
    let contour = fs::read_to_string(p.join("out/safety_slice_contour.csv")).unwrap();
    assert!(contour.lines().count() > 10);

    let outside = hjp(p, &["export", "set-slice", "--free", "0,2", "--at", "0,0,0,0,30,3"]);
    assert_eq!(code(&outside), 1);
    assert!(String::from_utf8_lossy(&outside.stderr).contains("outside the grid range"));

    let v = hjp(p, &["validate", "--suite", "reach", "--seed", "7"]);
    let out = stdout(&v);
    assert_eq!(code(&v), 0, "{out}");
    assert!(out.contains("0 captures"), "{out}");
}
