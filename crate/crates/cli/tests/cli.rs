use std::path::Path;
use std::process::Command;

fn batchot(args: &[&str], config: &str, dir: &Path) -> std::process::Output {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_batchot"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .env_remove("BATCHOT_OUT")
        .env_remove("BATCHOT_THREADS")
        .output()
        .unwrap()
}

const SMALL_CONTOUR: &str = "[binary]\ncontour_ns = [1, 5, 10]\ncontour_ks = [1, 4]\ncompensation_k_max = 5\n";

#[test]
fn contour_run_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = batchot(
            &["binary_contour", "--seed", "3", "--out", out.to_str().unwrap()],
            SMALL_CONTOUR,
            tmp.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["binary_contour.csv", "binary_compensation.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "complete");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["binary"]["contour_ks"], serde_json::json!([1, 4]));
    assert!(m["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
    let csv = std::fs::read_to_string(a.join("binary_contour.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "n,k,error");
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn seeded_runs_match_and_differ() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = "[plan1d]\nks = [1, 4]\nn_pairs = 2000\nrank_ks = [2]\nrank_mc = 1000\nquantile_nodes = 1000\n";
    let run = |seed: &str, name: &str| {
        let out = tmp.path().join(name);
        let o = batchot(&["plan1d", "--seed", seed, "--out", out.to_str().unwrap()], cfg, tmp.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out.join("plan1d_histogram.csv")).unwrap()
    };
    let a = run("1", "a");
    assert_eq!(a, run("1", "b"));
    assert_ne!(a, run("2", "c"));
    let m = std::fs::read_to_string(tmp.path().join("a/manifest.json")).unwrap();
    assert!(m.contains("entropic"));
}

#[test]
fn unknown_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = batchot(&["rates", "--out", out.to_str().unwrap()], "[rates]\nbudget = 4\n", tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("budget"));
}

#[test]
fn invalid_value_and_budget_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = batchot(&["error_grid", "--out", out.to_str().unwrap()], "[error_grid]\nns = []\n", tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = batchot(
        &["rates", "--out", out.to_str().unwrap()],
        "max_solver_calls = 100\n[rates]\natoms = [3]\n",
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let o = batchot(&["rates", "--threads", "0", "--out", out.to_str().unwrap()], "", tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dual_failure_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let cfg = "[cells]\nresolution = 3\ndual_steps = 10\ndual_audit = 10000\ndual_tolerance = 1e-6\n";
    let o = batchot(&["cells", "--out", out.to_str().unwrap()], cfg, tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let m = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(m.contains("\"failed\""));
}

#[test]
fn env_sets_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, SMALL_CONTOUR).unwrap();
    let out = tmp.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_batchot"))
        .args(["binary_contour", "--config"])
        .arg(&cfg)
        .env("BATCHOT_OUT", &out)
        .env("BATCHOT_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success());
    let m = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(m.contains("\"threads\": 1"));
}

#[test]
fn small_cells_run_counts_solves() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let cfg = "max_solver_calls = 1000\n[cells]\nks = [1, 3]\nresolution = 5\nreplicas = 50\naudit_samples = 20\n";
    let o = batchot(&["cells", "--out", out.to_str().unwrap()], cfg, tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["planned_solver_calls"], 50);
    assert!(m["solver_invocations"].as_u64().unwrap() <= 50);
    let raster = std::fs::read_to_string(out.join("cells_k3.csv")).unwrap();
    assert_eq!(raster.lines().count(), 26);
}
