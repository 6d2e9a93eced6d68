use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_spsa-lab");

fn canned(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn spsa(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("SPSA_LAB_WORKERS").output().expect("spawn spsa-lab")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_ENSEMBLE: &str = r#"
[seed]
master = 77

[objective]
kind = "trig_quadratic1d"

[step]
alpha0 = 1.0
rho = 0.6

[gain]
kind = "center_active"
eps_bullet = 0.1
theta_ctr = [0.0]
sigma_p = 1.0

[probe]
base = "uniform"
support = 1.0
mode = "zigzag"

[ensemble]
M = 6
N = 3000
N0 = 900
eps_grid = [0.05, 0.0707, 0.1]
statistic = "grad"
"#;

#[test]
fn rho_out_of_range_names_the_key_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let body = fs::read_to_string(canned("fig1_constant.toml")).unwrap().replace("rho = 0.6", "rho = 1.2");
    let cfg = write_config(dir.path(), "bad.toml", &body);
    let out = dir.path().join("out");
    let res = spsa(&["run", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("step.rho"), "{stderr}");
    assert!(!out.exists());
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let body = fs::read_to_string(canned("fig1_constant.toml")).unwrap().replace("rho = 0.6", "rho = 0.6\nbeta = 2");
    let cfg = write_config(dir.path(), "bad.toml", &body);
    let res = spsa(&["run", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("beta"));
}

#[test]
fn single_member_ensemble_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "m1.toml", &SMALL_ENSEMBLE.replace("M = 6", "M = 1"));
    let out = dir.path().join("out");
    let res = spsa(&["experiment", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("ensemble.M"));
    assert!(!out.exists());
}

#[test]
fn missing_config_is_an_io_error() {
    let res = spsa(&["run", "--config", "/nonexistent/spsa.toml"]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn ensemble_csv_does_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ens.toml", SMALL_ENSEMBLE);
    let one = dir.path().join("w1");
    let eight = dir.path().join("w8");
    let env = dir.path().join("wenv");
    assert_eq!(spsa(&["experiment", "--config", p(&cfg), "--out", p(&one), "--workers", "1"]).status.code(), Some(0));
    assert_eq!(spsa(&["experiment", "--config", p(&cfg), "--out", p(&eight), "--workers", "8"]).status.code(), Some(0));
    let res = Command::new(BIN)
        .args(["experiment", "--config", p(&cfg), "--out", p(&env)])
        .env("SPSA_LAB_WORKERS", "3")
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(0));

    let a = fs::read(one.join("ensemble.csv")).unwrap();
    assert_eq!(a, fs::read(eight.join("ensemble.csv")).unwrap());
    assert_eq!(a, fs::read(env.join("ensemble.csv")).unwrap());
    assert_eq!(fs::read(one.join("runs.csv")).unwrap(), fs::read(eight.join("runs.csv")).unwrap());

    let text = String::from_utf8(a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("eps_bullet,mode,M_effective,scaled_var_trace,mean_bias_norm"));
    assert_eq!(lines.count(), 6);

    let scaling = json(&one.join("scaling.json"));
    for mode in ["iid", "zigzag"] {
        for key in ["slope", "intercept", "r_squared"] {
            assert!(scaling[mode][key].is_number(), "{mode}.{key}");
        }
    }
}

#[test]
fn experiment_manifest_lists_per_run_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ens.toml", SMALL_ENSEMBLE);
    let out = dir.path().join("o");
    assert_eq!(spsa(&["experiment", "--config", p(&cfg), "--out", p(&out)]).status.code(), Some(0));
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["master_seed"], 77);
    let seeds = manifest["seeds"].to_string();
    let runs = fs::read_to_string(out.join("runs.csv")).unwrap();
    // 2 modes x 3 grid points x 6 runs, plus the header
    assert_eq!(runs.lines().count(), 37);
    for line in runs.lines().skip(1) {
        let seed = line.split(',').nth(3).unwrap();
        assert!(seeds.contains(seed), "seed {seed} missing from manifest");
    }
}

#[test]
fn constant_gain_run_trips_the_guard() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let res = spsa(&["run", "--config", p(&canned("fig1_constant.toml")), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(3));
    let report = json(&out.join("run.json"));
    assert!(report["diverged_at"].as_u64().is_some());
    let traj = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("n,theta_0,alpha,eps,objective\n"));
}

#[test]
fn active_gain_run_settles_near_the_optimum() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let res = spsa(&["run", "--config", p(&canned("fig1_active.toml")), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let report = json(&out.join("run.json"));
    assert!(report["diverged_at"].is_null());
    assert!(report["final_theta"][0].as_f64().unwrap().abs() < 1.0);
    let traj = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let last = traj.lines().last().unwrap();
    assert!(last.starts_with("100000,"));
}

#[test]
fn quadratic_equilibrium_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let res = spsa(&["equilibrium", "--config", p(&canned("meanflow_quadratic.toml")), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(0));
    let eq = json(&out.join("equilibrium.json"));
    assert!(eq["theta_star"][0].as_f64().unwrap().abs() < 1e-10);
    assert!((eq["eigs"][0].as_f64().unwrap() + 2.0).abs() < 1e-6);
    assert_eq!(eq["hurwitz"], true);
}

#[test]
fn sweep_on_an_unbiased_objective_reports_no_slope() {
    let dir = tempfile::tempdir().unwrap();
    let body = fs::read_to_string(canned("meanflow_quadratic.toml")).unwrap() + "sweep_eps = [0.025, 0.05, 0.1, 0.2]\n";
    let cfg = write_config(dir.path(), "q.toml", &body);
    let out = dir.path().join("o");
    let res = spsa(&["equilibrium", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let eq = json(&out.join("equilibrium.json"));
    assert!(eq["bias_slope"].is_null());
    assert_eq!(eq["sweep"]["bias"].as_array().unwrap().len(), 4);
}

#[test]
fn meanflow_grid_and_bias_slope() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let res = spsa(&["meanflow", "--config", p(&canned("meanflow_trig.toml")), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));

    let grid = fs::read_to_string(out.join("fbar_grid.csv")).unwrap();
    let mut lines = grid.lines();
    assert_eq!(lines.next(), Some("theta,fbar,stderr"));
    let thetas: Vec<f64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(thetas.len(), 101);
    assert_eq!(thetas[0], -3.0);
    assert_eq!(thetas[100], 3.0);
    assert!(thetas.windows(2).all(|w| w[1] > w[0]));

    let eq = json(&out.join("equilibrium.json"));
    let slope = eq["bias_slope"].as_f64().unwrap();
    assert!((1.7..=2.3).contains(&slope), "bias slope {slope}");
    assert!(out.join("mean_flow.csv").exists());
    assert!(out.join("gradient_flow.csv").exists());
}

#[test]
fn monte_carlo_method_is_rejected_for_equilibrium() {
    let dir = tempfile::tempdir().unwrap();
    let body = fs::read_to_string(canned("meanflow_quadratic.toml"))
        .unwrap()
        .replace("[meanflow]", "[meanflow]\nmethod = \"monte_carlo\"");
    let cfg = write_config(dir.path(), "mc.toml", &body);
    for cmd in ["equilibrium", "meanflow"] {
        let res = spsa(&[cmd, "--config", p(&cfg), "--out", p(&dir.path().join(cmd))]);
        assert_eq!(res.status.code(), Some(2), "{cmd}");
    }
}

#[test]
fn rerun_from_bundle_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ens.toml", SMALL_ENSEMBLE);
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    assert_eq!(spsa(&["experiment", "--config", p(&cfg), "--out", p(&first)]).status.code(), Some(0));
    let saved = first.join("config.toml");
    assert_eq!(spsa(&["experiment", "--config", p(&saved), "--out", p(&second)]).status.code(), Some(0));
    for name in ["ensemble.csv", "scaling.json", "runs.csv", "manifest.json"] {
        assert_eq!(fs::read(first.join(name)).unwrap(), fs::read(second.join(name)).unwrap(), "{name}");
    }

    let run_a = dir.path().join("ra");
    let run_b = dir.path().join("rb");
    assert_eq!(spsa(&["run", "--config", p(&canned("fig1_constant.toml")), "--out", p(&run_a)]).status.code(), Some(3));
    assert_eq!(spsa(&["run", "--config", p(&run_a.join("config.toml")), "--out", p(&run_b)]).status.code(), Some(3));
    for name in ["trajectory.csv", "run.json", "manifest.json"] {
        assert_eq!(fs::read(run_a.join(name)).unwrap(), fs::read(run_b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn seed_flag_changes_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    spsa(&["run", "--config", p(&canned("fig1_constant.toml")), "--out", p(&a), "--seed", "5"]);
    spsa(&["run", "--config", p(&canned("fig1_constant.toml")), "--out", p(&b), "--seed", "6"]);
    assert_ne!(fs::read(a.join("trajectory.csv")).unwrap(), fs::read(b.join("trajectory.csv")).unwrap());
    assert_eq!(json(&a.join("manifest.json"))["master_seed"], 5);
}

#[test]
fn probe_check_reports_moments_and_regeneration() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let res =
        spsa(&["probe-check", "--config", p(&canned("probe_zigzag.toml")), "--out", p(&out), "--samples", "20000"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let report = json(&out.join("probe_check.json"));
    assert_eq!(report["third_moment_ok"], true);
    assert_eq!(report["covariance_ok"], true);
    assert!(report["regeneration"]["p_value"].as_f64().unwrap() > 0.0);
}
