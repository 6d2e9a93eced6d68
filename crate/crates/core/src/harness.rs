//! Command implementations behind the `spsa-lab` binary.
//!
//! Every command validates the whole configuration before touching the output
//! directory, writes its data files, then a canonical copy of the
//! configuration (`config.toml`) and a `manifest.json` listing the config
//! hash, tool version, seeds and a SHA-256 of every file written.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::ensemble::{fit_cells, EnsembleCell, ScalingFit};
use crate::error::{Error, Result};
use crate::exploration::{moment_diagnostics, regeneration_test, BaseNoise, ProbeGenerator, ProbeMode};
use crate::meanflow::{bias_sweep, find_equilibrium, integrate_gradient_flow, integrate_mean_flow, FlowTrajectory};
use crate::seeding::derive_seed;
use crate::spsa::run;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const IO: i32 = 1;
    pub const VALIDATION: i32 = 2;
    pub const DIVERGED: i32 = 3;
    pub const NOT_CONVERGED: i32 = 4;
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::Dimension { .. } | Error::FloorViolated { .. } => {
            exit::VALIDATION
        }
        Error::Diverged(_) | Error::NonFinite { .. } => exit::DIVERGED,
        Error::NotConverged { .. } => exit::NOT_CONVERGED,
        Error::Io(_) | Error::Serialize(_) => exit::IO,
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

/// Result of a command that ran to completion (possibly with a guard trip).
#[derive(Debug, Clone)]
pub struct Outcome {
    pub exit_code: i32,
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub summary: String,
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = overrides.seed {
        cfg.seed.master = seed;
    }
    if let Some(out) = &overrides.out {
        cfg.output_dir = Some(out.to_string_lossy().into_owned());
    }
    if let Some(w) = overrides.workers {
        cfg.workers = Some(w);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn workers(cfg: &ExperimentConfig) -> usize {
    cfg.workers.unwrap_or(1).max(1)
}

/// 17 significant digits; round-trips every double.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

struct Bundle {
    dir: PathBuf,
    files: Vec<(String, String)>,
}

impl Bundle {
    fn create(cfg: &ExperimentConfig) -> Result<Self> {
        let dir = PathBuf::from(
            cfg.output_dir
                .clone()
                .ok_or_else(|| Error::config("output_dir", "no output directory: set `output_dir` or pass --out"))?,
        );
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.dir.join(name), contents)?;
        let digest = Sha256::digest(contents.as_bytes());
        self.files.push((name.to_string(), digest.iter().map(|b| format!("{b:02x}")).collect()));
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
        text.push('\n');
        self.write(name, &text)
    }

    fn finish(
        mut self,
        cfg: &ExperimentConfig,
        command: &str,
        seeds: Value,
        exit_code: i32,
        summary: String,
    ) -> Result<Outcome> {
        self.write("config.toml", &cfg.reproducible_toml()?)?;
        let manifest = json!({
            "tool": "spsa-lab",
            "version": VERSION,
            "command": command,
            "config_hash": cfg.config_hash()?,
            "master_seed": cfg.seed.master,
            "seeds": seeds,
            "files": self.files.iter().map(|(n, h)| json!({"name": n, "sha256": h})).collect::<Vec<_>>(),
        });
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serialize(e.to_string()))?;
        text.push('\n');
        fs::write(self.dir.join("manifest.json"), text)?;
        let mut files: Vec<PathBuf> = self.files.iter().map(|(n, _)| self.dir.join(n)).collect();
        files.push(self.dir.join("manifest.json"));
        Ok(Outcome { exit_code, out_dir: self.dir, files, summary })
    }
}

/// Single trajectory: `trajectory.csv` plus `run.json`. Exit code 3 when the
/// divergence guard fired.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (run_cfg, guard) = cfg.run_config()?;
    let obj = cfg.build_objective()?;
    let record = run(&run_cfg, obj.as_ref(), &guard)?;
    let mut bundle = Bundle::create(cfg)?;

    let d = run_cfg.theta0.len();
    let mut csv = String::from("n");
    for i in 0..d {
        write!(csv, ",theta_{i}").unwrap();
    }
    csv.push_str(",alpha,eps,objective\n");
    for (k, n) in record.indices.iter().enumerate() {
        write!(csv, "{n}").unwrap();
        for v in &record.thetas[k] {
            write!(csv, ",{}", fmt_f64(*v)).unwrap();
        }
        let objective = record.objective_trace.get(k).copied().unwrap_or(f64::NAN);
        writeln!(csv, ",{},{},{}", fmt_f64(record.alphas[k]), fmt_f64(record.gains[k]), fmt_f64(objective)).unwrap();
    }
    bundle.write("trajectory.csv", &csv)?;

    let final_theta = record.final_theta().unwrap_or(&[]).to_vec();
    bundle.write_json(
        "run.json",
        &json!({
            "theta0": run_cfg.theta0,
            "final_theta": final_theta,
            "horizon": record.horizon(),
            "diverged_at": record.diverged_at,
            "guard_threshold": guard.threshold(),
            "probe_seed": run_cfg.noise.seed,
        }),
    )?;
    let (code, summary) = match record.diverged_at {
        Some(n) => (exit::DIVERGED, format!("divergence guard fired at iteration {n}")),
        None => (exit::OK, format!("completed {} iterations, final theta {:?}", record.horizon(), final_theta)),
    };
    let seeds = json!({"probe": run_cfg.noise.seed, "theta0": derive_seed(cfg.seed.master, &[1])});
    bundle.finish(cfg, "run", seeds, code, summary)
}

fn scaling_entry(fit: &Result<ScalingFit>) -> Value {
    match fit {
        Ok(fit) => json!({
            "slope": fit.loglog_slope,
            "intercept": fit.loglog_intercept,
            "r_squared": fit.r_squared,
            "eps_values": fit.eps_values,
            "scaled_vars": fit.scaled_vars,
        }),
        Err(e) => json!({"error": e.to_string()}),
    }
}

/// The `eps_grid x mode` matrix: `ensemble.csv`, `scaling.json`, `runs.csv`.
pub fn cmd_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (setup, modes) = cfg.ensemble_setup()?;
    let cells = crate::ensemble::run_matrix(&setup, &modes, workers(cfg))?;
    let mut bundle = Bundle::create(cfg)?;

    let mut csv = String::from("eps_bullet,mode,M_effective,scaled_var_trace,mean_bias_norm\n");
    for c in &cells {
        writeln!(
            csv,
            "{},{},{},{},{}",
            fmt_f64(c.eps_bullet),
            c.mode.label(),
            c.m_effective,
            fmt_f64(c.scaled_var_trace()),
            fmt_f64(c.mean_bias_norm())
        )
        .unwrap();
    }
    bundle.write("ensemble.csv", &csv)?;

    let fits: Vec<(ProbeMode, Result<ScalingFit>)> = modes
        .iter()
        .map(|m| {
            let of_mode: Vec<EnsembleCell> = cells.iter().filter(|c| c.mode == *m).cloned().collect();
            (*m, fit_cells(&of_mode))
        })
        .collect();
    let mut scaling = serde_json::Map::new();
    for (mode, fit) in &fits {
        scaling.insert(mode.label().to_string(), scaling_entry(fit));
    }
    bundle.write_json("scaling.json", &Value::Object(scaling))?;

    let d = setup.dim();
    let mut runs = String::from("mode,eps_index,run_index,seed");
    for i in 0..d {
        write!(runs, ",theta0_{i}").unwrap();
    }
    for i in 0..d {
        write!(runs, ",final_theta_{i}").unwrap();
    }
    for i in 0..d {
        write!(runs, ",bias_{i}").unwrap();
    }
    runs.push_str(",diverged_at\n");
    let mut seeds = Vec::new();
    for c in &cells {
        for r in &c.runs {
            write!(runs, "{},{},{},{}", c.mode.label(), c.eps_index, r.run_index, r.seed).unwrap();
            for v in r.theta0.iter().chain(&r.final_theta) {
                write!(runs, ",{}", fmt_f64(*v)).unwrap();
            }
            let bias = r.bias.clone().unwrap_or_else(|| vec![f64::NAN; d]);
            for v in &bias {
                write!(runs, ",{}", fmt_f64(*v)).unwrap();
            }
            writeln!(runs, ",{}", r.diverged_at.map(|n| n.to_string()).unwrap_or_default()).unwrap();
            seeds.push(json!([c.mode.label(), c.eps_index, r.run_index, r.seed]));
        }
    }
    bundle.write("runs.csv", &runs)?;

    let excluded: usize = cells.iter().map(|c| c.runs.len() - c.m_effective).sum();
    let summary = format!(
        "{} cells, {} runs excluded by the divergence guard; scaling: {}",
        cells.len(),
        excluded,
        fits.iter()
            .map(|(m, fit)| match fit {
                Ok(fit) => format!("{} slope {:.3}", m.label(), fit.loglog_slope),
                Err(_) => format!("{} slope n/a", m.label()),
            })
            .collect::<Vec<_>>()
            .join(", ")
    );
    bundle.finish(cfg, "experiment", Value::Array(seeds), exit::OK, summary)
}

fn flow_csv(traj: &FlowTrajectory) -> String {
    let d = traj.states.first().map_or(0, Vec::len);
    let mut csv = String::from("t");
    for i in 0..d {
        write!(csv, ",theta_{i}").unwrap();
    }
    csv.push('\n');
    for (t, s) in traj.times.iter().zip(&traj.states) {
        csv.push_str(&fmt_f64(*t));
        for v in s {
            write!(csv, ",{}", fmt_f64(*v)).unwrap();
        }
        csv.push('\n');
    }
    csv
}

fn equilibrium_json(cfg: &ExperimentConfig) -> Result<Value> {
    let mf = cfg.meanflow_section()?;
    let ev = cfg.mean_field_evaluator()?;
    let d = ev.dim();
    let init = mf.theta_init.clone().unwrap_or_else(|| vec![0.0; d]);
    let rep = find_equilibrium(&ev, &init, mf.tol)?;
    let mut out = json!({
        "theta_star": rep.theta_star,
        "residual": rep.residual_norm,
        "eigs": rep.eigen_real_parts,
        "hurwitz": rep.is_hurwitz(),
        "jacobian": rep.jacobian,
        "bias": {"to_opt": rep.bias_to_opt, "to_origin": rep.bias_to_origin},
        "gain_at_star": rep.gain_at_star,
        "iterations": rep.iterations,
        "method": ev.method(),
    });
    if let Some(eps) = &mf.sweep_eps {
        let reference = ev.objective().known_optimum().ok_or_else(|| {
            Error::config("meanflow.sweep_eps", "objective has no known optimum to measure bias against")
        })?;
        let sweep = bias_sweep(&ev, eps, &init, &reference, mf.tol)?;
        let fit = sweep.fit.as_ref();
        out["bias_slope"] = json!(fit.map(|f| f.loglog_slope));
        out["sweep"] = json!({
            "eps": sweep.eps_values,
            "theta_star": sweep.theta_stars,
            "bias": sweep.biases,
            "slope": fit.map(|f| f.loglog_slope),
            "intercept": fit.map(|f| f.loglog_intercept),
            "r_squared": fit.map(|f| f.r_squared),
        });
    }
    Ok(out)
}

/// Mean-field grid, mean and gradient flows, and the equilibrium report.
pub fn cmd_meanflow(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mf = cfg.meanflow_section()?;
    let ev = cfg.mean_field_evaluator()?;
    if !ev.is_deterministic() {
        return Err(Error::config("meanflow.method", "mean flow and equilibrium need a deterministic method"));
    }
    let d = ev.dim();
    let mut grid = String::new();
    if d == 1 {
        grid.push_str("theta,fbar,stderr\n");
    } else {
        grid.push('t');
        for prefix in ["theta", "fbar", "stderr"] {
            for i in 0..d {
                write!(grid, ",{prefix}_{i}").unwrap();
            }
        }
        grid.push('\n');
    }
    let n = mf.grid_points;
    for k in 0..n {
        let t = if k + 1 == n {
            mf.grid_max
        } else {
            mf.grid_min + (mf.grid_max - mf.grid_min) * k as f64 / (n - 1) as f64
        };
        let theta = vec![t; d];
        let est = ev.fbar(&theta)?;
        if d > 1 {
            write!(grid, "{},", fmt_f64(t)).unwrap();
        }
        let cols: Vec<String> = theta.iter().chain(&est.value).chain(&est.stderr).map(|v| fmt_f64(*v)).collect();
        grid.push_str(&cols.join(","));
        grid.push('\n');
    }
    let theta0 = mf.flow_theta0.clone().unwrap_or_else(|| vec![mf.grid_max; d]);
    let mean_flow = integrate_mean_flow(&ev, &theta0, mf.t_end, mf.dt)?;
    let grad_flow = integrate_gradient_flow(ev.objective().as_ref(), &theta0, mf.t_end, mf.dt)?;
    let report = equilibrium_json(cfg)?;

    let mut bundle = Bundle::create(cfg)?;
    bundle.write("fbar_grid.csv", &grid)?;
    bundle.write("mean_flow.csv", &flow_csv(&mean_flow))?;
    bundle.write("gradient_flow.csv", &flow_csv(&grad_flow))?;
    bundle.write_json("equilibrium.json", &report)?;
    let summary = format!("theta* = {}, residual {}", report["theta_star"], report["residual"]);
    let seeds = json!({"monte_carlo": derive_seed(cfg.seed.master, &[2])});
    bundle.finish(cfg, "meanflow", seeds, exit::OK, summary)
}

/// Equilibrium report only. Exit code 4 when the solver fails.
pub fn cmd_equilibrium(cfg: &ExperimentConfig) -> Result<Outcome> {
    let ev = cfg.mean_field_evaluator()?;
    if !ev.is_deterministic() {
        return Err(Error::config("meanflow.method", "equilibrium finding needs a deterministic method"));
    }
    let report = equilibrium_json(cfg)?;
    let mut bundle = Bundle::create(cfg)?;
    bundle.write_json("equilibrium.json", &report)?;
    let summary = format!("theta* = {}, eigenvalue real parts {}", report["theta_star"], report["eigs"]);
    bundle.finish(cfg, "equilibrium", json!({}), exit::OK, summary)
}

/// Moment and regeneration diagnostics for the configured probe law.
pub fn cmd_probe_check(cfg: &ExperimentConfig, samples: usize) -> Result<Outcome> {
    let law = cfg.base_law()?;
    let mode = cfg.probe_mode()?;
    let dim = match cfg.objective {
        Some(_) => cfg.build_objective()?.dim(),
        None => 1,
    };
    let seed = derive_seed(cfg.seed.master, &[3]);
    let base = BaseNoise::new(law, dim, seed)?;
    let mut gen = ProbeGenerator::new(base, mode)?;
    let closed = gen.probe_covariance();
    let moments = moment_diagnostics(&mut gen, samples)?;
    let regeneration = match mode {
        ProbeMode::ZigZag { .. } => {
            let b = law.support_bound();
            let p = regeneration_test(&gen, &vec![b; dim], &vec![-b; dim], samples.min(20_000))?;
            json!({"p_value": p, "passed": p > 0.01})
        }
        ProbeMode::Iid => Value::Null,
    };
    let report = json!({
        "law": law,
        "mode": mode,
        "dim": dim,
        "moments": moments,
        "closed_form_covariance": (0..dim).map(|i| (0..dim).map(|j| closed[(i, j)]).collect::<Vec<_>>()).collect::<Vec<_>>(),
        "third_moment_ok": moments.third_moment_max_abs < 0.02,
        "covariance_ok": moments.covariance_error < 0.02,
        "regeneration": regeneration,
    });
    let mut bundle = Bundle::create(cfg)?;
    bundle.write_json("probe_check.json", &report)?;
    let summary = format!(
        "max |third moment| {:.4}, covariance error {:.4}",
        moments.third_moment_max_abs, moments.covariance_error
    );
    bundle.finish(cfg, "probe-check", json!({"probe": seed, "samples": samples}), exit::OK, summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_numbers_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 1e300, std::f64::consts::PI] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("step.rho", "x")), 2);
        assert_eq!(exit_code(&Error::Diverged(3)), 3);
        assert_eq!(exit_code(&Error::NotConverged { iterations: 1, residual: 1.0, last: vec![] }), 4);
    }
}
