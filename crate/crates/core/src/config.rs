//! Experiment configuration.
//!
//! A TOML file with one table per concern (`step`, `gain`, `probe`,
//! `objective`, `run`, `ensemble`, `meanflow`, `seed`). Unknown keys are
//! rejected. The whole file is validated before any command runs, and every
//! validation error names the offending key.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{BiasStatistic, EnsembleConfig, EnsembleSetup};
use crate::error::{Error, Result};
use crate::exploration::{BaseLaw, BaseNoise, ProbeMode};
use crate::meanflow::{FbarMethod, MeanFieldEvaluator};
use crate::objectives::{Builtin, Objective};
use crate::schedules::{ExplorationGain, StepSizeSchedule};
use crate::seeding::{derive_seed, rng_from_seed};
use crate::spsa::{Algorithm, DivergenceGuard, RunConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    /// Worker threads for ensembles. Does not affect results.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default)]
    pub seed: SeedSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<ObjectiveSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<StepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<GainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meanflow: Option<MeanflowSection>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSection {
    #[serde(default)]
    pub master: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Quadratic1d,
    TrigQuadratic1d,
    QuadraticNd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    pub kind: ObjectiveKind,
    /// Row-major matrix for `quadratic_nd`.
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSection {
    #[serde(default = "one")]
    pub alpha0: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainKind {
    Constant,
    Decaying,
    CenterActive,
    ObjectiveActive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSection {
    pub kind: GainKind,
    pub eps_bullet: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_ctr: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obj_floor: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    Rademacher,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Iid,
    Zigzag,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub base: BaseKind,
    /// Half-width `a` of the uniform law.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<f64>,
    pub mode: ModeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub varsigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(rename = "N")]
    pub n: u64,
    #[serde(default = "default_box")]
    pub theta0_box: [f64; 2],
    /// Explicit initial condition; drawn from `theta0_box` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
    #[serde(default = "one_u64")]
    pub stride: u64,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default = "default_guard")]
    pub guard_threshold: f64,
    #[serde(default = "yes")]
    pub record_objective: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: u64,
    #[serde(rename = "N0")]
    pub n0: u64,
    #[serde(default = "default_box")]
    pub theta0_box: [f64; 2],
    pub eps_grid: Vec<f64>,
    #[serde(default = "default_statistic")]
    pub statistic: StatisticKind,
    #[serde(default = "default_modes")]
    pub modes: Vec<ModeKind>,
    #[serde(default = "default_ensemble_guard")]
    pub guard_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticKind {
    Grad,
    Fbar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanflowSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<FbarMethod>,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "default_grid_min")]
    pub grid_min: f64,
    #[serde(default = "default_grid_max")]
    pub grid_max: f64,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_theta0: Option<Vec<f64>>,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_init: Option<Vec<f64>>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_eps: Option<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}
fn one_u64() -> u64 {
    1
}
fn yes() -> bool {
    true
}
fn default_rho() -> f64 {
    0.6
}
fn default_box() -> [f64; 2] {
    [-10.0, 10.0]
}
fn default_algorithm() -> Algorithm {
    Algorithm::OneMeasurement
}
fn default_guard() -> f64 {
    DivergenceGuard::DEFAULT_THRESHOLD
}
fn default_ensemble_guard() -> f64 {
    1e100
}
fn default_statistic() -> StatisticKind {
    StatisticKind::Grad
}
fn default_modes() -> Vec<ModeKind> {
    vec![ModeKind::Iid, ModeKind::Zigzag]
}
fn default_mc_samples() -> usize {
    100_000
}
fn default_grid_min() -> f64 {
    -3.0
}
fn default_grid_max() -> f64 {
    3.0
}
fn default_grid_points() -> usize {
    101
}
fn default_t_end() -> f64 {
    10.0
}
fn default_dt() -> f64 {
    1e-3
}
fn default_tol() -> f64 {
    1e-10
}

fn missing(section: &str) -> Error {
    Error::config(section, "section is required by this command")
}

fn unused(key: &str, why: &str) -> Error {
    Error::config(key, format!("not used {why}"))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let key = offending_key(e.message()).unwrap_or_else(|| "<file>".into());
            Error::config(key, e.to_string().trim_end())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Build every section that is present so all errors surface before a run.
    pub fn validate(&self) -> Result<()> {
        if let Some(0) = self.workers {
            return Err(Error::config("workers", "must be at least 1"));
        }
        let obj = self.objective.as_ref().map(|_| self.build_objective()).transpose()?;
        if self.step.is_some() {
            self.step_schedule()?;
        }
        if let Some(obj) = &obj {
            if self.gain.is_some() {
                self.exploration_gain(obj.clone())?;
            }
        }
        if self.probe.is_some() {
            self.base_law()?;
            self.probe_mode()?;
        }
        if let Some(run) = &self.run {
            check_box("run.theta0_box", run.theta0_box)?;
            if run.stride == 0 {
                return Err(Error::config("run.stride", "must be at least 1"));
            }
            DivergenceGuard::new(run.guard_threshold)?;
            if let (Some(theta0), Some(obj)) = (&run.theta0, &obj) {
                if theta0.len() != obj.dim() {
                    return Err(Error::config("run.theta0", format!("expected {} entries", obj.dim())));
                }
            }
        }
        if let Some(ens) = &self.ensemble {
            self.ensemble_config()?.validate()?;
            if ens.modes.is_empty() {
                return Err(Error::config("ensemble.modes", "at least one mode is required"));
            }
            if ens.guard_threshold.is_nan() || ens.guard_threshold < 1e3 {
                return Err(Error::config("ensemble.guard_threshold", "must be at least 1e3"));
            }
        }
        if let Some(mf) = &self.meanflow {
            if mf.grid_points < 2 {
                return Err(Error::config("meanflow.grid_points", "need at least 2 points"));
            }
            if mf.grid_min.partial_cmp(&mf.grid_max) != Some(std::cmp::Ordering::Less) {
                return Err(Error::config("meanflow.grid_max", "must exceed grid_min"));
            }
            if !(mf.dt > 0.0 && mf.dt.is_finite()) {
                return Err(Error::config("meanflow.dt", "must be positive"));
            }
            if !(mf.t_end >= 0.0 && mf.t_end.is_finite()) {
                return Err(Error::config("meanflow.t_end", "must be nonnegative"));
            }
            if !(1e-12..=1e-6).contains(&mf.tol) {
                return Err(Error::config("meanflow.tol", "must lie in [1e-12, 1e-6]"));
            }
            if mf.mc_samples < 2 {
                return Err(Error::config("meanflow.mc_samples", "need at least 2 samples"));
            }
            if let Some(sweep) = &mf.sweep_eps {
                if sweep.len() < 3 || sweep.iter().any(|e| e.is_nan() || *e <= 0.0) {
                    return Err(Error::config("meanflow.sweep_eps", "need at least 3 positive values"));
                }
            }
            if let Some(obj) = &obj {
                for (key, v) in [("meanflow.flow_theta0", &mf.flow_theta0), ("meanflow.theta_init", &mf.theta_init)] {
                    if v.as_ref().is_some_and(|v| v.len() != obj.dim()) {
                        return Err(Error::config(key, format!("expected {} entries", obj.dim())));
                    }
                }
                if self.gain.is_some() && self.probe.is_some() {
                    self.mean_field_evaluator()?;
                }
            }
        }
        Ok(())
    }

    /// Canonical TOML text: defaults filled in, fixed key order.
    pub fn canonical_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    /// Canonical form without the output location and worker count, neither
    /// of which affects results. This is what an output bundle stores.
    pub fn reproducible_toml(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = None;
        c.workers = None;
        c.canonical_toml()
    }

    /// SHA-256 of [`Self::reproducible_toml`].
    pub fn config_hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.reproducible_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn build_objective(&self) -> Result<Arc<dyn Objective>> {
        let sec = self.objective.as_ref().ok_or_else(|| missing("objective"))?;
        let obj = match sec.kind {
            ObjectiveKind::Quadratic1d | ObjectiveKind::TrigQuadratic1d if sec.q.is_some() => {
                return Err(unused("objective.Q", "by one-dimensional objectives"));
            }
            ObjectiveKind::Quadratic1d => Builtin::Quadratic1D,
            ObjectiveKind::TrigQuadratic1d => Builtin::TrigQuadratic1D,
            ObjectiveKind::QuadraticNd => {
                let q = sec.q.as_ref().ok_or_else(|| Error::config("objective.Q", "required for quadratic_nd"))?;
                let d = (q.len() as f64).sqrt().round() as usize;
                if d * d != q.len() {
                    return Err(Error::config("objective.Q", "length must be a perfect square"));
                }
                Builtin::quadratic_nd(nalgebra::DMatrix::from_row_slice(d, d, q))?
            }
        };
        Ok(Arc::new(obj))
    }

    pub fn step_schedule(&self) -> Result<StepSizeSchedule> {
        let s = self.step.as_ref().ok_or_else(|| missing("step"))?;
        StepSizeSchedule::new(s.alpha0, s.rho)
    }

    pub fn exploration_gain(&self, obj: Arc<dyn Objective>) -> Result<ExplorationGain> {
        let g = self.gain.as_ref().ok_or_else(|| missing("gain"))?;
        let d = obj.dim();
        let only = |present: bool, key: &str, kinds: &str| if present { Err(unused(key, kinds)) } else { Ok(()) };
        match g.kind {
            GainKind::Constant => {
                only(g.kappa.is_some(), "gain.kappa", "by a constant gain")?;
                only(g.theta_ctr.is_some() || g.sigma_p.is_some(), "gain.theta_ctr", "by a constant gain")?;
                only(g.obj_floor.is_some(), "gain.obj_floor", "by a constant gain")?;
                ExplorationGain::constant(g.eps_bullet)
            }
            GainKind::Decaying => {
                only(g.theta_ctr.is_some() || g.sigma_p.is_some(), "gain.theta_ctr", "by a decaying gain")?;
                only(g.obj_floor.is_some(), "gain.obj_floor", "by a decaying gain")?;
                let kappa = g.kappa.ok_or_else(|| Error::config("gain.kappa", "required for a decaying gain"))?;
                ExplorationGain::decaying(g.eps_bullet, kappa)
            }
            GainKind::CenterActive => {
                only(g.kappa.is_some(), "gain.kappa", "by an active gain")?;
                only(g.obj_floor.is_some(), "gain.obj_floor", "by a center-active gain")?;
                let ctr = g.theta_ctr.clone().unwrap_or_else(|| vec![0.0; d]);
                if ctr.len() != d {
                    return Err(Error::config("gain.theta_ctr", format!("expected {d} entries")));
                }
                ExplorationGain::center_active(g.eps_bullet, ctr, g.sigma_p.unwrap_or(1.0))
            }
            GainKind::ObjectiveActive => {
                only(g.kappa.is_some(), "gain.kappa", "by an active gain")?;
                only(g.theta_ctr.is_some() || g.sigma_p.is_some(), "gain.theta_ctr", "by an objective-active gain")?;
                let floor = match (g.obj_floor, obj.known_floor()) {
                    (Some(f), _) | (None, Some(f)) => f,
                    (None, None) => {
                        return Err(Error::config("gain.obj_floor", "required: objective declares no floor"))
                    }
                };
                ExplorationGain::objective_active(g.eps_bullet, floor, obj)
            }
        }
    }

    pub fn base_law(&self) -> Result<BaseLaw> {
        let p = self.probe.as_ref().ok_or_else(|| missing("probe"))?;
        match p.base {
            BaseKind::Rademacher => {
                if p.support.is_some() {
                    return Err(unused("probe.support", "by Rademacher noise"));
                }
                Ok(BaseLaw::Rademacher)
            }
            BaseKind::Uniform => {
                let law = BaseLaw::Uniform { half_width: p.support.unwrap_or(1.0) };
                BaseNoise::new(law, 1, 0)?;
                Ok(law)
            }
        }
    }

    pub fn probe_mode(&self) -> Result<ProbeMode> {
        let p = self.probe.as_ref().ok_or_else(|| missing("probe"))?;
        self.mode_of(p.mode)
    }

    fn mode_of(&self, kind: ModeKind) -> Result<ProbeMode> {
        let varsigma = self.probe.as_ref().and_then(|p| p.varsigma);
        match kind {
            ModeKind::Iid => Ok(ProbeMode::Iid),
            ModeKind::Zigzag => {
                let v = varsigma.unwrap_or(std::f64::consts::FRAC_1_SQRT_2);
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::config("probe.varsigma", format!("must be positive, got {v}")));
                }
                Ok(ProbeMode::ZigZag { varsigma: v })
            }
        }
    }

    /// Single-trajectory configuration. The probe seed and, when not given,
    /// `theta_0` derive from the master seed.
    pub fn run_config(&self) -> Result<(RunConfig, DivergenceGuard)> {
        let run = self.run.as_ref().ok_or_else(|| missing("run"))?;
        let obj = self.build_objective()?;
        let d = obj.dim();
        let master = self.seed.master;
        let theta0 = match &run.theta0 {
            Some(t) => t.clone(),
            None => {
                let mut rng = rng_from_seed(derive_seed(master, &[1]));
                let [lo, hi] = run.theta0_box;
                (0..d).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
            }
        };
        let cfg = RunConfig {
            algorithm: run.algorithm,
            n_iters: run.n,
            theta0,
            stride: run.stride,
            step: self.step_schedule()?,
            gain: self.exploration_gain(obj)?,
            noise: BaseNoise::new(self.base_law()?, d, derive_seed(master, &[0]))?,
            mode: self.probe_mode()?,
            record_objective: run.record_objective,
        };
        Ok((cfg, DivergenceGuard::new(run.guard_threshold)?))
    }

    pub fn ensemble_config(&self) -> Result<EnsembleConfig> {
        let e = self.ensemble.as_ref().ok_or_else(|| missing("ensemble"))?;
        check_box("ensemble.theta0_box", e.theta0_box)?;
        Ok(EnsembleConfig {
            m: e.m,
            n: e.n,
            n0: e.n0,
            theta0_box: (e.theta0_box[0], e.theta0_box[1]),
            eps_grid: e.eps_grid.clone(),
            statistic: match e.statistic {
                StatisticKind::Grad => BiasStatistic::TargetBiasGrad,
                StatisticKind::Fbar => BiasStatistic::TargetBiasFbar,
            },
        })
    }

    pub fn ensemble_setup(&self) -> Result<(EnsembleSetup, Vec<ProbeMode>)> {
        let e = self.ensemble.as_ref().ok_or_else(|| missing("ensemble"))?;
        let obj = self.build_objective()?;
        let law = self.base_law()?;
        let modes = e.modes.iter().map(|m| self.mode_of(*m)).collect::<Result<Vec<_>>>()?;
        let varsigma = match self.mode_of(ModeKind::Zigzag)? {
            ProbeMode::ZigZag { varsigma } => varsigma,
            ProbeMode::Iid => unreachable!(),
        };
        let fbar_method =
            self.meanflow.as_ref().and_then(|m| m.method).unwrap_or_else(|| default_method(law, obj.dim()));
        let setup = EnsembleSetup {
            config: self.ensemble_config()?,
            gain: self.exploration_gain(obj.clone())?,
            objective: obj,
            step: self.step_schedule()?,
            law,
            varsigma,
            guard: DivergenceGuard::new(e.guard_threshold)
                .map_err(|_| Error::config("ensemble.guard_threshold", "must be at least 1e3"))?,
            fbar_method,
            master_seed: self.seed.master,
        };
        Ok((setup, modes))
    }

    pub fn meanflow_section(&self) -> Result<&MeanflowSection> {
        self.meanflow.as_ref().ok_or_else(|| missing("meanflow"))
    }

    pub fn mean_field_evaluator(&self) -> Result<MeanFieldEvaluator> {
        let obj = self.build_objective()?;
        let law = self.base_law()?;
        let mf = self.meanflow.as_ref();
        let method = mf.and_then(|m| m.method).unwrap_or_else(|| default_method(law, obj.dim()));
        let ev = MeanFieldEvaluator::new(obj.clone(), self.exploration_gain(obj)?, law, self.probe_mode()?, method)?;
        let samples = mf.map_or_else(default_mc_samples, |m| m.mc_samples);
        Ok(ev.with_monte_carlo(samples, derive_seed(self.seed.master, &[2])))
    }
}

/// Deterministic method suited to the probe law, Monte Carlo otherwise.
pub fn default_method(law: BaseLaw, dim: usize) -> FbarMethod {
    match law {
        BaseLaw::Rademacher if dim <= 12 => FbarMethod::TwoPointExact,
        BaseLaw::Uniform { .. } if dim == 1 => FbarMethod::GaussQuadrature,
        _ => FbarMethod::MonteCarlo,
    }
}

fn check_box(key: &str, b: [f64; 2]) -> Result<()> {
    if b[0].is_finite() && b[1].is_finite() && b[0] <= b[1] {
        Ok(())
    } else {
        Err(Error::config(key, "need finite lo <= hi"))
    }
}

/// Pull the key out of "unknown field `foo`" / "missing field `foo`".
fn offending_key(msg: &str) -> Option<String> {
    if !(msg.starts_with("unknown field") || msg.starts_with("missing field")) {
        return None;
    }
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}
