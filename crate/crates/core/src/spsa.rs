//! One- and two-measurement SPSA recursions and the trajectory runner.
//!
//! With probe `xi`, gain `eps` and step `alpha`:
//!
//! ```text
//! 1SPSA: theta <- theta - alpha / eps        * xi * G(theta + eps xi)
//! 2SPSA: theta <- theta - alpha / (2 eps)    * xi * [G(theta + eps xi) - G(theta - eps xi)]
//! ```
//!
//! The gain is evaluated at the pre-update iterate and the probe is drawn
//! after the iterate is fixed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exploration::{BaseNoise, ProbeGenerator, ProbeMode};
use crate::objectives::{norm, Objective};
use crate::schedules::{ExplorationGain, StepSizeSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "1spsa")]
    OneMeasurement,
    #[serde(rename = "2spsa")]
    TwoMeasurement,
}

impl Algorithm {
    pub fn evaluations_per_step(&self) -> usize {
        match self {
            Algorithm::OneMeasurement => 1,
            Algorithm::TwoMeasurement => 2,
        }
    }
}

/// Apply one 1SPSA update to `theta` in place with a given probe, gain and step.
/// `scratch` must have the dimension of `theta`.
pub fn apply_1spsa(
    obj: &dyn Objective,
    theta: &mut [f64],
    xi: &[f64],
    eps: f64,
    alpha: f64,
    scratch: &mut [f64],
) -> Result<()> {
    for ((s, t), x) in scratch.iter_mut().zip(theta.iter()).zip(xi) {
        *s = t + eps * x;
    }
    let plus = obj.eval(scratch);
    let coef = alpha / eps * plus;
    for (t, x) in theta.iter_mut().zip(xi) {
        *t -= coef * x;
    }
    check_finite(theta, plus)
}

/// Apply one 2SPSA update to `theta` in place.
pub fn apply_2spsa(
    obj: &dyn Objective,
    theta: &mut [f64],
    xi: &[f64],
    eps: f64,
    alpha: f64,
    scratch: &mut [f64],
) -> Result<()> {
    for ((s, t), x) in scratch.iter_mut().zip(theta.iter()).zip(xi) {
        *s = t + eps * x;
    }
    let plus = obj.eval(scratch);
    for ((s, t), x) in scratch.iter_mut().zip(theta.iter()).zip(xi) {
        *s = t - eps * x;
    }
    let minus = obj.eval(scratch);
    let coef = alpha / (2.0 * eps) * (plus - minus);
    for (t, x) in theta.iter_mut().zip(xi) {
        *t -= coef * x;
    }
    check_finite(theta, plus - minus)
}

fn check_finite(theta: &[f64], value: f64) -> Result<()> {
    if value.is_finite() && theta.iter().all(|t| t.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { theta: theta.to_vec() })
    }
}

/// Step size and gain used by the most recent update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub alpha: f64,
    pub eps: f64,
}

/// Iterate, iteration counter and probe source of a single trajectory.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub theta: Vec<f64>,
    pub n: u64,
    pub probe: ProbeGenerator,
    pub last_probe: Vec<f64>,
    pub last_gain: f64,
    scratch: Vec<f64>,
}

impl OptimizerState {
    pub fn new(theta0: Vec<f64>, probe: ProbeGenerator) -> Result<Self> {
        if theta0.len() != probe.dim() {
            return Err(Error::Dimension { expected: probe.dim(), got: theta0.len() });
        }
        let d = theta0.len();
        Ok(Self { theta: theta0, n: 0, probe, last_probe: vec![0.0; d], last_gain: f64::NAN, scratch: vec![0.0; d] })
    }

    fn advance(
        &mut self,
        algorithm: Algorithm,
        obj: &dyn Objective,
        step: &StepSizeSchedule,
        gain: &ExplorationGain,
    ) -> Result<StepInfo> {
        let eps = gain.gain_value(&self.theta, self.n)?;
        let alpha = step.step_size(self.n + 1);
        let xi = self.probe.next_probe();
        self.last_probe.copy_from_slice(xi);
        self.last_gain = eps;
        self.n += 1;
        let apply = match algorithm {
            Algorithm::OneMeasurement => apply_1spsa,
            Algorithm::TwoMeasurement => apply_2spsa,
        };
        apply(obj, &mut self.theta, &self.last_probe, eps, alpha, &mut self.scratch)?;
        Ok(StepInfo { alpha, eps })
    }
}

/// One 1SPSA step: exactly one objective evaluation (plus one inside an
/// objective-dependent gain).
pub fn step_1spsa(
    state: &mut OptimizerState,
    obj: &dyn Objective,
    step: &StepSizeSchedule,
    gain: &ExplorationGain,
) -> Result<StepInfo> {
    state.advance(Algorithm::OneMeasurement, obj, step, gain)
}

/// One 2SPSA step: exactly two objective evaluations.
pub fn step_2spsa(
    state: &mut OptimizerState,
    obj: &dyn Objective,
    step: &StepSizeSchedule,
    gain: &ExplorationGain,
) -> Result<StepInfo> {
    state.advance(Algorithm::TwoMeasurement, obj, step, gain)
}

/// Stops a run once `|theta_n|` exceeds the threshold or becomes non-finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceGuard {
    threshold: f64,
}

impl DivergenceGuard {
    pub const DEFAULT_THRESHOLD: f64 = 1e6;

    pub fn new(threshold: f64) -> Result<Self> {
        if threshold.is_nan() || threshold < 1e3 {
            return Err(Error::config("run.guard_threshold", format!("must be at least 1e3, got {threshold}")));
        }
        Ok(Self { threshold })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn tripped(&self, theta: &[f64]) -> bool {
        let r = norm(theta);
        !r.is_finite() || r > self.threshold
    }
}

impl Default for DivergenceGuard {
    fn default() -> Self {
        Self { threshold: Self::DEFAULT_THRESHOLD }
    }
}

/// Everything a single trajectory needs besides the objective.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub n_iters: u64,
    pub theta0: Vec<f64>,
    /// Record every `stride`-th iterate (the final one is always kept).
    pub stride: u64,
    pub step: StepSizeSchedule,
    pub gain: ExplorationGain,
    /// Base noise; its seed fixes the whole trajectory.
    pub noise: BaseNoise,
    pub mode: ProbeMode,
    /// Evaluate the objective at recorded rows.
    pub record_objective: bool,
}

/// One row per recorded iterate: `alpha` and `eps` are the values the
/// update out of `theta_n` uses.
#[derive(Debug, Clone, Default)]
pub struct RunRecord {
    pub indices: Vec<u64>,
    pub thetas: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
    pub gains: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub diverged_at: Option<u64>,
    pub config_hash: String,
    pub seed: u64,
    pub stride: u64,
}

impl RunRecord {
    pub fn final_theta(&self) -> Option<&[f64]> {
        self.thetas.last().map(Vec::as_slice)
    }

    pub fn horizon(&self) -> u64 {
        self.indices.last().copied().unwrap_or(0)
    }

    fn push(&mut self, n: u64, theta: &[f64], alpha: f64, eps: f64, objective: Option<f64>) {
        self.indices.push(n);
        self.thetas.push(theta.to_vec());
        self.alphas.push(alpha);
        self.gains.push(eps);
        if let Some(v) = objective {
            self.objective_trace.push(v);
        }
    }
}

/// Run a trajectory and call `observer(n, theta_n)` for every iterate
/// `n = 0..=N` that was reached without tripping the guard. Returns the
/// iteration at which the guard fired, if any.
pub fn run_with_observer(
    config: &RunConfig,
    obj: &dyn Objective,
    guard: &DivergenceGuard,
    mut observer: impl FnMut(u64, &[f64]),
) -> Result<Option<u64>> {
    let probe = ProbeGenerator::new(config.noise, config.mode)?;
    let mut state = OptimizerState::new(config.theta0.clone(), probe)?;
    if guard.tripped(&state.theta) {
        return Ok(Some(0));
    }
    observer(0, &state.theta);
    for _ in 0..config.n_iters {
        match state.advance(config.algorithm, obj, &config.step, &config.gain) {
            Ok(_) => {}
            Err(Error::NonFinite { .. }) => return Ok(Some(state.n)),
            Err(e) => return Err(e),
        }
        if guard.tripped(&state.theta) {
            return Ok(Some(state.n));
        }
        observer(state.n, &state.theta);
    }
    Ok(None)
}

/// Run a trajectory and record it. A guard trip is reported through
/// `diverged_at`, with the offending iterate as the last row.
pub fn run(config: &RunConfig, obj: &dyn Objective, guard: &DivergenceGuard) -> Result<RunRecord> {
    if config.theta0.len() != obj.dim() {
        return Err(Error::Dimension { expected: obj.dim(), got: config.theta0.len() });
    }
    let stride = config.stride.max(1);
    let mut record = RunRecord { seed: config.noise.seed, stride, ..Default::default() };
    let probe = ProbeGenerator::new(config.noise, config.mode)?;
    let mut state = OptimizerState::new(config.theta0.clone(), probe)?;
    let objective_at = |theta: &[f64]| config.record_objective.then(|| obj.eval(theta));

    if guard.tripped(&state.theta) {
        record.push(0, &state.theta, f64::NAN, f64::NAN, objective_at(&state.theta));
        record.diverged_at = Some(0);
        return Ok(record);
    }
    loop {
        let n = state.n;
        if n % stride == 0 || n == config.n_iters {
            let eps = config.gain.gain_value(&state.theta, n)?;
            record.push(n, &state.theta, config.step.step_size(n + 1), eps, objective_at(&state.theta));
        }
        if n == config.n_iters {
            break;
        }
        let failed = match state.advance(config.algorithm, obj, &config.step, &config.gain) {
            Ok(_) => false,
            Err(Error::NonFinite { .. }) => true,
            Err(e) => return Err(e),
        };
        if failed || guard.tripped(&state.theta) {
            record.diverged_at = Some(state.n);
            record.push(state.n, &state.theta, f64::NAN, f64::NAN, objective_at(&state.theta));
            break;
        }
    }
    Ok(record)
}

/// Arithmetic mean of `theta_n` over `n` in `(burn_in, N]`. Needs a stride-1,
/// non-diverged record.
pub fn polyak_ruppert(record: &RunRecord, burn_in: u64) -> Result<Vec<f64>> {
    if record.diverged_at.is_some() {
        return Err(Error::InvalidArgument("cannot average a diverged run".into()));
    }
    if record.stride != 1 {
        return Err(Error::InvalidArgument("averaging needs a stride-1 trajectory".into()));
    }
    let horizon = record.horizon();
    if burn_in >= horizon {
        return Err(Error::InvalidArgument(format!("burn-in {burn_in} must be below the horizon {horizon}")));
    }
    let mut avg = PRAverage::new(burn_in);
    for (n, theta) in record.indices.iter().zip(&record.thetas) {
        avg.observe(*n, theta);
    }
    Ok(avg.value().to_vec())
}

/// Running Polyak-Ruppert average over iterates with index above `burn_in`.
#[derive(Debug, Clone)]
pub struct PRAverage {
    burn_in: u64,
    count: u64,
    value: Vec<f64>,
}

impl PRAverage {
    pub fn new(burn_in: u64) -> Self {
        Self { burn_in, count: 0, value: Vec::new() }
    }

    pub fn observe(&mut self, n: u64, theta: &[f64]) {
        if n <= self.burn_in {
            return;
        }
        if self.value.is_empty() {
            self.value = vec![0.0; theta.len()];
        }
        self.count += 1;
        let k = self.count as f64;
        for (v, t) in self.value.iter_mut().zip(theta) {
            *v += (t - *v) / k;
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn value(&self) -> &[f64] {
        &self.value
    }
}
