//! Ensembles of independent trajectories and the statistics computed from them.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exploration::{BaseLaw, BaseNoise, ProbeMode};
use crate::meanflow::{direction_with_gain, FbarMethod, MeanFieldEvaluator};
use crate::objectives::{self, Objective};
use crate::schedules::{ExplorationGain, StepSizeSchedule};
use crate::seeding::{derive_seed, rng_from_seed};
use crate::spsa::{run_with_observer, Algorithm, DivergenceGuard, RunConfig, RunRecord};

/// Function averaged along a trajectory to form the empirical target bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasStatistic {
    /// The mean field `fbar`.
    TargetBiasFbar,
    /// The objective gradient.
    TargetBiasGrad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub m: usize,
    pub n: u64,
    pub n0: u64,
    /// Every coordinate of `theta_0` is uniform on this interval.
    pub theta0_box: (f64, f64),
    pub eps_grid: Vec<f64>,
    pub statistic: BiasStatistic,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::config("ensemble.M", format!("need at least 2 runs, got {}", self.m)));
        }
        if self.n0 >= self.n {
            return Err(Error::config("ensemble.N0", format!("burn-in {} must be below N = {}", self.n0, self.n)));
        }
        let (lo, hi) = self.theta0_box;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::config("ensemble.theta0_box", "need finite lo <= hi"));
        }
        if self.eps_grid.is_empty() {
            return Err(Error::config("ensemble.eps_grid", "empty grid"));
        }
        if self.eps_grid.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::config("ensemble.eps_grid", "values must be positive"));
        }
        if self.eps_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("ensemble.eps_grid", "values must be strictly increasing"));
        }
        Ok(())
    }

    pub fn window(&self) -> u64 {
        self.n - self.n0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TargetBiasResult {
    pub per_run_values: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub scaled_cov_trace: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingFit {
    pub eps_values: Vec<f64>,
    pub scaled_vars: Vec<f64>,
    pub loglog_slope: f64,
    pub loglog_intercept: f64,
    pub r_squared: f64,
}

/// Least-squares fit of `log y = intercept + slope * log x`.
pub fn fit_loglog(x: &[f64], y: &[f64]) -> Result<ScalingFit> {
    if x.len() != y.len() {
        return Err(Error::Dimension { expected: x.len(), got: y.len() });
    }
    if x.len() < 3 {
        return Err(Error::InvalidArgument(format!("log-log fit needs at least 3 points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = ly.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("log-log fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = lx.iter().zip(&ly).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(ScalingFit {
        eps_values: x.to_vec(),
        scaled_vars: y.to_vec(),
        loglog_slope: slope,
        loglog_intercept: intercept,
        r_squared,
    })
}

/// Unbiased sample covariance of a set of equal-length vectors.
pub fn sample_covariance(values: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let m = values.len();
    if m < 2 {
        return Err(Error::config("ensemble.M", format!("covariance needs at least 2 samples, got {m}")));
    }
    let d = values[0].len();
    if let Some(v) = values.iter().find(|v| v.len() != d) {
        return Err(Error::Dimension { expected: d, got: v.len() });
    }
    let mut mean = vec![0.0; d];
    for v in values {
        for i in 0..d {
            mean[i] += v[i];
        }
    }
    mean.iter_mut().for_each(|x| *x /= m as f64);
    let mut cov = DMatrix::zeros(d, d);
    for v in values {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (v[i] - mean[i]) * (v[j] - mean[j]);
            }
        }
    }
    Ok(cov / (m as f64 - 1.0))
}

/// `window * trace(Cov)` across runs.
pub fn scaled_covariance(values: &[Vec<f64>], window: u64) -> Result<f64> {
    Ok(window as f64 * sample_covariance(values)?.trace())
}

/// The function averaged by the target bias.
#[derive(Clone, Copy)]
pub enum TargetFunction<'a> {
    MeanField(&'a MeanFieldEvaluator),
    Gradient(&'a dyn Objective),
}

impl TargetFunction<'_> {
    pub fn eval(&self, theta: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::MeanField(ev) => Ok(ev.fbar(theta)?.value),
            Self::Gradient(obj) => objectives::gradient(*obj, theta),
        }
    }
}

/// Average of `g(theta_k)` over `k = n0..=N` for a completed stride-1 record.
pub fn target_bias(run: &RunRecord, g: TargetFunction<'_>, n0: u64) -> Result<Vec<f64>> {
    if let Some(at) = run.diverged_at {
        return Err(Error::Diverged(at));
    }
    if run.stride != 1 {
        return Err(Error::InvalidArgument("target bias needs every iterate (stride 1)".into()));
    }
    if n0 >= run.horizon() {
        return Err(Error::InvalidArgument(format!("burn-in {n0} must be below the horizon {}", run.horizon())));
    }
    let mut acc = BiasAccumulator::new(n0);
    for (n, theta) in run.indices.iter().zip(&run.thetas) {
        acc.observe(*n, &g.eval(theta)?);
    }
    Ok(acc.mean())
}

/// Running mean of `g(theta_n)` over `n >= n0`.
#[derive(Debug, Clone)]
pub struct BiasAccumulator {
    n0: u64,
    count: u64,
    sum: Vec<f64>,
}

impl BiasAccumulator {
    pub fn new(n0: u64) -> Self {
        Self { n0, count: 0, sum: Vec::new() }
    }

    pub fn observe(&mut self, n: u64, value: &[f64]) {
        if n < self.n0 {
            return;
        }
        if self.sum.is_empty() {
            self.sum = vec![0.0; value.len()];
        }
        for (s, v) in self.sum.iter_mut().zip(value) {
            *s += v;
        }
        self.count += 1;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.count as f64).collect()
    }
}

/// Everything needed to run the `eps_grid x mode` ensemble matrix.
#[derive(Clone)]
pub struct EnsembleSetup {
    pub config: EnsembleConfig,
    pub objective: Arc<dyn Objective>,
    pub step: StepSizeSchedule,
    /// Gain template; its `eps_bullet` is replaced by each grid value.
    pub gain: ExplorationGain,
    pub law: BaseLaw,
    pub varsigma: f64,
    pub guard: DivergenceGuard,
    /// Method for `fbar` when the statistic is the mean field.
    pub fbar_method: FbarMethod,
    pub master_seed: u64,
}

impl EnsembleSetup {
    pub fn dim(&self) -> usize {
        self.objective.dim()
    }

    pub fn mode(&self, index: usize) -> ProbeMode {
        match index {
            0 => ProbeMode::Iid,
            _ => ProbeMode::ZigZag { varsigma: self.varsigma },
        }
    }

    /// Seed of run `run_index` at grid point `eps_index` under mode `mode_index` (0 IID, 1 zig-zag).
    pub fn run_seed(&self, mode_index: usize, eps_index: usize, run_index: usize) -> u64 {
        derive_seed(self.master_seed, &[mode_index as u64, eps_index as u64, run_index as u64])
    }
}

pub fn mode_index(mode: &ProbeMode) -> usize {
    match mode {
        ProbeMode::Iid => 0,
        ProbeMode::ZigZag { .. } => 1,
    }
}

/// Outcome of one ensemble member.
#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub run_index: usize,
    pub seed: u64,
    pub theta0: Vec<f64>,
    pub final_theta: Vec<f64>,
    /// Empirical target bias; absent when the run diverged.
    pub bias: Option<Vec<f64>>,
    pub diverged_at: Option<u64>,
}

/// All runs at one `(mode, eps_bullet)` grid point.
#[derive(Debug, Clone, Serialize)]
pub struct EnsembleCell {
    pub mode: ProbeMode,
    pub eps_index: usize,
    pub eps_bullet: f64,
    pub runs: Vec<RunOutcome>,
    pub m_effective: usize,
    /// Absent when fewer than two runs survived.
    pub result: Option<TargetBiasResult>,
}

impl EnsembleCell {
    pub fn mean_bias_norm(&self) -> f64 {
        self.result.as_ref().map_or(f64::NAN, |r| objectives::norm(&r.mean))
    }

    pub fn scaled_var_trace(&self) -> f64 {
        self.result.as_ref().map_or(f64::NAN, |r| r.scaled_cov_trace)
    }
}

fn run_member(setup: &EnsembleSetup, mode_index: usize, eps_index: usize, run_index: usize) -> Result<RunOutcome> {
    let cfg = &setup.config;
    let mode = setup.mode(mode_index);
    let eps = cfg.eps_grid[eps_index];
    let gain = setup.gain.with_eps_bullet(eps)?;
    let seed = setup.run_seed(mode_index, eps_index, run_index);
    let mut rng = rng_from_seed(seed);
    let (lo, hi) = cfg.theta0_box;
    let theta0: Vec<f64> = (0..setup.dim()).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    let noise = BaseNoise::new(setup.law, setup.dim(), rng.random::<u64>())?;
    let run_cfg = RunConfig {
        algorithm: Algorithm::OneMeasurement,
        n_iters: cfg.n,
        theta0: theta0.clone(),
        stride: 1,
        step: setup.step,
        gain: gain.clone(),
        noise,
        mode,
        record_objective: false,
    };
    let evaluator = match cfg.statistic {
        BiasStatistic::TargetBiasFbar => {
            Some(MeanFieldEvaluator::new(setup.objective.clone(), gain, setup.law, mode, setup.fbar_method)?)
        }
        BiasStatistic::TargetBiasGrad => None,
    };
    let target = match &evaluator {
        Some(ev) => TargetFunction::MeanField(ev),
        None => TargetFunction::Gradient(setup.objective.as_ref()),
    };
    let mut acc = BiasAccumulator::new(cfg.n0);
    let mut last = theta0.clone();
    let mut failure = None;
    let diverged_at = run_with_observer(&run_cfg, setup.objective.as_ref(), &setup.guard, |n, theta| {
        if n == cfg.n {
            last.copy_from_slice(theta);
        }
        if n >= cfg.n0 && failure.is_none() {
            match target.eval(theta) {
                Ok(v) => acc.observe(n, &v),
                Err(e) => failure = Some(e),
            }
        }
    })?;
    if let Some(e) = failure {
        if diverged_at.is_none() {
            return Err(e);
        }
    }
    Ok(RunOutcome {
        run_index,
        seed,
        theta0,
        final_theta: last,
        bias: diverged_at.is_none().then(|| acc.mean()),
        diverged_at,
    })
}

fn assemble(
    setup: &EnsembleSetup,
    mode_index: usize,
    eps_index: usize,
    mut runs: Vec<RunOutcome>,
) -> Result<EnsembleCell> {
    runs.sort_by_key(|r| r.run_index);
    let values: Vec<Vec<f64>> = runs.iter().filter_map(|r| r.bias.clone()).collect();
    let m_effective = values.len();
    let result = if m_effective >= 2 {
        let d = values[0].len();
        let mut mean = vec![0.0; d];
        for v in &values {
            for i in 0..d {
                mean[i] += v[i] / m_effective as f64;
            }
        }
        let scaled_cov_trace = scaled_covariance(&values, setup.config.window())?;
        Some(TargetBiasResult { per_run_values: values, mean, scaled_cov_trace })
    } else {
        None
    };
    Ok(EnsembleCell {
        mode: setup.mode(mode_index),
        eps_index,
        eps_bullet: setup.config.eps_grid[eps_index],
        runs,
        m_effective,
        result,
    })
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))
}

/// Run every `(mode, eps_bullet)` cell for the given modes. Cells come back in
/// mode-major, grid-minor order; results do not depend on `workers`.
pub fn run_matrix(setup: &EnsembleSetup, modes: &[ProbeMode], workers: usize) -> Result<Vec<EnsembleCell>> {
    setup.config.validate()?;
    let mode_indices: Vec<usize> = modes.iter().map(mode_index).collect();
    let n_eps = setup.config.eps_grid.len();
    let m = setup.config.m;
    let jobs: Vec<(usize, usize, usize)> =
        mode_indices.iter().flat_map(|&mi| (0..n_eps).flat_map(move |ei| (0..m).map(move |ri| (mi, ei, ri)))).collect();
    let outcomes: Vec<Result<RunOutcome>> =
        pool(workers)?.install(|| jobs.par_iter().map(|&(mi, ei, ri)| run_member(setup, mi, ei, ri)).collect());
    let mut outcomes = outcomes.into_iter();
    let mut cells = Vec::with_capacity(mode_indices.len() * n_eps);
    for &mi in &mode_indices {
        for ei in 0..n_eps {
            let runs = outcomes.by_ref().take(m).collect::<Result<Vec<_>>>()?;
            cells.push(assemble(setup, mi, ei, runs)?);
        }
    }
    Ok(cells)
}

/// Single `(mode, eps_bullet)` ensemble.
pub fn run_ensemble(setup: &EnsembleSetup, mode: ProbeMode, eps_index: usize, workers: usize) -> Result<EnsembleCell> {
    setup.config.validate()?;
    if eps_index >= setup.config.eps_grid.len() {
        return Err(Error::InvalidArgument(format!("grid index {eps_index} out of range")));
    }
    let mi = mode_index(&mode);
    let runs = pool(workers)?.install(|| {
        (0..setup.config.m).into_par_iter().map(|ri| run_member(setup, mi, eps_index, ri)).collect::<Result<Vec<_>>>()
    })?;
    assemble(setup, mi, eps_index, runs)
}

/// Fit of scaled variance against `eps_bullet` over a set of cells of one mode.
/// Cells with fewer than two surviving runs are left out of the fit.
pub fn fit_cells(cells: &[EnsembleCell]) -> Result<ScalingFit> {
    let (x, y): (Vec<f64>, Vec<f64>) =
        cells.iter().filter(|c| c.result.is_some()).map(|c| (c.eps_bullet, c.scaled_var_trace())).unzip();
    fit_loglog(&x, &y)
}

/// Run the full ensemble for every grid value under `mode` and fit the
/// scaling law of the scaled variance.
pub fn scaling_fit(setup: &EnsembleSetup, mode: ProbeMode, workers: usize) -> Result<(ScalingFit, Vec<EnsembleCell>)> {
    let cells = run_matrix(setup, &[mode], workers)?;
    Ok((fit_cells(&cells)?, cells))
}

/// Components of `Delta*_{n+1} = f(theta*, xi_{n+1}) - fbar(theta*)`.
#[derive(Debug, Clone)]
pub struct DeltaDecomposition {
    pub eps: f64,
    pub delta: Vec<Vec<f64>>,
    pub nu: Vec<Vec<f64>>,
    pub omega: Vec<Vec<f64>>,
    pub psi: Vec<Vec<f64>>,
}

/// Split `Delta*` at `theta_star` into `nu = -xi G(theta*)/eps`,
/// `omega = (Sigma_xi - xi xi^T) grad G(theta*)` and the remainder `psi`.
/// The gain is `eps(theta_star)`.
pub fn delta_decompose(ev: &MeanFieldEvaluator, theta_star: &[f64], probes: &[Vec<f64>]) -> Result<DeltaDecomposition> {
    let obj = ev.objective().as_ref();
    let d = obj.dim();
    if theta_star.len() != d {
        return Err(Error::Dimension { expected: d, got: theta_star.len() });
    }
    let grad = obj
        .closed_grad(theta_star)
        .ok_or_else(|| Error::InvalidArgument("decomposition needs a closed-form gradient".into()))?;
    let eps = ev.gain_at(theta_star)?;
    let g_star = objectives::eval(obj, theta_star)?;
    let fbar = ev.fbar(theta_star)?.value;
    let sigma = ev.probe_covariance();
    let sigma_grad = &sigma * nalgebra::DVector::from_column_slice(&grad);
    let mut out = DeltaDecomposition {
        eps,
        delta: Vec::with_capacity(probes.len()),
        nu: Vec::with_capacity(probes.len()),
        omega: Vec::with_capacity(probes.len()),
        psi: Vec::with_capacity(probes.len()),
    };
    for xi in probes {
        if xi.len() != d {
            return Err(Error::Dimension { expected: d, got: xi.len() });
        }
        let f = direction_with_gain(obj, theta_star, xi, eps);
        let xi_dot_grad: f64 = xi.iter().zip(&grad).map(|(a, b)| a * b).sum();
        let delta: Vec<f64> = f.iter().zip(&fbar).map(|(a, b)| a - b).collect();
        let nu: Vec<f64> = xi.iter().map(|x| -x * g_star / eps).collect();
        let omega: Vec<f64> = (0..d).map(|i| sigma_grad[i] - xi[i] * xi_dot_grad).collect();
        let psi: Vec<f64> = (0..d).map(|i| delta[i] - nu[i] - omega[i]).collect();
        out.delta.push(delta);
        out.nu.push(nu);
        out.omega.push(omega);
        out.psi.push(psi);
    }
    Ok(out)
}

/// Minimum number of batches for the batch-means estimator.
pub const MIN_BATCHES: usize = 20;

/// Batch-means estimate of the asymptotic cross-covariance of two sequences:
/// `batch_size` times the sample covariance of the batch averages.
pub fn asymptotic_cross_cov_batch_means(a: &[Vec<f64>], b: &[Vec<f64>], batch_size: usize) -> Result<DMatrix<f64>> {
    if a.len() != b.len() {
        return Err(Error::Dimension { expected: a.len(), got: b.len() });
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let batches = a.len() / batch_size;
    if batches < MIN_BATCHES {
        return Err(Error::InvalidArgument(format!("need at least {MIN_BATCHES} batches, got {batches}")));
    }
    let da = a[0].len();
    let db = b[0].len();
    let means = |s: &[Vec<f64>], d: usize| -> Vec<Vec<f64>> {
        s.chunks_exact(batch_size)
            .map(|chunk| {
                let mut m = vec![0.0; d];
                for v in chunk {
                    for i in 0..d {
                        m[i] += v[i];
                    }
                }
                m.iter_mut().for_each(|x| *x /= batch_size as f64);
                m
            })
            .collect()
    };
    let ma = means(a, da);
    let mb = means(b, db);
    let grand = |m: &[Vec<f64>], d: usize| -> Vec<f64> {
        (0..d).map(|i| m.iter().map(|v| v[i]).sum::<f64>() / batches as f64).collect()
    };
    let (ga, gb) = (grand(&ma, da), grand(&mb, db));
    let mut cov = DMatrix::zeros(da, db);
    for (x, y) in ma.iter().zip(&mb) {
        for i in 0..da {
            for j in 0..db {
                cov[(i, j)] += (x[i] - ga[i]) * (y[j] - gb[j]);
            }
        }
    }
    Ok(cov * (batch_size as f64 / (batches as f64 - 1.0)))
}

pub fn asymptotic_cov_batch_means(samples: &[Vec<f64>], batch_size: usize) -> Result<DMatrix<f64>> {
    asymptotic_cross_cov_batch_means(samples, samples, batch_size)
}

/// Sample lag-`lag` autocovariance `E[(x_0 - m)(x_lag - m)^T]`.
pub fn lag_autocovariance(samples: &[Vec<f64>], lag: usize) -> Result<DMatrix<f64>> {
    let n = samples.len();
    if lag >= n {
        return Err(Error::InvalidArgument(format!("lag {lag} needs more than {n} samples")));
    }
    let d = samples[0].len();
    let mean: Vec<f64> = (0..d).map(|i| samples.iter().map(|v| v[i]).sum::<f64>() / n as f64).collect();
    let mut cov = DMatrix::zeros(d, d);
    for k in 0..n - lag {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (samples[k][i] - mean[i]) * (samples[k + lag][j] - mean[j]);
            }
        }
    }
    Ok(cov / (n - lag) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exploration::ProbeGenerator;
    use crate::meanflow::find_equilibrium;
    use crate::objectives::Builtin;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn std_normal(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
        rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
    }

    fn record(thetas: &[f64]) -> RunRecord {
        RunRecord {
            indices: (0..thetas.len() as u64).collect(),
            thetas: thetas.iter().map(|t| vec![*t]).collect(),
            stride: 1,
            ..Default::default()
        }
    }

    fn evaluator(obj: Builtin, law: BaseLaw, mode: ProbeMode, eps: f64) -> MeanFieldEvaluator {
        let method = match law {
            BaseLaw::Rademacher => FbarMethod::TwoPointExact,
            BaseLaw::Uniform { .. } => FbarMethod::GaussQuadrature,
        };
        let gain = ExplorationGain::center_active(eps, vec![0.0], 1.0).unwrap();
        MeanFieldEvaluator::new(Arc::new(obj), gain, law, mode, method).unwrap()
    }

    fn probes(law: BaseLaw, mode: ProbeMode, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut gen = ProbeGenerator::new(BaseNoise::new(law, 1, seed).unwrap(), mode).unwrap();
        (0..n).map(|_| gen.next_probe().to_vec()).collect()
    }

    #[test]
    fn target_bias_examples() {
        let q = Builtin::Quadratic1D;
        let rec = record(&[1.0, 2.0, 3.0]);
        assert_eq!(target_bias(&rec, TargetFunction::Gradient(&q), 0).unwrap(), vec![4.0]);
        assert_eq!(target_bias(&rec, TargetFunction::Gradient(&q), 1).unwrap(), vec![5.0]);
        assert!(target_bias(&rec, TargetFunction::Gradient(&q), 2).is_err());

        let ev = evaluator(Builtin::Quadratic1D, BaseLaw::Rademacher, ProbeMode::Iid, 0.1);
        assert_eq!(target_bias(&record(&[0.0; 5]), TargetFunction::MeanField(&ev), 0).unwrap(), vec![0.0]);

        let mut diverged = record(&[1.0, 2.0, 3.0]);
        diverged.diverged_at = Some(2);
        assert!(matches!(target_bias(&diverged, TargetFunction::Gradient(&q), 0), Err(Error::Diverged(2))));
    }

    #[test]
    fn scaled_covariance_examples() {
        assert_eq!(scaled_covariance(&vec![vec![1.5, 2.0]; 4], 100).unwrap(), 0.0);
        let a = 0.3;
        assert_abs_diff_eq!(scaled_covariance(&[vec![a], vec![-a]], 7).unwrap(), 7.0 * 2.0 * a * a, epsilon = 1e-15);
        assert!(scaled_covariance(&[vec![1.0]], 1).is_err());

        let mut rng = rng_from_seed(11);
        let values: Vec<Vec<f64>> = (0..10_000).map(|_| vec![std_normal(&mut rng)]).collect();
        let v = scaled_covariance(&values, 1).unwrap();
        assert!((v - 1.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn loglog_fit_recovers_power_law() {
        let eps = [0.05, 0.0707, 0.1, 0.2];
        let vars: Vec<f64> = eps.iter().map(|e| 3.0 / (e * e)).collect();
        let fit = fit_loglog(&eps, &vars).unwrap();
        assert_abs_diff_eq!(fit.loglog_slope, -2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.r_squared, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.loglog_intercept, 3.0f64.ln(), epsilon = 1e-12);
        assert!(fit_loglog(&eps[..2], &vars[..2]).is_err());
        assert!(fit_loglog(&eps, &[1.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = EnsembleConfig {
            m: 2,
            n: 10,
            n0: 3,
            theta0_box: (-10.0, 10.0),
            eps_grid: vec![0.05, 0.1],
            statistic: BiasStatistic::TargetBiasGrad,
        };
        ok.validate().unwrap();
        let bad = |f: fn(&mut EnsembleConfig), key: &str| {
            let mut c = ok.clone();
            f(&mut c);
            match c.validate() {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key),
                other => panic!("{other:?}"),
            }
        };
        bad(|c| c.m = 1, "ensemble.M");
        bad(|c| c.n0 = 10, "ensemble.N0");
        bad(|c| c.eps_grid = vec![0.1, 0.05], "ensemble.eps_grid");
        bad(|c| c.eps_grid = vec![-0.1, 0.05], "ensemble.eps_grid");
    }

    #[test]
    fn decomposition_vanishes_at_quadratic_optimum() {
        let ev = evaluator(Builtin::Quadratic1D, BaseLaw::Rademacher, ProbeMode::Iid, 0.3);
        let dec = delta_decompose(&ev, &[0.0], &probes(BaseLaw::Rademacher, ProbeMode::Iid, 100, 1)).unwrap();
        assert!(dec.nu.iter().chain(&dec.omega).all(|v| v[0] == 0.0));
    }

    #[test]
    fn decomposition_identity_on_trig() {
        let law = BaseLaw::Uniform { half_width: 1.0 };
        let ev = evaluator(Builtin::TrigQuadratic1D, law, ProbeMode::zigzag_matched(), 0.1);
        let star = find_equilibrium(&ev, &[0.0], 1e-12).unwrap().theta_star;
        let dec = delta_decompose(&ev, &star, &probes(law, ProbeMode::zigzag_matched(), 10_000, 5)).unwrap();
        for k in 0..dec.delta.len() {
            let sum = dec.nu[k][0] + dec.omega[k][0] + dec.psi[k][0];
            assert!((sum - dec.delta[k][0]).abs() < 1e-12);
        }
    }

    #[test]
    fn zigzag_nu_telescopes() {
        let law = BaseLaw::Uniform { half_width: 1.0 };
        let mode = ProbeMode::zigzag_matched();
        let ev = evaluator(Builtin::TrigQuadratic1D, law, mode, 0.1);
        let mut gen = ProbeGenerator::new(BaseNoise::new(law, 1, 9).unwrap(), mode).unwrap();
        let w0 = gen.initial_memory()[0];
        let xs: Vec<Vec<f64>> = (0..5000).map(|_| gen.next_probe().to_vec()).collect();
        let wn = gen.memory()[0];
        let star = [0.19];
        let dec = delta_decompose(&ev, &star, &xs).unwrap();
        let total: f64 = dec.nu.iter().map(|v| v[0]).sum();
        let g = Builtin::TrigQuadratic1D.eval(&star);
        let expected = g / dec.eps * std::f64::consts::FRAC_1_SQRT_2 * (wn - w0).abs();
        assert!((total.abs() - expected).abs() < 1e-9 * expected.max(1.0));
    }

    #[test]
    fn batch_means_examples() {
        assert!(asymptotic_cov_batch_means(&vec![vec![2.0]; 1000], 100).is_err());
        assert_eq!(asymptotic_cov_batch_means(&vec![vec![2.0]; 2000], 100).unwrap()[(0, 0)], 0.0);

        let (c, eps) = (2.9, 0.1);
        let nu = |mode| -> Vec<Vec<f64>> {
            probes(BaseLaw::Rademacher, mode, 200_000, 4).into_iter().map(|x| vec![-x[0] * c / eps]).collect()
        };
        let iid = asymptotic_cov_batch_means(&nu(ProbeMode::Iid), 1000).unwrap()[(0, 0)];
        let target = c * c / (eps * eps);
        assert!((iid / target - 1.0).abs() < 0.35, "{iid} vs {target}");
        let zz = asymptotic_cov_batch_means(&nu(ProbeMode::zigzag_matched()), 1000).unwrap()[(0, 0)];
        assert!(zz < 0.05 * iid);
    }

    #[test]
    fn covariance_sum_rule() {
        // g1 = W_n + W_{n-1}, g2 = W_n - 0.5 W_{n-1}; known cross-covariances.
        let mut rng = rng_from_seed(21);
        let w: Vec<f64> = (0..400_001).map(|_| std_normal(&mut rng)).collect();
        let g1: Vec<Vec<f64>> = w.windows(2).map(|p| vec![p[1] + p[0]]).collect();
        let g2: Vec<Vec<f64>> = w.windows(2).map(|p| vec![p[1] - 0.5 * p[0]]).collect();
        let sum: Vec<Vec<f64>> = g1.iter().zip(&g2).map(|(a, b)| vec![a[0] + b[0]]).collect();
        let b = 1000;
        let s11 = asymptotic_cov_batch_means(&g1, b).unwrap()[(0, 0)];
        let s22 = asymptotic_cov_batch_means(&g2, b).unwrap()[(0, 0)];
        let s12 = asymptotic_cross_cov_batch_means(&g1, &g2, b).unwrap()[(0, 0)];
        let s21 = asymptotic_cross_cov_batch_means(&g2, &g1, b).unwrap()[(0, 0)];
        let total = asymptotic_cov_batch_means(&sum, b).unwrap()[(0, 0)];
        assert!((total - (s11 + s22 + s12 + s21)).abs() < 1e-9 * total);
        // Long-run variances: (1+1)^2 = 4, (1-0.5)^2 = 0.25, sum (2 + 0.5)^2 = 6.25
        assert!((s11 - 4.0).abs() < 1.2);
        assert!((s22 - 0.25).abs() < 0.1);
        assert!((total - 6.25).abs() < 1.8);
    }

    #[test]
    fn omega_covariance_bound_and_short_memory() {
        let law = BaseLaw::Uniform { half_width: 1.0 };
        let mode = ProbeMode::zigzag_matched();
        let ev = evaluator(Builtin::TrigQuadratic1D, law, mode, 0.1);
        let theta = [0.7];
        let dec = delta_decompose(&ev, &theta, &probes(law, mode, 200_000, 13)).unwrap();
        let var0 = lag_autocovariance(&dec.omega, 0).unwrap()[(0, 0)];
        let clt = asymptotic_cov_batch_means(&dec.omega, 1000).unwrap()[(0, 0)];
        assert!(clt <= 3.0 * var0 * 1.3, "{clt} vs {var0}");
        for lag in 2..6 {
            let c = lag_autocovariance(&dec.omega, lag).unwrap()[(0, 0)];
            assert!(c.abs() < 0.02 * var0, "lag {lag}: {c}");
        }
        assert!(lag_autocovariance(&dec.omega, 1).unwrap()[(0, 0)].abs() > 0.05 * var0);
    }

    fn small_setup(statistic: BiasStatistic) -> EnsembleSetup {
        EnsembleSetup {
            config: EnsembleConfig {
                m: 6,
                n: 2000,
                n0: 600,
                theta0_box: (-10.0, 10.0),
                eps_grid: vec![0.05, 0.1, 0.2],
                statistic,
            },
            objective: Arc::new(Builtin::TrigQuadratic1D),
            step: StepSizeSchedule::new(1.0, 0.6).unwrap(),
            gain: ExplorationGain::center_active(0.1, vec![0.0], 1.0).unwrap(),
            law: BaseLaw::Uniform { half_width: 1.0 },
            varsigma: std::f64::consts::FRAC_1_SQRT_2,
            guard: DivergenceGuard::new(1e100).unwrap(),
            fbar_method: FbarMethod::GaussQuadrature,
            master_seed: 42,
        }
    }

    #[test]
    fn matrix_is_worker_independent() {
        let setup = small_setup(BiasStatistic::TargetBiasGrad);
        let modes = [ProbeMode::Iid, ProbeMode::zigzag_matched()];
        let a = run_matrix(&setup, &modes, 1).unwrap();
        let b = run_matrix(&setup, &modes, 4).unwrap();
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.m_effective, 6);
            assert_eq!(x.scaled_var_trace().to_bits(), y.scaled_var_trace().to_bits());
            assert_eq!(
                x.runs.iter().map(|r| r.seed).collect::<Vec<_>>(),
                y.runs.iter().map(|r| r.seed).collect::<Vec<_>>()
            );
        }
        let single = run_ensemble(&setup, ProbeMode::zigzag_matched(), 1, 2).unwrap();
        assert_eq!(single.scaled_var_trace().to_bits(), a[4].scaled_var_trace().to_bits());
        let (fit, cells) = scaling_fit(&setup, ProbeMode::Iid, 1).unwrap();
        assert_eq!(cells.len(), 3);
        assert_eq!(fit.scaled_vars[2].to_bits(), a[2].scaled_var_trace().to_bits());
    }

    #[test]
    fn mean_field_statistic_runs() {
        let cell = run_ensemble(&small_setup(BiasStatistic::TargetBiasFbar), ProbeMode::Iid, 0, 1).unwrap();
        assert_eq!(cell.m_effective, 6);
        assert!(cell.scaled_var_trace() >= 0.0);
    }

    #[test]
    fn diverged_runs_are_excluded() {
        let mut setup = small_setup(BiasStatistic::TargetBiasGrad);
        setup.objective = Arc::new(Builtin::Quadratic1D);
        setup.gain = ExplorationGain::constant(0.1).unwrap();
        setup.guard = DivergenceGuard::new(1e6).unwrap();
        let cell = run_ensemble(&setup, ProbeMode::Iid, 1, 1).unwrap();
        let diverged = cell.runs.iter().filter(|r| r.diverged_at.is_some()).count();
        assert!(diverged > 0);
        assert_eq!(cell.m_effective, 6 - diverged);
        assert!(cell.runs.iter().all(|r| r.bias.is_some() == r.diverged_at.is_none()));
    }

    proptest! {
        #[test]
        fn decomposition_identity_holds(theta in -5.0f64..5.0, eps in 0.01f64..0.5, seed in 0u64..1000) {
            let ev = evaluator(Builtin::TrigQuadratic1D, BaseLaw::Rademacher, ProbeMode::zigzag_matched(), eps);
            let xs = probes(BaseLaw::Rademacher, ProbeMode::zigzag_matched(), 50, seed);
            let dec = delta_decompose(&ev, &[theta], &xs).unwrap();
            for k in 0..xs.len() {
                let sum = dec.nu[k][0] + dec.omega[k][0] + dec.psi[k][0];
                let scale = dec.delta[k][0].abs().max(dec.nu[k][0].abs()).max(1.0);
                prop_assert!((sum - dec.delta[k][0]).abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn scaled_covariance_nonnegative(values in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 2), 2..20), w in 1u64..1000) {
            prop_assert!(scaled_covariance(&values, w).unwrap() >= 0.0);
        }
    }
}
