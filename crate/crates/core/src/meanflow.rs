//! Mean vector field of 1SPSA and the associated ODEs.
//!
//! For the one-measurement update direction `f(theta, xi) = -xi G(theta + eps xi) / eps`
//! the mean field is `fbar(theta) = E[f(theta, xi)]` under the stationary law of
//! the probe. For zig-zag probes only the marginal law of `xi` matters, so the
//! expectation is taken over `varsigma (W - W')` with `W, W'` independent.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensemble::{fit_loglog, ScalingFit};
use crate::error::{Error, Result};
use crate::exploration::{BaseLaw, BaseNoise, ProbeMode};
use crate::objectives::{norm, Objective};
use crate::schedules::ExplorationGain;
use crate::seeding::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FbarMethod {
    /// Exact expectation over a Rademacher-based probe law (two points when d = 1).
    TwoPointExact,
    /// 64-node Gauss-Legendre quadrature for scalar uniform base noise.
    GaussQuadrature,
    MonteCarlo,
}

/// Largest dimension for which the exact probe enumeration is attempted.
const MAX_EXACT_DIM: usize = 12;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 {
                1.0
            } else if n == 1 {
                x
            } else {
                p1
            };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn gl64() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(64))
}

/// `fbar` value and, for Monte Carlo, its per-coordinate standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct FbarEstimate {
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Evaluates the mean field of 1SPSA for a fixed objective, gain and probe law.
#[derive(Clone)]
pub struct MeanFieldEvaluator {
    objective: Arc<dyn Objective>,
    gain: ExplorationGain,
    law: BaseLaw,
    mode: ProbeMode,
    method: FbarMethod,
    mc_samples: usize,
    seed: u64,
}

impl std::fmt::Debug for MeanFieldEvaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MeanFieldEvaluator")
            .field("dim", &self.objective.dim())
            .field("gain", &self.gain)
            .field("law", &self.law)
            .field("mode", &self.mode)
            .field("method", &self.method)
            .field("mc_samples", &self.mc_samples)
            .finish()
    }
}

impl MeanFieldEvaluator {
    pub fn new(
        objective: Arc<dyn Objective>,
        gain: ExplorationGain,
        law: BaseLaw,
        mode: ProbeMode,
        method: FbarMethod,
    ) -> Result<Self> {
        let d = objective.dim();
        match method {
            FbarMethod::TwoPointExact => {
                if law != BaseLaw::Rademacher {
                    return Err(Error::config("meanflow.method", "two_point_exact needs Rademacher base noise"));
                }
                if d > MAX_EXACT_DIM {
                    return Err(Error::config(
                        "meanflow.method",
                        format!("exact enumeration limited to d <= {MAX_EXACT_DIM}"),
                    ));
                }
            }
            FbarMethod::GaussQuadrature => {
                if !matches!(law, BaseLaw::Uniform { .. }) || d != 1 {
                    return Err(Error::config("meanflow.method", "gauss_quadrature needs scalar uniform base noise"));
                }
            }
            FbarMethod::MonteCarlo => {}
        }
        if let ProbeMode::ZigZag { varsigma } = mode {
            if !(varsigma > 0.0 && varsigma.is_finite()) {
                return Err(Error::config("probe.varsigma", "must be positive"));
            }
        }
        Ok(Self { objective, gain, law, mode, method, mc_samples: 100_000, seed: 0 })
    }

    pub fn with_monte_carlo(mut self, samples: usize, seed: u64) -> Self {
        self.mc_samples = samples.max(2);
        self.seed = seed;
        self
    }

    pub fn with_method(&self, method: FbarMethod) -> Result<Self> {
        let mut out = Self::new(self.objective.clone(), self.gain.clone(), self.law, self.mode, method)?;
        out.mc_samples = self.mc_samples;
        out.seed = self.seed;
        Ok(out)
    }

    pub fn with_gain(&self, gain: ExplorationGain) -> Self {
        Self { gain, ..self.clone() }
    }

    pub fn objective(&self) -> &Arc<dyn Objective> {
        &self.objective
    }

    pub fn gain(&self) -> &ExplorationGain {
        &self.gain
    }

    pub fn method(&self) -> FbarMethod {
        self.method
    }

    pub fn mode(&self) -> ProbeMode {
        self.mode
    }

    pub fn law(&self) -> BaseLaw {
        self.law
    }

    pub fn dim(&self) -> usize {
        self.objective.dim()
    }

    pub fn is_deterministic(&self) -> bool {
        self.method != FbarMethod::MonteCarlo
    }

    /// Closed-form `Sigma_xi = E[xi xi^T]`.
    pub fn probe_covariance(&self) -> DMatrix<f64> {
        let base = BaseNoise { law: self.law, dim: self.dim(), seed: 0 };
        crate::exploration::probe_covariance(&base, &self.mode)
    }

    /// Gain used by the mean field at `theta` (iteration index 0 for oblivious gains).
    pub fn gain_at(&self, theta: &[f64]) -> Result<f64> {
        self.gain.gain_value(theta, 0)
    }

    /// Update direction `f(theta, xi) = -xi G(theta + eps xi) / eps` for a given probe.
    pub fn direction(&self, theta: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        let eps = self.gain_at(theta)?;
        Ok(direction_with_gain(self.objective.as_ref(), theta, xi, eps))
    }

    pub fn fbar(&self, theta: &[f64]) -> Result<FbarEstimate> {
        if theta.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: theta.len() });
        }
        let eps = self.gain_at(theta)?;
        let est = match self.method {
            FbarMethod::TwoPointExact => self.exact(theta, eps),
            FbarMethod::GaussQuadrature => self.quadrature(theta, eps),
            FbarMethod::MonteCarlo => self.monte_carlo(theta, eps),
        };
        if est.value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { theta: theta.to_vec() });
        }
        Ok(est)
    }

    /// `fbar` value only; rejects Monte Carlo.
    pub fn fbar_exact(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if !self.is_deterministic() {
            return Err(Error::config("meanflow.method", "a deterministic method is required"));
        }
        Ok(self.fbar(theta)?.value)
    }

    /// Expectation over the symmetric discrete probe law, pairing `xi` with `-xi`.
    fn exact(&self, theta: &[f64], eps: f64) -> FbarEstimate {
        let d = theta.len();
        let (points, probs): (Vec<f64>, Vec<f64>) = match self.mode {
            ProbeMode::Iid => (vec![-1.0, 1.0], vec![0.5, 0.5]),
            ProbeMode::ZigZag { varsigma } => (vec![-2.0 * varsigma, 0.0, 2.0 * varsigma], vec![0.25, 0.5, 0.25]),
        };
        let k = points.len();
        let total = k.pow(d as u32);
        let mut value = vec![0.0; d];
        let mut xi = vec![0.0; d];
        let mut plus = vec![0.0; d];
        let mut minus = vec![0.0; d];
        for code in 0..total {
            let mut c = code;
            let mut w = 1.0;
            for x in xi.iter_mut() {
                *x = points[c % k];
                w *= probs[c % k];
                c /= k;
            }
            // Keep one representative of each {xi, -xi} pair.
            match xi.iter().find(|x| **x != 0.0) {
                Some(first) if *first > 0.0 => {}
                _ => continue,
            }
            for i in 0..d {
                plus[i] = theta[i] + eps * xi[i];
                minus[i] = theta[i] - eps * xi[i];
            }
            let diff = self.objective.eval(&plus) - self.objective.eval(&minus);
            for i in 0..d {
                value[i] -= w * xi[i] * diff / eps;
            }
        }
        FbarEstimate { value, stderr: vec![0.0; d] }
    }

    fn quadrature(&self, theta: &[f64], eps: f64) -> FbarEstimate {
        let BaseLaw::Uniform { half_width: a } = self.law else { unreachable!("checked at construction") };
        let (nodes, weights) = gl64();
        let t = theta[0];
        let odd = |xi: f64| xi * (self.objective.eval(&[t + eps * xi]) - self.objective.eval(&[t - eps * xi]));
        let value = match self.mode {
            // (1/2a) int_{-a}^{a} -w G(t + eps w)/eps dw = -(1/(2a eps)) int_0^a odd(w) dw
            ProbeMode::Iid => {
                let half = 0.5 * a;
                let s: f64 = nodes.iter().zip(weights).map(|(x, w)| w * odd(half * (x + 1.0))).sum();
                -s * half / (2.0 * a * eps)
            }
            // D = W - W' has density (2a - |D|)/(4a^2) on [-2a, 2a]; xi = varsigma D.
            ProbeMode::ZigZag { varsigma } => {
                let s: f64 = nodes
                    .iter()
                    .zip(weights)
                    .map(|(x, w)| {
                        let dd = a * (x + 1.0);
                        w * (2.0 * a - dd) / (4.0 * a * a) * odd(varsigma * dd)
                    })
                    .sum();
                -s * a / eps
            }
        };
        FbarEstimate { value: vec![value], stderr: vec![0.0] }
    }

    fn monte_carlo(&self, theta: &[f64], eps: f64) -> FbarEstimate {
        let d = theta.len();
        let n = self.mc_samples;
        let mut rng = rng_from_seed(self.seed);
        let mut xi = vec![0.0; d];
        let mut probe = vec![0.0; d];
        let mut mean = vec![0.0; d];
        let mut m2 = vec![0.0; d];
        for k in 0..n {
            for x in xi.iter_mut() {
                *x = match self.mode {
                    ProbeMode::Iid => self.law.sample(&mut rng),
                    ProbeMode::ZigZag { varsigma } => {
                        varsigma * (self.law.sample(&mut rng) - self.law.sample(&mut rng))
                    }
                };
            }
            for i in 0..d {
                probe[i] = theta[i] + eps * xi[i];
            }
            let g = self.objective.eval(&probe);
            let kf = (k + 1) as f64;
            for i in 0..d {
                let v = -xi[i] * g / eps;
                let delta = v - mean[i];
                mean[i] += delta / kf;
                m2[i] += delta * (v - mean[i]);
            }
        }
        let nf = n as f64;
        let stderr = m2.iter().map(|s| (s / (nf - 1.0) / nf).sqrt()).collect();
        FbarEstimate { value: mean, stderr }
    }

    /// `|fbar(theta) + Sigma_xi grad G(theta)|`: the departure of the mean field
    /// from the scaled gradient field.
    pub fn taylor_residual(&self, theta: &[f64]) -> Result<f64> {
        let grad = self
            .objective
            .closed_grad(theta)
            .ok_or_else(|| Error::InvalidArgument("taylor residual needs a closed-form gradient".into()))?;
        let fbar = DVector::from_vec(self.fbar(theta)?.value);
        let sigma = self.probe_covariance();
        let r = fbar + sigma * DVector::from_vec(grad);
        Ok(r.norm())
    }
}

pub(crate) fn direction_with_gain(obj: &dyn Objective, theta: &[f64], xi: &[f64], eps: f64) -> Vec<f64> {
    let probe: Vec<f64> = theta.iter().zip(xi).map(|(t, x)| t + eps * x).collect();
    let g = obj.eval(&probe);
    xi.iter().map(|x| -x * g / eps).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowKind {
    MeanFlow,
    GradientFlow,
}

#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub kind: FlowKind,
    /// Set when a non-finite state ended the integration early.
    pub aborted: bool,
}

/// Classical fourth-order Runge-Kutta for `dx/dt = field(x)`.
pub fn rk4<F>(field: F, theta0: &[f64], t_end: f64, dt: f64, kind: FlowKind) -> Result<FlowTrajectory>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidArgument(format!("t_end must be nonnegative, got {t_end}")));
    }
    let steps = (t_end / dt).round() as usize;
    let mut traj = FlowTrajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        kind,
        aborted: false,
    };
    traj.times.push(0.0);
    traj.states.push(theta0.to_vec());
    let d = theta0.len();
    let mut x = theta0.to_vec();
    let mut tmp = vec![0.0; d];
    for k in 1..=steps {
        let stage = |x: &[f64]| -> Option<Vec<f64>> {
            match field(x) {
                Ok(v) if v.iter().all(|y| y.is_finite()) => Some(v),
                _ => None,
            }
        };
        let Some(k1) = stage(&x) else {
            traj.aborted = true;
            break;
        };
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        let Some(k2) = stage(&tmp) else {
            traj.aborted = true;
            break;
        };
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        let Some(k3) = stage(&tmp) else {
            traj.aborted = true;
            break;
        };
        for i in 0..d {
            tmp[i] = x[i] + dt * k3[i];
        }
        let Some(k4) = stage(&tmp) else {
            traj.aborted = true;
            break;
        };
        for i in 0..d {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            traj.aborted = true;
            break;
        }
        traj.times.push(k as f64 * dt);
        traj.states.push(x.clone());
    }
    Ok(traj)
}

/// Integrate the mean flow `d theta/dt = fbar(theta)`.
pub fn integrate_mean_flow(ev: &MeanFieldEvaluator, theta0: &[f64], t_end: f64, dt: f64) -> Result<FlowTrajectory> {
    if !ev.is_deterministic() {
        return Err(Error::config("meanflow.method", "flow integration needs a deterministic mean field"));
    }
    rk4(|x| ev.fbar_exact(x), theta0, t_end, dt, FlowKind::MeanFlow)
}

/// Integrate the gradient flow `dx/dt = -grad G(x)`.
pub fn integrate_gradient_flow(obj: &dyn Objective, theta0: &[f64], t_end: f64, dt: f64) -> Result<FlowTrajectory> {
    rk4(
        |x| Ok(crate::objectives::gradient(obj, x)?.into_iter().map(|g| -g).collect()),
        theta0,
        t_end,
        dt,
        FlowKind::GradientFlow,
    )
}

/// Equilibrium of the mean field and its linearization.
#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumReport {
    pub theta_star: Vec<f64>,
    pub residual_norm: f64,
    /// Row-major `A* = d fbar / d theta` at `theta_star`.
    pub jacobian: Vec<Vec<f64>>,
    pub eigen_real_parts: Vec<f64>,
    /// Distance to the objective's declared optimum, when it has one.
    pub bias_to_opt: Option<f64>,
    /// Distance to the origin.
    pub bias_to_origin: f64,
    pub gain_at_star: f64,
    pub iterations: usize,
}

impl EquilibriumReport {
    pub fn is_hurwitz(&self) -> bool {
        self.eigen_real_parts.iter().all(|r| *r < 0.0)
    }
}

/// Central-difference Jacobian of the mean field.
pub fn mean_field_jacobian(ev: &MeanFieldEvaluator, theta: &[f64]) -> Result<DMatrix<f64>> {
    let d = theta.len();
    let h = 1e-5 * (1.0 + norm(theta));
    let mut jac = DMatrix::zeros(d, d);
    let mut x = theta.to_vec();
    for j in 0..d {
        let xj = x[j];
        x[j] = xj + h;
        let up = ev.fbar_exact(&x)?;
        x[j] = xj - h;
        let down = ev.fbar_exact(&x)?;
        x[j] = xj;
        for i in 0..d {
            jac[(i, j)] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

const NEWTON_MAX_ITERS: usize = 100;
const MAX_HALVINGS: usize = 60;

/// Locate `theta*` with `fbar(theta*) = 0` by damped Newton, falling back to
/// bisection in one dimension.
pub fn find_equilibrium(ev: &MeanFieldEvaluator, theta_init: &[f64], tol: f64) -> Result<EquilibriumReport> {
    if !ev.is_deterministic() {
        return Err(Error::config("meanflow.method", "equilibrium finding needs a deterministic mean field"));
    }
    if !(1e-12..=1e-6).contains(&tol) {
        return Err(Error::InvalidArgument(format!("tolerance {tol} outside [1e-12, 1e-6]")));
    }
    let (theta, residual, iterations) = match newton(ev, theta_init, tol) {
        Ok(found) => found,
        Err(newton_err) if theta_init.len() == 1 => {
            bisection_fallback(ev, theta_init[0], tol).map_err(|_| newton_err)?
        }
        Err(e) => return Err(e),
    };
    report(ev, theta, residual, iterations)
}

fn report(ev: &MeanFieldEvaluator, theta: Vec<f64>, residual: f64, iterations: usize) -> Result<EquilibriumReport> {
    let jac = mean_field_jacobian(ev, &theta)?;
    let d = theta.len();
    let eigen_real_parts =
        if d == 1 { vec![jac[(0, 0)]] } else { jac.complex_eigenvalues().iter().map(|z| z.re).collect() };
    let bias_to_opt = ev
        .objective()
        .known_optimum()
        .map(|opt| theta.iter().zip(&opt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
    Ok(EquilibriumReport {
        bias_to_origin: norm(&theta),
        gain_at_star: ev.gain_at(&theta)?,
        jacobian: (0..d).map(|i| (0..d).map(|j| jac[(i, j)]).collect()).collect(),
        eigen_real_parts,
        bias_to_opt,
        theta_star: theta,
        residual_norm: residual,
        iterations,
    })
}

fn newton(ev: &MeanFieldEvaluator, theta_init: &[f64], tol: f64) -> Result<(Vec<f64>, f64, usize)> {
    let mut theta = theta_init.to_vec();
    let mut f = DVector::from_vec(ev.fbar_exact(&theta)?);
    let mut r = f.norm();
    for it in 0..NEWTON_MAX_ITERS {
        if r <= tol {
            return Ok((theta, r, it));
        }
        let jac = mean_field_jacobian(ev, &theta)?;
        let Some(step) = jac.lu().solve(&(-&f)) else {
            return Err(Error::NotConverged { iterations: it, residual: r, last: theta });
        };
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + lambda * s).collect();
            if let Ok(ft) = ev.fbar_exact(&trial) {
                let ft = DVector::from_vec(ft);
                let rt = ft.norm();
                if rt < r {
                    theta = trial;
                    f = ft;
                    r = rt;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if r <= tol {
        return Ok((theta, r, NEWTON_MAX_ITERS));
    }
    Err(Error::NotConverged { iterations: NEWTON_MAX_ITERS, residual: r, last: theta })
}

fn bisection_fallback(ev: &MeanFieldEvaluator, center: f64, tol: f64) -> Result<(Vec<f64>, f64, usize)> {
    let f = |t: f64| ev.fbar_exact(&[t]).map(|v| v[0]);
    let mut radius = 1.0;
    let (mut lo, mut hi) = loop {
        let (a, b) = (center - radius, center + radius);
        if let (Ok(fa), Ok(fb)) = (f(a), f(b)) {
            if fa.signum() != fb.signum() {
                break (a, b);
            }
        }
        radius *= 2.0;
        if radius > 1e6 {
            return Err(Error::NotConverged { iterations: 0, residual: f64::NAN, last: vec![center] });
        }
    };
    let mut flo = f(lo)?;
    for it in 0..400 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid)?;
        if fm.abs() <= tol {
            return Ok((vec![mid], fm.abs(), it));
        }
        if mid == lo || mid == hi {
            break;
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    let mid = 0.5 * (lo + hi);
    Err(Error::NotConverged { iterations: 400, residual: f(mid)?.abs(), last: vec![mid] })
}

/// Equilibria across a sweep of `eps_bullet` and the log-log fit of their
/// distance to `reference`.
#[derive(Debug, Clone, Serialize)]
pub struct BiasSweep {
    pub eps_values: Vec<f64>,
    pub theta_stars: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    /// `None` when some bias is within solver resolution of zero, as for
    /// quadratics where `theta*` is the optimum for every gain.
    pub fit: Option<ScalingFit>,
}

pub fn bias_sweep(
    ev: &MeanFieldEvaluator,
    eps_values: &[f64],
    theta_init: &[f64],
    reference: &[f64],
    tol: f64,
) -> Result<BiasSweep> {
    let mut theta_stars = Vec::with_capacity(eps_values.len());
    let mut biases = Vec::with_capacity(eps_values.len());
    for &eps in eps_values {
        let ev_eps = ev.with_gain(ev.gain().with_eps_bullet(eps)?);
        let rep = find_equilibrium(&ev_eps, theta_init, tol)?;
        let bias = rep.theta_star.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        theta_stars.push(rep.theta_star);
        biases.push(bias);
    }
    let resolved = biases.iter().all(|&b| b > 100.0 * tol);
    let fit = if resolved { Some(fit_loglog(eps_values, &biases)?) } else { None };
    Ok(BiasSweep { eps_values: eps_values.to_vec(), theta_stars, biases, fit })
}
