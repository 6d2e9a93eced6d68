//! Exploration sequences.
//!
//! Probes are built from an i.i.d. base noise `W_n` that is symmetric with
//! bounded support. In i.i.d. mode the probe is `W_n` itself; in zig-zag mode it
//! is `varsigma * (W_n - W_{n-1})`, whose partial sums telescope to
//! `varsigma * (W_N - W_0)`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BaseLaw {
    /// Equiprobable `+1` / `-1` in each coordinate.
    Rademacher,
    /// Uniform on `[-half_width, half_width]` in each coordinate.
    Uniform { half_width: f64 },
}

impl BaseLaw {
    /// `E[W_i^2]`.
    pub fn variance(&self) -> f64 {
        match self {
            BaseLaw::Rademacher => 1.0,
            BaseLaw::Uniform { half_width } => half_width * half_width / 3.0,
        }
    }

    /// Sup-norm bound on a single draw.
    pub fn support_bound(&self) -> f64 {
        match self {
            BaseLaw::Rademacher => 1.0,
            BaseLaw::Uniform { half_width } => *half_width,
        }
    }

    pub(crate) fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            BaseLaw::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            BaseLaw::Uniform { half_width } => half_width * (2.0 * rng.random::<f64>() - 1.0),
        }
    }
}

/// Base noise law together with its dimension and seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseNoise {
    pub law: BaseLaw,
    pub dim: usize,
    pub seed: u64,
}

impl BaseNoise {
    pub fn new(law: BaseLaw, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("probe dimension must be positive".into()));
        }
        if let BaseLaw::Uniform { half_width } = law {
            if !(half_width.is_finite() && half_width > 0.0) {
                return Err(Error::config("probe.support", format!("must be positive, got {half_width}")));
            }
        }
        Ok(Self { law, dim, seed })
    }

    pub fn rademacher(dim: usize, seed: u64) -> Self {
        Self { law: BaseLaw::Rademacher, dim, seed }
    }

    pub fn uniform(half_width: f64, dim: usize, seed: u64) -> Result<Self> {
        Self::new(BaseLaw::Uniform { half_width }, dim, seed)
    }

    /// `E[W W^T]`, diagonal.
    pub fn covariance(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim) * self.law.variance()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProbeMode {
    Iid,
    ZigZag { varsigma: f64 },
}

impl ProbeMode {
    /// Zig-zag with `varsigma = 1/sqrt(2)`, which matches the i.i.d. probe variance.
    pub fn zigzag_matched() -> Self {
        ProbeMode::ZigZag { varsigma: std::f64::consts::FRAC_1_SQRT_2 }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ProbeMode::Iid => "iid",
            ProbeMode::ZigZag { .. } => "zigzag",
        }
    }

    /// Ratio `Sigma_xi / Sigma_W`.
    pub fn covariance_factor(&self) -> f64 {
        match self {
            ProbeMode::Iid => 1.0,
            ProbeMode::ZigZag { varsigma } => 2.0 * varsigma * varsigma,
        }
    }
}

/// Stateful probe source. Owns its RNG and, in zig-zag mode, the previous
/// base draw.
#[derive(Debug, Clone)]
pub struct ProbeGenerator {
    base: BaseNoise,
    mode: ProbeMode,
    rng: ChaCha8Rng,
    initial_w: Vec<f64>,
    prev_w: Vec<f64>,
    current_w: Vec<f64>,
    probe: Vec<f64>,
    count: u64,
}

impl ProbeGenerator {
    /// New generator. In zig-zag mode `W_0` is drawn immediately so that the
    /// first call to [`next_probe`](Self::next_probe) returns `xi_1`.
    pub fn new(base: BaseNoise, mode: ProbeMode) -> Result<Self> {
        validate_mode(&mode)?;
        let mut rng = rng_from_seed(base.seed);
        let initial_w: Vec<f64> = match mode {
            ProbeMode::Iid => Vec::new(),
            ProbeMode::ZigZag { .. } => (0..base.dim).map(|_| base.law.sample(&mut rng)).collect(),
        };
        Ok(Self::assemble(base, mode, rng, initial_w))
    }

    /// Zig-zag generator whose memory starts at the supplied `W_0`.
    pub fn zigzag_with_memory(base: BaseNoise, varsigma: f64, w0: Vec<f64>) -> Result<Self> {
        let mode = ProbeMode::ZigZag { varsigma };
        validate_mode(&mode)?;
        if w0.len() != base.dim {
            return Err(Error::Dimension { expected: base.dim, got: w0.len() });
        }
        let rng = rng_from_seed(base.seed);
        Ok(Self::assemble(base, mode, rng, w0))
    }

    fn assemble(base: BaseNoise, mode: ProbeMode, rng: ChaCha8Rng, initial_w: Vec<f64>) -> Self {
        let current_w = if initial_w.is_empty() { vec![0.0; base.dim] } else { initial_w.clone() };
        Self { base, mode, rng, prev_w: current_w.clone(), current_w, initial_w, probe: vec![0.0; base.dim], count: 0 }
    }

    pub fn base(&self) -> &BaseNoise {
        &self.base
    }

    pub fn mode(&self) -> ProbeMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.base.dim
    }

    /// Number of probes drawn so far.
    pub fn count(&self) -> u64 {
        self.count
    }

    /// Draw the next probe. The returned slice is valid until the next call.
    pub fn next_probe(&mut self) -> &[f64] {
        std::mem::swap(&mut self.prev_w, &mut self.current_w);
        for w in self.current_w.iter_mut() {
            *w = self.base.law.sample(&mut self.rng);
        }
        match self.mode {
            ProbeMode::Iid => self.probe.copy_from_slice(&self.current_w),
            ProbeMode::ZigZag { varsigma } => {
                for ((p, w), w_prev) in self.probe.iter_mut().zip(&self.current_w).zip(&self.prev_w) {
                    *p = varsigma * (w - w_prev);
                }
            }
        }
        self.count += 1;
        &self.probe
    }

    /// Most recent probe (zeros before the first draw).
    pub fn last_probe(&self) -> &[f64] {
        &self.probe
    }

    /// `W_0` (zig-zag only; empty in i.i.d. mode).
    pub fn initial_memory(&self) -> &[f64] {
        &self.initial_w
    }

    /// The latest base draw `W_n`.
    pub fn memory(&self) -> &[f64] {
        &self.current_w
    }

    /// Markov state `(W_{n-1}, W_n)` driving the zig-zag probe.
    pub fn markov_state(&self) -> (&[f64], &[f64]) {
        (&self.prev_w, &self.current_w)
    }

    /// Closed-form `E[xi xi^T]`.
    pub fn probe_covariance(&self) -> DMatrix<f64> {
        probe_covariance(&self.base, &self.mode)
    }

    /// Sup-norm bound on a single probe.
    pub fn probe_bound(&self) -> f64 {
        let a = self.base.law.support_bound();
        match self.mode {
            ProbeMode::Iid => a,
            ProbeMode::ZigZag { varsigma } => 2.0 * varsigma * a,
        }
    }
}

fn validate_mode(mode: &ProbeMode) -> Result<()> {
    if let ProbeMode::ZigZag { varsigma } = mode {
        if !(varsigma.is_finite() && *varsigma > 0.0) {
            return Err(Error::config("probe.varsigma", format!("must be positive, got {varsigma}")));
        }
    }
    Ok(())
}

/// `Sigma_W` for i.i.d. probes, `2 varsigma^2 Sigma_W` for zig-zag.
pub fn probe_covariance(base: &BaseNoise, mode: &ProbeMode) -> DMatrix<f64> {
    base.covariance() * mode.covariance_factor()
}

/// Empirical checks on a probe stream.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeMomentReport {
    pub sample_count: usize,
    pub mean_vec: Vec<f64>,
    pub third_moment_max_abs: f64,
    pub covariance: Vec<Vec<f64>>,
    /// Spectral-norm distance between `covariance` and the closed form.
    pub covariance_error: f64,
}

/// Draw `n_samples` probes from `gen` and report empirical moments.
pub fn moment_diagnostics(gen: &mut ProbeGenerator, n_samples: usize) -> Result<ProbeMomentReport> {
    if n_samples < 1000 {
        return Err(Error::InvalidArgument(format!("moment diagnostics need at least 1000 samples, got {n_samples}")));
    }
    let d = gen.dim();
    let triples: Vec<(usize, usize, usize)> =
        (0..d).flat_map(|i| (i..d).flat_map(move |j| (j..d).map(move |k| (i, j, k)))).collect();
    let mut sum = vec![0.0; d];
    let mut second = DMatrix::<f64>::zeros(d, d);
    let mut third = vec![0.0; triples.len()];
    for _ in 0..n_samples {
        let xi = gen.next_probe();
        for i in 0..d {
            sum[i] += xi[i];
            for j in 0..d {
                second[(i, j)] += xi[i] * xi[j];
            }
        }
        for (t, &(i, j, k)) in third.iter_mut().zip(&triples) {
            *t += xi[i] * xi[j] * xi[k];
        }
    }
    let n = n_samples as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut cov = second / n;
    for i in 0..d {
        for j in 0..d {
            cov[(i, j)] -= mean[i] * mean[j];
        }
    }
    cov *= n / (n - 1.0);
    let third_max = third.iter().map(|t| (t / n).abs()).fold(0.0, f64::max);
    let diff = &cov - gen.probe_covariance();
    let covariance_error = diff.symmetric_eigen().eigenvalues.amax();
    Ok(ProbeMomentReport {
        sample_count: n_samples,
        mean_vec: mean,
        third_moment_max_abs: third_max,
        covariance: (0..d).map(|i| (0..d).map(|j| cov[(i, j)]).collect()).collect(),
        covariance_error,
    })
}

/// Two-sample Kolmogorov-Smirnov test for the zig-zag regeneration property:
/// starting from memories `init_a` and `init_b`, the laws of `xi_2` coincide.
/// Returns the p-value; compares coordinate 0.
pub fn regeneration_test(gen: &ProbeGenerator, init_a: &[f64], init_b: &[f64], n_samples: usize) -> Result<f64> {
    regeneration_test_at(gen, init_a, init_b, n_samples, 2)
}

/// As [`regeneration_test`] but comparing `xi_step`. For `step = 1` the two
/// laws generally differ, since `xi_1` depends on `W_0` directly.
pub fn regeneration_test_at(
    gen: &ProbeGenerator,
    init_a: &[f64],
    init_b: &[f64],
    n_samples: usize,
    step: usize,
) -> Result<f64> {
    let ProbeMode::ZigZag { varsigma } = gen.mode() else {
        return Err(Error::InvalidArgument("regeneration test requires zig-zag probes".into()));
    };
    if step == 0 {
        return Err(Error::InvalidArgument("probe index must be at least 1".into()));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let draw = |init: &[f64], side: u64| -> Result<Vec<f64>> {
        (0..n_samples as u64)
            .map(|i| {
                let base = BaseNoise { seed: derive_seed(gen.base().seed, &[side, i]), ..*gen.base() };
                let mut g = ProbeGenerator::zigzag_with_memory(base, varsigma, init.to_vec())?;
                for _ in 1..step {
                    g.next_probe();
                }
                Ok(g.next_probe()[0])
            })
            .collect()
    };
    let a = draw(init_a, 0)?;
    let b = draw(init_b, 1)?;
    Ok(ks_two_sample(&a, &b).1)
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let x = a[i].min(b[j]);
        while i < na && a[i] <= x {
            i += 1;
        }
        while j < nb && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    let sq = ne.sqrt();
    (d, kolmogorov_q((sq + 0.12 + 0.11 / sq) * d))
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=200 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
