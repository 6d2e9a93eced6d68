//! Objective functions.
//!
//! An [`Objective`] is a smooth map from `R^d` to `R`. Closed-form gradients and
//! Hessians are optional; [`gradient`] and [`hessian`] fall back to central
//! differences when they are absent. Three built-ins are provided: the scalar
//! quadratic, the scalar trig-perturbed quadratic used for variance experiments,
//! and a positive definite quadratic form in `d` dimensions.

use std::fmt;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, theta: &[f64]) -> f64;

    /// Closed-form gradient, if known.
    fn closed_grad(&self, _theta: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Closed-form Hessian, if known.
    fn closed_hess(&self, _theta: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    /// Coercivity constant: `|grad(theta)| >= delta |theta|` once `|theta| >= 1/delta`.
    fn coercivity_delta(&self) -> Option<f64> {
        None
    }

    fn known_optimum(&self) -> Option<Vec<f64>> {
        None
    }

    /// Lower bound on the objective over all of `R^d`.
    fn known_floor(&self) -> Option<f64> {
        None
    }
}

impl<T: Objective + ?Sized> Objective for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, theta: &[f64]) -> f64 {
        (**self).eval(theta)
    }
    fn closed_grad(&self, theta: &[f64]) -> Option<Vec<f64>> {
        (**self).closed_grad(theta)
    }
    fn closed_hess(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        (**self).closed_hess(theta)
    }
    fn coercivity_delta(&self) -> Option<f64> {
        (**self).coercivity_delta()
    }
    fn known_optimum(&self) -> Option<Vec<f64>> {
        (**self).known_optimum()
    }
    fn known_floor(&self) -> Option<f64> {
        (**self).known_floor()
    }
}

/// Default finite-difference step at `theta`.
pub fn default_fd_step(theta: &[f64]) -> f64 {
    1e-4 * (1.0 + norm(theta))
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_dim(obj: &dyn Objective, theta: &[f64]) -> Result<()> {
    if theta.len() != obj.dim() {
        return Err(Error::Dimension { expected: obj.dim(), got: theta.len() });
    }
    Ok(())
}

/// Evaluate with dimension and finiteness checks. A non-finite value is how
/// overflow at extreme iterates surfaces to the divergence guard.
pub fn eval(obj: &dyn Objective, theta: &[f64]) -> Result<f64> {
    check_dim(obj, theta)?;
    let v = obj.eval(theta);
    if !v.is_finite() {
        return Err(Error::NonFinite { theta: theta.to_vec() });
    }
    Ok(v)
}

/// Central-difference gradient with step `h`.
pub fn fd_gradient(obj: &dyn Objective, theta: &[f64], h: f64) -> Vec<f64> {
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let xi = x[i];
            x[i] = xi + h;
            let up = obj.eval(&x);
            x[i] = xi - h;
            let down = obj.eval(&x);
            x[i] = xi;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Gradient: the closed form when supplied, otherwise central differences
/// with the default step.
pub fn gradient(obj: &dyn Objective, theta: &[f64]) -> Result<Vec<f64>> {
    check_dim(obj, theta)?;
    let g = obj.closed_grad(theta).unwrap_or_else(|| fd_gradient(obj, theta, default_fd_step(theta)));
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { theta: theta.to_vec() });
    }
    Ok(g)
}

/// Hessian: the closed form when supplied, otherwise central differences of
/// the gradient.
pub fn hessian(obj: &dyn Objective, theta: &[f64]) -> Result<DMatrix<f64>> {
    check_dim(obj, theta)?;
    if let Some(h) = obj.closed_hess(theta) {
        return Ok(h);
    }
    let d = theta.len();
    let h = default_fd_step(theta);
    let mut out = DMatrix::zeros(d, d);
    let mut x = theta.to_vec();
    for j in 0..d {
        let xj = x[j];
        x[j] = xj + h;
        let up = gradient(obj, &x)?;
        x[j] = xj - h;
        let down = gradient(obj, &x)?;
        x[j] = xj;
        for i in 0..d {
            out[(i, j)] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    Ok((&out + out.transpose()) * 0.5)
}

/// Largest sup-norm gap between the closed-form gradient and a central
/// difference with step `h`, over the grid. An empty grid gives 0.
pub fn grad_check(obj: &dyn Objective, theta_grid: &[Vec<f64>], h: f64) -> Result<f64> {
    if !(1e-6..=1e-2).contains(&h) {
        return Err(Error::InvalidArgument(format!("finite-difference step {h} outside [1e-6, 1e-2]")));
    }
    let mut worst: f64 = 0.0;
    for theta in theta_grid {
        check_dim(obj, theta)?;
        let closed = obj
            .closed_grad(theta)
            .ok_or_else(|| Error::InvalidArgument("objective has no closed-form gradient".into()))?;
        let fd = fd_gradient(obj, theta, h);
        for (a, b) in closed.iter().zip(&fd) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Root of a scalar function on `[lo, hi]` by bisection. The endpoints must
/// bracket a sign change.
pub fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::InvalidArgument(format!("[{lo}, {hi}] does not bracket a root")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= tol || mid == lo || mid == hi {
            return Ok(mid);
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// The built-in test problems.
#[derive(Clone, PartialEq)]
pub enum Builtin {
    /// `theta^2`.
    Quadratic1D,
    /// `theta^2 - cos(theta) - sin(5 theta)/5 + 4`.
    TrigQuadratic1D,
    /// `theta' Q theta / 2` with `Q` symmetric positive definite.
    QuadraticND { q: DMatrix<f64> },
}

impl fmt::Debug for Builtin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Builtin::Quadratic1D => write!(f, "Quadratic1D"),
            Builtin::TrigQuadratic1D => write!(f, "TrigQuadratic1D"),
            Builtin::QuadraticND { q } => write!(f, "QuadraticND({}x{})", q.nrows(), q.ncols()),
        }
    }
}

fn trig_value(t: f64) -> f64 {
    t * t - t.cos() - (5.0 * t).sin() / 5.0 + 4.0
}

fn trig_deriv(t: f64) -> f64 {
    2.0 * t + t.sin() - (5.0 * t).cos()
}

fn trig_second(t: f64) -> f64 {
    2.0 + t.cos() + 5.0 * (5.0 * t).sin()
}

/// Stationary point of the trig-quadratic, located by bisection of its
/// derivative on `[0, 0.5]`. It sits near 0.1918, not at 0.
pub fn trig_quadratic_stationary_point() -> f64 {
    static ROOT: OnceLock<f64> = OnceLock::new();
    *ROOT.get_or_init(|| bisect(trig_deriv, 0.0, 0.5, 1e-15).expect("derivative changes sign on [0, 0.5]"))
}

impl Builtin {
    /// A quadratic form; `q` must be square, symmetric and positive definite.
    pub fn quadratic_nd(q: DMatrix<f64>) -> Result<Self> {
        if q.nrows() == 0 || q.nrows() != q.ncols() {
            return Err(Error::config("objective.Q", "must be a non-empty square matrix"));
        }
        if (&q - q.transpose()).amax() > 1e-12 * (1.0 + q.amax()) {
            return Err(Error::config("objective.Q", "must be symmetric"));
        }
        if q.clone().cholesky().is_none() {
            return Err(Error::config("objective.Q", "must be positive definite"));
        }
        Ok(Builtin::QuadraticND { q })
    }

    fn q_min_eig(q: &DMatrix<f64>) -> f64 {
        q.clone().symmetric_eigen().eigenvalues.min()
    }
}

impl Objective for Builtin {
    fn dim(&self) -> usize {
        match self {
            Builtin::Quadratic1D | Builtin::TrigQuadratic1D => 1,
            Builtin::QuadraticND { q } => q.nrows(),
        }
    }

    fn eval(&self, theta: &[f64]) -> f64 {
        match self {
            Builtin::Quadratic1D => theta[0] * theta[0],
            Builtin::TrigQuadratic1D => trig_value(theta[0]),
            Builtin::QuadraticND { q } => {
                let x = DVector::from_column_slice(theta);
                0.5 * x.dot(&(q * &x))
            }
        }
    }

    fn closed_grad(&self, theta: &[f64]) -> Option<Vec<f64>> {
        Some(match self {
            Builtin::Quadratic1D => vec![2.0 * theta[0]],
            Builtin::TrigQuadratic1D => vec![trig_deriv(theta[0])],
            Builtin::QuadraticND { q } => {
                let x = DVector::from_column_slice(theta);
                (q * x).as_slice().to_vec()
            }
        })
    }

    fn closed_hess(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        Some(match self {
            Builtin::Quadratic1D => DMatrix::from_element(1, 1, 2.0),
            Builtin::TrigQuadratic1D => DMatrix::from_element(1, 1, trig_second(theta[0])),
            Builtin::QuadraticND { q } => q.clone(),
        })
    }

    fn coercivity_delta(&self) -> Option<f64> {
        Some(match self {
            Builtin::Quadratic1D => 1.0,
            Builtin::TrigQuadratic1D => 0.5,
            Builtin::QuadraticND { q } => Self::q_min_eig(q).min(1.0),
        })
    }

    fn known_optimum(&self) -> Option<Vec<f64>> {
        Some(match self {
            Builtin::Quadratic1D => vec![0.0],
            Builtin::TrigQuadratic1D => vec![trig_quadratic_stationary_point()],
            Builtin::QuadraticND { q } => vec![0.0; q.nrows()],
        })
    }

    fn known_floor(&self) -> Option<f64> {
        Some(match self {
            Builtin::Quadratic1D | Builtin::QuadraticND { .. } => 0.0,
            // theta^2 - cos - sin/5 + 4 >= 4 - 1 - 1/5
            Builtin::TrigQuadratic1D => 2.8,
        })
    }
}

type EvalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;
type HessFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// A user objective assembled from closures.
pub struct FnObjective {
    dim: usize,
    eval: Box<EvalFn>,
    grad: Option<Box<GradFn>>,
    hess: Option<Box<HessFn>>,
    coercivity_delta: Option<f64>,
    known_optimum: Option<Vec<f64>>,
    known_floor: Option<f64>,
}

impl FnObjective {
    pub fn new(dim: usize, eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            dim,
            eval: Box::new(eval),
            grad: None,
            hess: None,
            coercivity_delta: None,
            known_optimum: None,
            known_floor: None,
        }
    }

    pub fn with_grad(mut self, grad: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.grad = Some(Box::new(grad));
        self
    }

    pub fn with_hess(mut self, hess: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.hess = Some(Box::new(hess));
        self
    }

    pub fn with_coercivity(mut self, delta: f64) -> Self {
        self.coercivity_delta = Some(delta);
        self
    }

    pub fn with_optimum(mut self, theta: Vec<f64>) -> Self {
        self.known_optimum = Some(theta);
        self
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.known_floor = Some(floor);
        self
    }
}

impl Objective for FnObjective {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, theta: &[f64]) -> f64 {
        (self.eval)(theta)
    }
    fn closed_grad(&self, theta: &[f64]) -> Option<Vec<f64>> {
        self.grad.as_ref().map(|g| g(theta))
    }
    fn closed_hess(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        self.hess.as_ref().map(|h| h(theta))
    }
    fn coercivity_delta(&self) -> Option<f64> {
        self.coercivity_delta
    }
    fn known_optimum(&self) -> Option<Vec<f64>> {
        self.known_optimum.clone()
    }
    fn known_floor(&self) -> Option<f64> {
        self.known_floor
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn builtin_values() {
        assert_abs_diff_eq!(eval(&Builtin::TrigQuadratic1D, &[0.0]).unwrap(), 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(eval(&Builtin::Quadratic1D, &[1.1]).unwrap(), 1.21, epsilon = 1e-14);
        let q = Builtin::quadratic_nd(DMatrix::identity(2, 2)).unwrap();
        assert_abs_diff_eq!(eval(&q, &[3.0, 4.0]).unwrap(), 12.5, epsilon = 1e-14);
    }

    #[test]
    fn builtin_gradients() {
        assert_eq!(gradient(&Builtin::Quadratic1D, &[3.0]).unwrap(), vec![6.0]);
        assert_abs_diff_eq!(gradient(&Builtin::TrigQuadratic1D, &[0.0]).unwrap()[0], -1.0, epsilon = 1e-15);
        let root = trig_quadratic_stationary_point();
        assert!(root > 0.19 && root < 0.2);
        assert!(gradient(&Builtin::TrigQuadratic1D, &[root]).unwrap()[0].abs() < 1e-10);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(matches!(eval(&Builtin::Quadratic1D, &[1.0, 2.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn overflow_surfaces_as_non_finite() {
        let err = eval(&Builtin::Quadratic1D, &[1e200]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn grad_check_bounds() {
        let grid: Vec<Vec<f64>> = [-2.0, 0.0, 2.0].iter().map(|&t| vec![t]).collect();
        assert!(grad_check(&Builtin::Quadratic1D, &grid, 1e-4).unwrap() < 1e-7);
        let grid: Vec<Vec<f64>> = (0..50).map(|i| vec![-3.0 + 6.0 * i as f64 / 49.0]).collect();
        assert!(grad_check(&Builtin::TrigQuadratic1D, &grid, 1e-4).unwrap() < 1e-6);
        assert_eq!(grad_check(&Builtin::TrigQuadratic1D, &[], 1e-4).unwrap(), 0.0);
        assert!(grad_check(&Builtin::Quadratic1D, &grid, 1.0).is_err());
    }

    #[test]
    fn quadratic_nd_validation() {
        let not_pd = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(Builtin::quadratic_nd(not_pd).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        assert!(Builtin::quadratic_nd(asym).is_err());
    }

    #[test]
    fn fd_fallback_for_fn_objective() {
        let obj = FnObjective::new(2, |t| t[0] * t[0] + 3.0 * t[1]);
        let g = gradient(&obj, &[1.0, 5.0]).unwrap();
        assert_abs_diff_eq!(g[0], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g[1], 3.0, epsilon = 1e-6);
        let h = hessian(&obj, &[1.0, 5.0]).unwrap();
        assert_abs_diff_eq!(h[(0, 0)], 2.0, epsilon = 1e-4);
        assert_abs_diff_eq!(h[(1, 1)], 0.0, epsilon = 1e-4);
    }

    #[test]
    fn coercivity_spot_check() {
        for obj in [Builtin::Quadratic1D, Builtin::TrigQuadratic1D] {
            let delta = obj.coercivity_delta().unwrap();
            for i in 0..400 {
                let t = 1.0 / delta + i as f64 * 0.05;
                for theta in [t, -t] {
                    let g = gradient(&obj, &[theta]).unwrap()[0];
                    assert!(g.abs() >= delta * theta.abs(), "{obj:?} at {theta}");
                }
            }
        }
    }

    #[test]
    fn floor_holds_on_grid() {
        for obj in [Builtin::Quadratic1D, Builtin::TrigQuadratic1D] {
            let floor = obj.known_floor().unwrap();
            for i in 0..=2000 {
                let t = -10.0 + 0.01 * i as f64;
                assert!(obj.eval(&[t]) >= floor);
            }
        }
    }
}
