//! Step-size and exploration-gain sequences.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::objectives::Objective;

/// `alpha(n) = min(alpha0, n^-rho)` with `rho` in `(1/2, 1)`; `alpha(0) = alpha0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizeSchedule {
    alpha0: f64,
    rho: f64,
}

impl StepSizeSchedule {
    pub fn new(alpha0: f64, rho: f64) -> Result<Self> {
        if !(alpha0.is_finite() && alpha0 > 0.0) {
            return Err(Error::config("step.alpha0", format!("must be positive, got {alpha0}")));
        }
        if !(rho > 0.5 && rho < 1.0) {
            return Err(Error::config("step.rho", format!("must lie strictly inside (0.5, 1), got {rho}")));
        }
        Ok(Self { alpha0, rho })
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn step_size(&self, n: u64) -> f64 {
        if n == 0 {
            return self.alpha0;
        }
        self.alpha0.min((n as f64).powf(-self.rho))
    }
}

/// Exploration gain: oblivious (a function of the iteration index only) or
/// active (a function of the current iterate, bounded below by `eps_bullet`).
#[derive(Clone)]
pub enum ExplorationGain {
    /// `eps(n) = eps_bullet`.
    ObliviousConstant { eps_bullet: f64 },
    /// `eps(n) = eps_bullet * n^-kappa`, with `eps(0) = eps_bullet`.
    ObliviousDecaying { eps_bullet: f64, kappa: f64 },
    /// `eps(theta) = eps_bullet * sqrt(1 + |theta - theta_ctr|^2 / sigma_p^2)`.
    CenterActive { eps_bullet: f64, theta_ctr: Vec<f64>, sigma_p: f64 },
    /// `eps(theta) = eps_bullet * sqrt(1 + obj(theta) - floor)`; requires `obj >= floor` everywhere.
    ObjectiveActive { eps_bullet: f64, floor: f64, objective: Arc<dyn Objective> },
}

impl fmt::Debug for ExplorationGain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ObliviousConstant { eps_bullet } => {
                f.debug_struct("ObliviousConstant").field("eps_bullet", eps_bullet).finish()
            }
            Self::ObliviousDecaying { eps_bullet, kappa } => {
                f.debug_struct("ObliviousDecaying").field("eps_bullet", eps_bullet).field("kappa", kappa).finish()
            }
            Self::CenterActive { eps_bullet, theta_ctr, sigma_p } => f
                .debug_struct("CenterActive")
                .field("eps_bullet", eps_bullet)
                .field("theta_ctr", theta_ctr)
                .field("sigma_p", sigma_p)
                .finish(),
            Self::ObjectiveActive { eps_bullet, floor, .. } => f
                .debug_struct("ObjectiveActive")
                .field("eps_bullet", eps_bullet)
                .field("floor", floor)
                .finish_non_exhaustive(),
        }
    }
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::config(key, format!("must be positive, got {v}")))
    }
}

impl ExplorationGain {
    pub fn constant(eps_bullet: f64) -> Result<Self> {
        Ok(Self::ObliviousConstant { eps_bullet: positive("gain.eps_bullet", eps_bullet)? })
    }

    pub fn decaying(eps_bullet: f64, kappa: f64) -> Result<Self> {
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(Error::config("gain.kappa", format!("must be nonnegative, got {kappa}")));
        }
        Ok(Self::ObliviousDecaying { eps_bullet: positive("gain.eps_bullet", eps_bullet)?, kappa })
    }

    pub fn center_active(eps_bullet: f64, theta_ctr: Vec<f64>, sigma_p: f64) -> Result<Self> {
        if theta_ctr.iter().any(|x| !x.is_finite()) {
            return Err(Error::config("gain.theta_ctr", "entries must be finite"));
        }
        Ok(Self::CenterActive {
            eps_bullet: positive("gain.eps_bullet", eps_bullet)?,
            theta_ctr,
            sigma_p: positive("gain.sigma_p", sigma_p)?,
        })
    }

    pub fn objective_active(eps_bullet: f64, floor: f64, objective: Arc<dyn Objective>) -> Result<Self> {
        if !floor.is_finite() {
            return Err(Error::config("gain.obj_floor", "must be finite"));
        }
        Ok(Self::ObjectiveActive { eps_bullet: positive("gain.eps_bullet", eps_bullet)?, floor, objective })
    }

    pub fn eps_bullet(&self) -> f64 {
        match self {
            Self::ObliviousConstant { eps_bullet }
            | Self::ObliviousDecaying { eps_bullet, .. }
            | Self::CenterActive { eps_bullet, .. }
            | Self::ObjectiveActive { eps_bullet, .. } => *eps_bullet,
        }
    }

    pub fn is_active(&self) -> bool {
        matches!(self, Self::CenterActive { .. } | Self::ObjectiveActive { .. })
    }

    /// Same law with a different `eps_bullet`.
    pub fn with_eps_bullet(&self, eps: f64) -> Result<Self> {
        positive("gain.eps_bullet", eps)?;
        let mut out = self.clone();
        match &mut out {
            Self::ObliviousConstant { eps_bullet }
            | Self::ObliviousDecaying { eps_bullet, .. }
            | Self::CenterActive { eps_bullet, .. }
            | Self::ObjectiveActive { eps_bullet, .. } => *eps_bullet = eps,
        }
        Ok(out)
    }

    /// Gain at iterate `theta` and iteration `n`.
    pub fn gain_value(&self, theta: &[f64], n: u64) -> Result<f64> {
        match self {
            Self::ObliviousConstant { eps_bullet } => Ok(*eps_bullet),
            Self::ObliviousDecaying { eps_bullet, kappa } => {
                if n == 0 {
                    Ok(*eps_bullet)
                } else {
                    Ok(eps_bullet * (n as f64).powf(-kappa))
                }
            }
            Self::CenterActive { eps_bullet, theta_ctr, sigma_p } => {
                if theta_ctr.len() != theta.len() {
                    return Err(Error::Dimension { expected: theta_ctr.len(), got: theta.len() });
                }
                let dist2: f64 = theta.iter().zip(theta_ctr).map(|(a, b)| (a - b) * (a - b)).sum();
                Ok(eps_bullet * (1.0 + dist2 / (sigma_p * sigma_p)).sqrt())
            }
            Self::ObjectiveActive { eps_bullet, floor, objective } => {
                let value = objective.eval(theta);
                if !value.is_finite() {
                    return Err(Error::NonFinite { theta: theta.to_vec() });
                }
                if value < *floor {
                    return Err(Error::FloorViolated { theta: theta.to_vec(), value, floor: *floor });
                }
                Ok(eps_bullet * (1.0 + value - floor).sqrt())
            }
        }
    }
}
