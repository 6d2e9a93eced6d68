//! Zeroth-order stochastic approximation with active exploration gains and
//! zig-zag exploration.
//!
//! The crate is organised bottom-up:
//!
//! * [`schedules`]: step sizes and exploration gains,
//! * [`exploration`]: probe sequences (i.i.d. and zig-zag) and their diagnostics,
//! * [`objectives`]: objective functions and gradient utilities,
//! * [`spsa`]: the 1SPSA/2SPSA recursions, trajectory runner and averaging,
//! * [`meanflow`]: the mean vector field, its ODE and equilibrium,
//! * [`ensemble`]: multi-run statistics and variance-scaling fits,
//! * [`config`] and [`harness`]: experiment files and the command-line front end.

pub mod config;
pub mod ensemble;
pub mod error;
pub mod exploration;
pub mod harness;
pub mod meanflow;
pub mod objectives;
pub mod schedules;
pub mod seeding;
pub mod spsa;

pub use error::{Error, Result};
