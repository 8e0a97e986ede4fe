//! Separated open-loop / closed-loop stochastic optimal control for partially
//! observed nonlinear systems.
//!
//! The pipeline has four stages, each usable on its own:
//!
//! 1. [`trajopt`] optimizes an open-loop control sequence in belief space by
//!    finite-difference gradient descent, with beliefs propagated by the
//!    ensemble Kalman filter in [`enkf`] against a black-box [`plant`].
//! 2. [`tvera`] identifies a reduced-order linear time-varying model of the
//!    deviations around that nominal trajectory from impulse experiments.
//! 3. [`lqg`] designs time-varying LQR gains and a Kalman observer on the
//!    reduced-order model.
//! 4. [`harness`] runs the resulting feedback law on the stochastic plant and
//!    collects Monte Carlo statistics.

pub mod enkf;
pub mod harness;
pub mod linalg;
pub mod lqg;
pub mod noise;
pub mod plant;
pub mod trajopt;
pub mod tvera;
