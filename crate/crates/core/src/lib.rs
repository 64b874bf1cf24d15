//! Quadrotor landing simulator built around a multiple-shooting nonlinear
//! MPC with discrete-time control-barrier-function obstacle constraints.
//!
//! Modules, bottom-up:
//! - [`dynamics`]: 12-state rigid-body model with ground effect, integrators.
//! - [`cbf`]: cylindrical obstacle barriers and their decay residuals.
//! - [`ocp`]: the receding-horizon optimal control problem and its solver.
//! - [`platform`]: platform motion, landing phase machine, descent targets.
//! - [`sim`]: closed-loop trials and their logs.
//! - [`harness`]: scenarios, batches, metrics and reports.

pub mod cbf;
pub mod dynamics;
pub mod harness;
pub mod ocp;
pub mod platform;
pub mod sim;
