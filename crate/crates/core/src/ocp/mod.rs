//! Multiple-shooting transcription of the landing problem and its solver.
//!
//! Decision variables are the shooting-node states `X[1..=N]` and the stage
//! controls `U[0..N]`; `X[0]` is pinned to the measured state and never
//! enters the optimizer. Internally the variables are stored flat and
//! interleaved as `[U0, X1, U1, X2, ..., U(N-1), XN]` so that the
//! Gauss-Newton matrix is banded.

mod constraints;
mod cost;
mod gradcheck;
mod linalg;
mod problem;
mod solver;

pub use constraints::{constraint_eval, ConstraintBundle};
pub use cost::{stage_cost, terminal_cost, total_cost};
pub use gradcheck::{check_gradient, gradient_check, random_probe, GradientReport};
pub use problem::OcpProblem;
pub use solver::{shift_multipliers, shift_warm_start, solve, Multipliers, OcpSolution, SolveStatus, WarmStart};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ControlInput, DynamicsError, State12, NU, NX};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("invalid NMPC configuration: {0}")]
    Config(String),
    #[error("malformed reference plan: {0}")]
    Plan(String),
    #[error("initial state is not finite")]
    NonFiniteInit,
    #[error("solver diverged (non-finite objective)")]
    Diverged,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StateBounds {
    /// Bound on |roll| and |pitch| (rad).
    pub max_tilt: f64,
    /// Per-axis bound on |v| (m/s).
    pub max_speed: f64,
    /// Lower bound on world z (m).
    pub min_altitude: f64,
}

impl Default for StateBounds {
    fn default() -> Self {
        Self {
            max_tilt: 0.6,
            max_speed: 3.0,
            min_altitude: 0.0,
        }
    }
}

impl StateBounds {
    pub fn as_arrays(&self) -> ([f64; NX], [f64; NX]) {
        let mut lo = [f64::NEG_INFINITY; NX];
        let mut hi = [f64::INFINITY; NX];
        lo[2] = self.min_altitude;
        for i in 3..6 {
            lo[i] = -self.max_speed;
            hi[i] = self.max_speed;
        }
        for i in 6..8 {
            lo[i] = -self.max_tilt;
            hi[i] = self.max_tilt;
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Inner iterations allowed per solve across all outer iterations; a
    /// solve that exhausts it returns its iterate unconverged.
    pub max_total_inner: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    /// Internal stopping tolerance on the max-norm dynamics defect.
    pub defect_tol: f64,
    /// Internal stopping tolerance on CBF violation.
    pub cbf_tol: f64,
    /// Stopping tolerance on the projected Lagrangian gradient.
    pub kkt_tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_outer: 20,
            max_inner: 100,
            max_total_inner: 250,
            penalty_init: 10.0,
            penalty_growth: 5.0,
            penalty_max: 1e6,
            defect_tol: 1e-8,
            cbf_tol: 1e-8,
            kkt_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmpcConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Stage state weights, ordered (p, v, q, w).
    pub q: [f64; NX],
    pub r: [f64; NU],
    pub q_terminal: [f64; NX],
    /// Platform position weights, applied only while tracking.
    pub lambda: [f64; 3],
    pub u_min: f64,
    pub u_max: f64,
    pub state_bounds: StateBounds,
    pub solver: SolverSettings,
}

impl Default for NmpcConfig {
    fn default() -> Self {
        let q = [10.0, 10.0, 10.0, 1.0, 1.0, 1.0, 5.0, 5.0, 5.0, 0.5, 0.5, 0.5];
        Self {
            horizon: 10,
            dt: 0.1,
            q,
            r: [0.1; NU],
            q_terminal: q.map(|w| 5.0 * w),
            lambda: [20.0; 3],
            u_min: 0.0,
            u_max: 7.5,
            state_bounds: StateBounds::default(),
            solver: SolverSettings::default(),
        }
    }
}

impl NmpcConfig {
    pub fn validate(&self) -> Result<(), OcpError> {
        let bad = |m: &str| Err(OcpError::Config(m.to_string()));
        if self.horizon < 1 {
            return bad("horizon must be at least 1");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        let weights = self.q.iter().chain(&self.r).chain(&self.q_terminal).chain(&self.lambda);
        if weights.clone().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return bad("weights must be finite and non-negative");
        }
        if !(self.u_min <= self.u_max) {
            return bad("u_min must not exceed u_max");
        }
        let sb = &self.state_bounds;
        if !(sb.max_tilt > 0.0 && sb.max_tilt < std::f64::consts::FRAC_PI_2 && sb.max_speed > 0.0) {
            return bad("state bounds must be ordered and keep the attitude map nonsingular");
        }
        let s = &self.solver;
        if s.max_outer == 0
            || s.max_inner == 0
            || s.max_total_inner == 0
            || !(s.penalty_init > 0.0)
            || !(s.penalty_growth >= 1.0)
        {
            return bad("solver budgets and penalty parameters must be positive");
        }
        Ok(())
    }
}

/// Per-solve problem data: references, platform targets and the surface
/// height used for the ground-effect correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePlan {
    /// `x_r[0..=N]`.
    pub states: Vec<State12>,
    /// Platform/landing targets for the positional cost, one per node.
    pub platform: Vec<Vector3<f64>>,
    /// Desired terminal state.
    pub terminal: State12,
    /// Control reference for the input penalty, one per stage.
    pub u_ref: Vec<ControlInput>,
    /// Whether the platform positional cost is active (TRACK/DESCEND).
    pub tracking: bool,
    pub surface_height: f64,
}

impl ReferencePlan {
    /// Constant reference at `target` with zero velocity, attitude and rates.
    pub fn hold(target: &State12, horizon: usize, u_ref: ControlInput) -> Self {
        Self {
            states: vec![*target; horizon + 1],
            platform: vec![target.p; horizon + 1],
            terminal: *target,
            u_ref: vec![u_ref; horizon],
            tracking: false,
            surface_height: 0.0,
        }
    }

    pub fn horizon(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn validate(&self, horizon: usize) -> Result<(), OcpError> {
        if self.states.len() != horizon + 1 || self.platform.len() != horizon + 1 || self.u_ref.len() != horizon {
            return Err(OcpError::Plan(format!(
                "expected {} reference nodes and {horizon} control references, got {} states, {} platform \
                 targets and {} controls",
                horizon + 1,
                self.states.len(),
                self.platform.len(),
                self.u_ref.len()
            )));
        }
        let finite = self.states.iter().all(State12::is_finite)
            && self.terminal.is_finite()
            && self.platform.iter().all(|p| p.iter().all(|c| c.is_finite()))
            && self.u_ref.iter().all(|u| u.u.iter().all(|c| c.is_finite()))
            && self.surface_height.is_finite();
        if !finite {
            return Err(OcpError::Plan("non-finite reference".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionVector {
    /// `X[0..=N]`; `X[0]` is the pinned initial state.
    pub states: Vec<State12>,
    /// `U[0..N]`.
    pub controls: Vec<ControlInput>,
}

impl DecisionVector {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn is_consistent(&self) -> bool {
        !self.controls.is_empty() && self.states.len() == self.controls.len() + 1
    }

    /// `X = repeat(x_init)`, `U = repeat(u)`.
    pub fn constant(x_init: &State12, u: ControlInput, horizon: usize) -> Self {
        Self {
            states: vec![*x_init; horizon + 1],
            controls: vec![u; horizon],
        }
    }
}
