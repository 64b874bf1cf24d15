use super::{DecisionVector, NmpcConfig, OcpError};
use crate::cbf::{cbf_residual, CbfConfig};
use crate::dynamics::{euler_step, QuadrotorParams, State12, Vector12};

/// All constraint residuals of the transcription at one decision point.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintBundle {
    /// `X[0] - x_init` (pinned equality).
    pub initial: Vector12,
    /// `d_k = X[k+1] - euler_step(X[k], U[k])`, `k = 0..N`.
    pub defects: Vec<Vector12>,
    /// `cbf[k][j]`: decay residual of obstacle `j` between nodes `k` and
    /// `k+1`, evaluated on the optimizer's (backed-off) obstacles.
    pub cbf: Vec<Vec<f64>>,
    /// Largest box-bound violation over all controls and states `X[1..]`.
    pub bound_violation: f64,
}

impl ConstraintBundle {
    pub fn defect_norm(&self) -> f64 {
        self.defects.iter().map(|d| d.amax()).fold(0.0, f64::max)
    }

    pub fn min_cbf_residual(&self) -> f64 {
        self.cbf.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn constraint_eval(
    decision: &DecisionVector,
    x_init: &State12,
    cfg: &NmpcConfig,
    cbf_cfg: &CbfConfig,
    params: &QuadrotorParams,
    surface_height: f64,
) -> Result<ConstraintBundle, OcpError> {
    if !decision.is_consistent() {
        return Err(OcpError::Plan("decision vector sizes are inconsistent".into()));
    }
    let obstacles = cbf_cfg.solver_obstacles();
    let n = decision.horizon();
    let mut defects = Vec::with_capacity(n);
    let mut cbf = Vec::with_capacity(n);
    for k in 0..n {
        let (xk, xk1) = (&decision.states[k], &decision.states[k + 1]);
        let pred = euler_step(xk, &decision.controls[k], cfg.dt, params, surface_height)?;
        defects.push(xk1.to_vector() - pred.to_vector());
        cbf.push(
            obstacles
                .iter()
                .map(|o| cbf_residual(xk, xk1, o, cbf_cfg.gamma))
                .collect(),
        );
    }

    let (lo, hi) = cfg.state_bounds.as_arrays();
    let mut bound_violation: f64 = 0.0;
    for x in &decision.states[1..] {
        for (i, v) in x.to_array().iter().enumerate() {
            bound_violation = bound_violation.max(lo[i] - v).max(v - hi[i]);
        }
    }
    for u in &decision.controls {
        for v in u.u.iter() {
            bound_violation = bound_violation.max(cfg.u_min - v).max(v - cfg.u_max);
        }
    }

    Ok(ConstraintBundle {
        initial: decision.states[0].to_vector() - x_init.to_vector(),
        defects,
        cbf,
        bound_violation,
    })
}
