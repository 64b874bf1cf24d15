use nalgebra::Vector3;

use super::{DecisionVector, NmpcConfig, ReferencePlan};
use crate::dynamics::{ControlInput, State12};

fn weighted_sq(err: &[f64], w: &[f64]) -> f64 {
    err.iter().zip(w).map(|(e, w)| w * e * e).sum()
}

/// `||x - x_r||_Q^2 + ||u - u_ref||_R^2`, plus the platform positional cost
/// `sum_i lambda_i (p_i - p_f,i)^2` when `tracking` is set.
pub fn stage_cost(
    x: &State12,
    u: &ControlInput,
    x_r: &State12,
    u_ref: &ControlInput,
    p_f: &Vector3<f64>,
    cfg: &NmpcConfig,
    tracking: bool,
) -> f64 {
    let dx = x
        .to_array()
        .iter()
        .zip(x_r.to_array())
        .map(|(a, b)| a - b)
        .collect::<Vec<_>>();
    let du = u.u - u_ref.u;
    let mut cost = weighted_sq(&dx, &cfg.q) + weighted_sq(du.as_slice(), &cfg.r);
    if tracking {
        let dp = x.p - p_f;
        cost += weighted_sq(dp.as_slice(), &cfg.lambda);
    }
    cost
}

/// `||x_N - x_rf||_{Q_terminal}^2`.
pub fn terminal_cost(x_n: &State12, x_rf: &State12, cfg: &NmpcConfig) -> f64 {
    let dx = x_n
        .to_array()
        .iter()
        .zip(x_rf.to_array())
        .map(|(a, b)| a - b)
        .collect::<Vec<_>>();
    weighted_sq(&dx, &cfg.q_terminal)
}

/// Sum of the stage costs over `k = 0..N` plus the terminal cost.
pub fn total_cost(decision: &DecisionVector, plan: &ReferencePlan, cfg: &NmpcConfig) -> f64 {
    let n = decision.horizon();
    let stages: f64 = (0..n)
        .map(|k| {
            stage_cost(
                &decision.states[k],
                &decision.controls[k],
                &plan.states[k],
                &plan.u_ref[k],
                &plan.platform[k],
                cfg,
                plan.tracking,
            )
        })
        .sum();
    stages + terminal_cost(&decision.states[n], &plan.terminal, cfg)
}
