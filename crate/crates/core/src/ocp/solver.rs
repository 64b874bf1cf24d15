//! Augmented-Lagrangian outer loop with a projected Gauss-Newton inner
//! solver on the box constraints.
//!
//! Equality defects enter through `lambda.d + rho/2 |d|^2`, the CBF
//! inequalities `c >= 0` through the shifted penalty
//! `(max(0, mu - rho c)^2 - mu^2) / 2 rho`. Box bounds on controls and
//! states are never relaxed: every iterate is projected onto them.

use serde::{Deserialize, Serialize};

pub use super::problem::Multipliers;
use super::problem::{Evaluation, OcpProblem};
use super::{total_cost, DecisionVector, NmpcConfig, OcpError, ReferencePlan};
use crate::cbf::CbfConfig;
use crate::dynamics::{euler_step, ControlInput, QuadrotorParams, State12};

/// Feasibility thresholds a converged solution is guaranteed to meet.
pub const DEFECT_ACCEPT: f64 = 1e-4;
pub const CBF_ACCEPT: f64 = -1e-5;
const STATE_BOUND_SLACK: f64 = 1e-6;

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;
/// Relative objective decrease below which an inner step counts as stalled.
const STALL_DECREASE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    pub decision: DecisionVector,
    pub multipliers: Option<Multipliers>,
    /// Penalty to resume from; the configured initial penalty otherwise.
    #[serde(default)]
    pub penalty: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSolution {
    pub decision: DecisionVector,
    pub u_apply: ControlInput,
    pub cost: f64,
    pub kkt_residual: f64,
    pub defect_norm: f64,
    /// Smallest CBF residual (on the optimizer's backed-off obstacles);
    /// `+inf` without obstacles.
    pub min_cbf_residual: f64,
    /// Outer (multiplier) iterations.
    pub iterations: usize,
    pub inner_iterations: usize,
    pub converged: bool,
    pub status: SolveStatus,
    pub multipliers: Multipliers,
    /// Penalty parameter at exit.
    pub penalty: f64,
    /// Augmented objective after each accepted step, tagged with the outer
    /// iteration it belongs to.
    pub merit_trace: Vec<(usize, f64)>,
}

impl OcpSolution {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            decision: self.decision.clone(),
            multipliers: Some(self.multipliers.clone()),
            penalty: Some(self.penalty),
        }
    }
}

fn projected_gradient_norm(z: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    z.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((z, g), (lo, hi))| (z - (z - g).clamp(*lo, *hi)).abs())
        .fold(0.0, f64::max)
}

struct Inner {
    iterations: usize,
    pg_norm: f64,
    /// Stopped because no step could decrease the objective measurably,
    /// which happens at kinks of the model (the ground-effect clamp).
    stalled: bool,
}

/// Backtracking along the projection arc `P(z + alpha p)`.
fn arc_search(
    prob: &OcpProblem,
    z: &[f64],
    phi: f64,
    g: &[f64],
    p: &[f64],
    mult: &Multipliers,
    rho: f64,
) -> Result<Option<(Vec<f64>, f64)>, OcpError> {
    let mut alpha = 1.0;
    let mut trial = z.to_vec();
    for _ in 0..MAX_BACKTRACKS {
        for i in 0..z.len() {
            trial[i] = z[i] + alpha * p[i];
        }
        prob.project(&mut trial);
        let slope: f64 = trial.iter().zip(z).zip(g).map(|((t, z), g)| g * (t - z)).sum();
        if slope >= 0.0 {
            alpha *= 0.5;
            continue;
        }
        let value = prob.augmented_value(&trial, mult, rho)?;
        if value.is_finite() && value <= phi + ARMIJO * slope {
            return Ok(Some((trial, value)));
        }
        alpha *= 0.5;
    }
    Ok(None)
}

fn inner_solve(
    prob: &OcpProblem,
    z: &mut Vec<f64>,
    mult: &Multipliers,
    rho: f64,
    cfg: &NmpcConfig,
    budget: usize,
    outer: usize,
    trace: &mut Vec<(usize, f64)>,
) -> Result<Inner, OcpError> {
    let (lo, hi) = (prob.lower(), prob.upper());
    let (mut phi, mut g) = prob.augmented_gradient(z, mult, rho)?;
    if !phi.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(OcpError::Diverged);
    }
    trace.push((outer, phi));
    let tol = cfg.solver.kkt_tol;
    let mut pg = projected_gradient_norm(z, &g, lo, hi);
    let mut iterations = 0;
    let mut stalled = false;
    let mut last_shift: f64 = 0.0;
    while iterations < budget && pg > tol {
        iterations += 1;
        let eps = pg.min(1e-6);
        let active: Vec<bool> = (0..z.len())
            .map(|i| (z[i] <= lo[i] + eps && g[i] > 0.0) || (z[i] >= hi[i] - eps && g[i] < 0.0))
            .collect();

        let mut h = prob.gauss_newton(z, mult, rho);
        let mut rhs: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut diag_max: f64 = 0.0;
        for i in 0..z.len() {
            if active[i] {
                h.pin(i);
                rhs[i] = 0.0;
            } else {
                diag_max = diag_max.max(h.diag(i));
            }
        }
        // Inertia correction: no shift first, then restart from a fraction of
        // the last successful shift.
        let scale = diag_max.max(1.0);
        let mut shift = 0.0;
        let step = loop {
            let mut shifted = h.clone();
            if shift > 0.0 {
                for i in 0..z.len() {
                    if !active[i] {
                        shifted.add(i, i, shift);
                    }
                }
            }
            if let Some(chol) = shifted.cholesky() {
                if shift > 0.0 {
                    last_shift = shift;
                }
                break Some(chol.solve(&rhs));
            }
            shift = match (shift == 0.0, last_shift > 0.0) {
                (true, true) => (last_shift / 3.0).max(1e-10 * scale),
                (true, false) => 1e-10 * scale,
                (false, true) => shift * 8.0,
                (false, false) => shift * 100.0,
            };
            if shift > 1e6 * scale {
                break None;
            }
        };

        let mut accepted = match step {
            Some(mut p) => {
                // Active variables land on their bound instead of staying put.
                for i in 0..z.len() {
                    if active[i] {
                        p[i] = if g[i] > 0.0 { lo[i] - z[i] } else { hi[i] - z[i] };
                    }
                }
                arc_search(prob, z, phi, &g, &p, mult, rho)?
            }
            None => None,
        };
        if accepted.is_none() {
            // Diagonally scaled projected-gradient fallback.
            let p: Vec<f64> = (0..z.len()).map(|i| -g[i] / h.diag(i).max(1e-12)).collect();
            accepted = arc_search(prob, z, phi, &g, &p, mult, rho)?;
        }
        let Some((next, value)) = accepted else {
            stalled = true;
            break;
        };
        stalled = phi - value <= STALL_DECREASE * phi.abs().max(1.0);
        *z = next;
        let (new_phi, new_g) = prob.augmented_gradient(z, mult, rho)?;
        phi = new_phi;
        g = new_g;
        trace.push((outer, phi));
        pg = projected_gradient_norm(z, &g, lo, hi);
        if stalled {
            break;
        }
    }
    Ok(Inner {
        iterations,
        pg_norm: pg,
        stalled,
    })
}

/// Forward Euler rollout of the controls from the pinned initial state.
fn rollout(
    x_init: &State12,
    controls: &[ControlInput],
    cfg: &NmpcConfig,
    params: &QuadrotorParams,
    surface: f64,
) -> Option<Vec<State12>> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*x_init);
    for u in controls {
        let next = euler_step(states.last().unwrap(), u, cfg.dt, params, surface).ok()?;
        states.push(next);
    }
    Some(states)
}

/// Solves one receding-horizon problem from `x_init`.
///
/// Returns the last iterate with `converged = false` when the iteration
/// budget runs out; only a non-finite objective is an error.
pub fn solve(
    x_init: &State12,
    plan: &ReferencePlan,
    warm: Option<&WarmStart>,
    cfg: &NmpcConfig,
    cbf_cfg: &CbfConfig,
    params: &QuadrotorParams,
) -> Result<OcpSolution, OcpError> {
    let prob = OcpProblem::new(*x_init, plan, cfg, cbf_cfg, params)?;
    let n = cfg.horizon;
    let m = prob.n_obstacles();

    let initial = match warm {
        Some(w) if w.decision.is_consistent() && w.decision.horizon() == n => w.decision.clone(),
        _ => DecisionVector {
            states: vec![*x_init; n + 1],
            controls: plan.u_ref.clone(),
        },
    };
    let mut mult = warm
        .and_then(|w| w.multipliers.clone())
        .filter(|mu| mu.fits(n, m))
        .unwrap_or_else(|| Multipliers::zeros(n, m));
    let mut z = prob.pack(&initial);
    prob.project(&mut z);

    let s = &cfg.solver;
    let mut rho = warm
        .and_then(|w| w.penalty)
        .filter(|r| r.is_finite())
        .map_or(s.penalty_init, |r| {
            (r / s.penalty_growth).clamp(s.penalty_init, s.penalty_max)
        });
    let mut prev_violation = f64::INFINITY;
    let mut trace = Vec::new();
    let mut inner_total = 0;
    let mut kkt = f64::INFINITY;
    let mut converged = false;
    let mut outer = 0;
    let mut last_eval: Option<Evaluation> = None;
    let mut inner_done = false;

    while outer < s.max_outer {
        outer += 1;
        let budget = s.max_inner.min(s.max_total_inner - inner_total);
        let inner = inner_solve(&prob, &mut z, &mult, rho, cfg, budget, outer, &mut trace)?;
        inner_total += inner.iterations;
        kkt = inner.pg_norm;
        let eval = prob.evaluate(&z, &mult, rho, None)?;
        if !eval.phi.is_finite() {
            return Err(OcpError::Diverged);
        }
        // First-order multiplier updates are only meaningful at an
        // approximate minimizer; otherwise only the penalty grows.
        inner_done = kkt <= s.kkt_tol || inner.stalled;
        if inner_done {
            for (lam, d) in mult.defect.iter_mut().zip(&eval.defects) {
                *lam += d * rho;
            }
            for (mu, c) in mult.cbf.iter_mut().zip(&eval.cbf) {
                *mu = (*mu - rho * c).max(0.0);
            }
        }
        let violation = eval.defect_norm().max(eval.cbf_violation());
        let feasible = eval.defect_norm() <= s.defect_tol && eval.cbf_violation() <= s.cbf_tol;
        last_eval = Some(eval);
        if feasible && (kkt <= s.kkt_tol || inner.stalled) {
            converged = true;
            break;
        }
        if rho >= s.penalty_max && violation >= 0.99 * prev_violation {
            // Locally infeasible: the penalty cannot grow any further.
            break;
        }
        if inner_total >= s.max_total_inner {
            break;
        }
        if !inner_done || violation > 0.25 * prev_violation {
            rho = (rho * s.penalty_growth).min(s.penalty_max);
        }
        prev_violation = violation;
    }

    let mut decision = prob.unpack(&z);
    let eval = last_eval.expect("at least one outer iteration");
    let mut defect_norm = eval.defect_norm();
    let mut min_cbf = eval.min_cbf();
    // The loop can stop at the penalty cap or the iteration budget with the
    // inner problem solved and the iterate already within acceptance.
    converged |= inner_done && defect_norm <= DEFECT_ACCEPT && min_cbf >= CBF_ACCEPT;

    if converged {
        // Replace the nodes by an exact rollout of the controls so the
        // prediction is dynamically consistent to rounding.
        if let Some(states) = rollout(x_init, &decision.controls, cfg, params, plan.surface_height) {
            let polished = DecisionVector {
                states,
                controls: decision.controls.clone(),
            };
            // Rollout states may graze a box by rounding; projecting keeps
            // the boxes exact at the price of a defect of the same size.
            let mut zp = prob.pack(&polished);
            if prob.bound_violation(&zp) <= STATE_BOUND_SLACK {
                prob.project(&mut zp);
                let check = prob.evaluate(&zp, &Multipliers::zeros(n, m), 0.0, None)?;
                defect_norm = check.defect_norm();
                min_cbf = check.min_cbf();
                decision = prob.unpack(&zp);
            }
        }
        converged = defect_norm <= DEFECT_ACCEPT && min_cbf >= CBF_ACCEPT;
    }

    let u_apply = decision.controls[0].clamp(cfg.u_min, cfg.u_max);
    let cost = total_cost(&decision, plan, cfg);
    if !cost.is_finite() {
        return Err(OcpError::Diverged);
    }
    Ok(OcpSolution {
        decision,
        u_apply,
        cost,
        kkt_residual: kkt,
        defect_norm,
        min_cbf_residual: min_cbf,
        iterations: outer,
        inner_iterations: inner_total,
        converged,
        status: if converged {
            SolveStatus::Converged
        } else {
            SolveStatus::MaxIterations
        },
        multipliers: mult,
        penalty: rho,
        merit_trace: trace,
    })
}

/// Time-shifts a solution by one stage: `X[k] <- X[k+1]`, `U[k] <- U[k+1]`,
/// duplicating the last state and holding the last control.
pub fn shift_warm_start(prev: &DecisionVector) -> DecisionVector {
    let mut states: Vec<State12> = prev.states.iter().skip(1).copied().collect();
    states.push(*prev.states.last().expect("non-empty states"));
    let mut controls: Vec<ControlInput> = prev.controls.iter().skip(1).copied().collect();
    controls.push(*prev.controls.last().expect("non-empty controls"));
    DecisionVector { states, controls }
}

/// Same one-stage shift for the multiplier estimates.
pub fn shift_multipliers(prev: &Multipliers, n_obstacles: usize) -> Multipliers {
    let mut defect: Vec<_> = prev.defect.iter().skip(1).copied().collect();
    if let Some(last) = prev.defect.last() {
        defect.push(*last);
    }
    let mut cbf: Vec<f64> = prev.cbf.iter().skip(n_obstacles).copied().collect();
    let tail = prev.cbf.len().saturating_sub(n_obstacles);
    cbf.extend_from_slice(&prev.cbf[tail..]);
    Multipliers { defect, cbf }
}
