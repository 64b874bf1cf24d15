use serde::{Deserialize, Serialize};

use rand::Rng;

use super::problem::{Multipliers, OcpProblem, STRIDE};
use super::OcpError;
use crate::dynamics::{Vector12, NU};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    /// `max_i |g_i - fd_i| / max(|g_i|, |fd_i|, 1)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares `grad` against central differences of `f` at `z`.
pub fn check_gradient<F>(f: F, grad: &[f64], z: &[f64], step: f64, tolerance: f64) -> GradientReport
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = z.to_vec();
    let mut worst = (0.0, 0);
    for i in 0..z.len() {
        probe[i] = z[i] + step;
        let up = f(&probe);
        probe[i] = z[i] - step;
        let down = f(&probe);
        probe[i] = z[i];
        let fd = (up - down) / (2.0 * step);
        let err = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1.0);
        if !(err <= worst.0) {
            worst = (err, i);
        }
    }
    GradientReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        tolerance,
        passed: worst.0 < tolerance,
    }
}

/// Checks the analytic gradient of the augmented objective of `prob` at
/// `z` with the given multipliers and penalty.
pub fn gradient_check(
    prob: &OcpProblem,
    z: &[f64],
    mult: &Multipliers,
    rho: f64,
    step: f64,
    tolerance: f64,
) -> Result<GradientReport, OcpError> {
    let (_, grad) = prob.augmented_gradient(z, mult, rho)?;
    let value = |p: &[f64]| prob.augmented_value(p, mult, rho).unwrap_or(f64::NAN);
    Ok(check_gradient(value, &grad, z, step, tolerance))
}

/// Random decision point and multipliers for probing the gradient: controls
/// in `[2, 5]`, altitudes in `[0.15, 1]` (clear of the ground-effect clamp
/// kink), everything else within the box bounds intersected with `[-1, 1]`.
pub fn random_probe<R: Rng>(prob: &OcpProblem, rng: &mut R) -> (Vec<f64>, Multipliers) {
    let n = prob.horizon();
    let mut z: Vec<f64> = (0..prob.dim())
        .map(|i| {
            let (lo, hi) = (prob.lower()[i].max(-1.0), prob.upper()[i].min(1.0));
            rng.random_range(lo..hi)
        })
        .collect();
    for k in 0..n {
        for j in 0..NU {
            z[STRIDE * k + j] = rng.random_range(2.0..5.0);
        }
        z[STRIDE * k + NU + 2] = rng.random_range(0.15..1.0);
    }
    let mut mult = Multipliers::zeros(n, prob.n_obstacles());
    for d in &mut mult.defect {
        *d = Vector12::from_fn(|_, _| rng.random_range(-3.0..3.0));
    }
    for c in &mut mult.cbf {
        *c = rng.random_range(0.0..5.0);
    }
    (z, mult)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbf::{CbfConfig, ObstacleSpec};
    use crate::dynamics::{ControlInput, QuadrotorParams, State12};
    use crate::ocp::{NmpcConfig, ReferencePlan};
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_objective_agrees_to_rounding() {
        let params = QuadrotorParams::default();
        let cfg = NmpcConfig::default();
        let target = State12::at_rest(Vector3::new(0.0, 0.0, 1.0));
        let plan = ReferencePlan::hold(&target, cfg.horizon, ControlInput::uniform(3.0));
        let prob = OcpProblem::new(target, &plan, &cfg, &CbfConfig::default(), &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z: Vec<f64> = (0..prob.dim()).map(|_| rng.random_range(-0.5..0.5)).collect();
        // rho = 0 and zero multipliers leave only the quadratic cost.
        let mult = Multipliers::zeros(cfg.horizon, 0);
        let report = gradient_check(&prob, &z, &mult, 0.0, 1e-4, 1e-9).unwrap();
        assert!(report.passed, "{report:?}");
    }

    fn full_instance(seed: u64) -> (State12, ReferencePlan, NmpcConfig, CbfConfig, QuadrotorParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = QuadrotorParams::default();
        let cfg = NmpcConfig::default();
        let x0 = State12 {
            p: Vector3::new(-1.0, 0.2, 0.4),
            v: Vector3::new(0.5, -0.1, -0.2),
            q: Vector3::new(0.05, -0.1, 0.2),
            w: Vector3::new(0.1, 0.2, -0.1),
        };
        let target = State12::at_rest(Vector3::new(0.0, 0.0, 0.3));
        let mut plan = ReferencePlan::hold(&target, cfg.horizon, ControlInput::uniform(params.hover_thrust()));
        plan.tracking = true;
        plan.surface_height = rng.random_range(0.0..0.2);
        let cbf = CbfConfig {
            obstacles: vec![ObstacleSpec::new([-0.5, 0.0], 0.2, 0.3)],
            ..Default::default()
        };
        (x0, plan, cfg, cbf, params)
    }

    #[test]
    fn full_problem_agrees_with_central_differences() {
        let (x0, plan, cfg, cbf, params) = full_instance(1);
        let prob = OcpProblem::new(x0, &plan, &cfg, &cbf, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let (z, mult) = random_probe(&prob, &mut rng);
            let report = gradient_check(&prob, &z, &mult, 10.0, 1e-6, 1e-5).unwrap();
            assert!(report.passed, "{report:?}");
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let (x0, plan, cfg, cbf, params) = full_instance(2);
        let prob = OcpProblem::new(x0, &plan, &cfg, &cbf, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (z, mult) = random_probe(&prob, &mut rng);
        let (_, mut grad) = prob.augmented_gradient(&z, &mult, 10.0).unwrap();
        let worst = (0..grad.len())
            .max_by(|a, b| grad[*a].abs().total_cmp(&grad[*b].abs()))
            .unwrap();
        grad[worst] *= 1.1;
        let value = |p: &[f64]| prob.augmented_value(p, &mult, 10.0).unwrap();
        let report = check_gradient(value, &grad, &z, 1e-6, 1e-5);
        assert!(!report.passed);
        assert_eq!(report.worst_index, worst);
    }
}
