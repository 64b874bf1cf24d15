//! Cylindrical obstacle barriers and the discrete-time decay condition
//! `h(x_{k+1}) >= (1 - gamma) h(x_k)`.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::State12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CbfError {
    #[error("gamma must lie in (0, 1], got {0}")]
    Gamma(f64),
    #[error("obstacle {index}: {reason}")]
    Obstacle { index: usize, reason: String },
}

/// Infinite vertical cylinder in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub center: [f64; 2],
    /// Physical radius (m).
    pub radius: f64,
    /// Extra clearance added to the radius (m).
    pub safety_margin: f64,
}

impl ObstacleSpec {
    pub fn new(center: [f64; 2], radius: f64, safety_margin: f64) -> Self {
        Self {
            center,
            radius,
            safety_margin,
        }
    }

    pub fn r_safe(&self) -> f64 {
        self.radius + self.safety_margin
    }

    /// Same obstacle with the clearance grown by `extra` metres.
    pub fn inflated(&self, extra: f64) -> Self {
        Self {
            safety_margin: self.safety_margin + extra,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.radius > 0.0) {
            return Err("radius must be positive".into());
        }
        if !(self.safety_margin >= 0.0) {
            return Err("safety margin must be non-negative".into());
        }
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err("center must be finite".into());
        }
        Ok(())
    }
}

fn default_gamma() -> f64 {
    0.4
}

fn default_backoff() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbfConfig {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
    /// Radius added to every obstacle inside the optimizer only. Absorbs the
    /// Euler-prediction vs plant mismatch; logged barrier values always use
    /// the nominal `r_safe`.
    #[serde(default = "default_backoff")]
    pub solver_backoff: f64,
}

impl Default for CbfConfig {
    fn default() -> Self {
        Self {
            gamma: default_gamma(),
            obstacles: Vec::new(),
            solver_backoff: default_backoff(),
        }
    }
}

impl CbfConfig {
    pub fn validate(&self) -> Result<(), CbfError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(CbfError::Gamma(self.gamma));
        }
        for (index, obs) in self.obstacles.iter().enumerate() {
            obs.validate().map_err(|reason| CbfError::Obstacle { index, reason })?;
        }
        if !(self.solver_backoff >= 0.0) {
            return Err(CbfError::Obstacle {
                index: 0,
                reason: "solver_backoff must be non-negative".into(),
            });
        }
        Ok(())
    }

    /// Obstacles as seen by the optimizer (inflated by the back-off).
    pub fn solver_obstacles(&self) -> Vec<ObstacleSpec> {
        self.obstacles.iter().map(|o| o.inflated(self.solver_backoff)).collect()
    }
}

/// `h = (x - x_obs)^2 + (y - y_obs)^2 - r_safe^2`.
pub fn barrier_value(pos_xy: Vector2<f64>, obs: &ObstacleSpec) -> f64 {
    let d = pos_xy - Vector2::from(obs.center);
    let r = obs.r_safe();
    d.norm_squared() - r * r
}

pub fn barrier_gradient(pos_xy: Vector2<f64>, obs: &ObstacleSpec) -> Vector2<f64> {
    (pos_xy - Vector2::from(obs.center)) * 2.0
}

pub fn state_barrier(x: &State12, obs: &ObstacleSpec) -> f64 {
    barrier_value(x.p.xy(), obs)
}

/// Residual of the decay condition from precomputed barrier values.
/// Non-negative means satisfied.
pub fn decay_residual(h_next: f64, h_now: f64, gamma: f64) -> f64 {
    h_next - (1.0 - gamma) * h_now
}

pub fn cbf_residual(x_k: &State12, x_k1: &State12, obs: &ObstacleSpec, gamma: f64) -> f64 {
    decay_residual(state_barrier(x_k1, obs), state_barrier(x_k, obs), gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn origin_obstacle() -> ObstacleSpec {
        ObstacleSpec::new([0.0, 0.0], 0.2, 0.3)
    }

    #[test]
    fn barrier_hand_values() {
        let obs = origin_obstacle();
        assert!((barrier_value(Vector2::new(1.0, 0.0), &obs) - 0.75).abs() < 1e-15);
        assert!(barrier_value(Vector2::new(0.0, 0.5), &obs).abs() < 1e-15);
        assert!((barrier_value(Vector2::new(0.0, 0.0), &obs) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn gradient_hand_values() {
        let obs = origin_obstacle();
        assert_eq!(barrier_gradient(Vector2::new(1.0, 0.0), &obs), Vector2::new(2.0, 0.0));
        let off = ObstacleSpec::new([1.5, -2.0], 0.1, 0.0);
        assert_eq!(barrier_gradient(Vector2::new(1.5, -2.0), &off), Vector2::zeros());
    }

    #[test]
    fn residual_hand_arithmetic() {
        assert!((decay_residual(0.5, 0.75, 0.4) - 0.05).abs() < 1e-12);
        assert!((decay_residual(0.40, 0.75, 0.4) + 0.05).abs() < 1e-12);
    }

    #[test]
    fn stationary_residual_is_gamma_h() {
        let obs = origin_obstacle();
        for p in [Vector3::new(1.0, 0.0, 1.0), Vector3::new(0.1, 0.1, 1.0)] {
            let x = State12::at_rest(p);
            let h0 = state_barrier(&x, &obs);
            let r = cbf_residual(&x, &x, &obs, 0.4);
            assert!((r - 0.4 * h0).abs() < 1e-15);
            assert_eq!(r >= 0.0, h0 >= 0.0);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = CbfConfig::default();
        assert_eq!(cfg.gamma, 0.4);
        assert!(cfg.validate().is_ok());
        cfg.gamma = 0.0;
        assert!(cfg.validate().is_err());
        cfg.gamma = 1.0;
        cfg.obstacles.push(ObstacleSpec::new([0.0, 0.0], -0.1, 0.3));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn inflation_grows_safe_radius() {
        let obs = origin_obstacle().inflated(0.05);
        assert!((obs.r_safe() - 0.55).abs() < 1e-15);
    }
}
