//! Rigid-body quadrotor model: motor mixing, in-ground-effect thrust
//! augmentation, the 12-state continuous dynamics and the two fixed-step
//! integrators (explicit Euler for prediction, RK4 for the plant).
//!
//! State layout used everywhere a flat vector is needed:
//! `[p_x, p_y, p_z, v_x, v_y, v_z, roll, pitch, yaw, w_x, w_y, w_z]`.

use nalgebra::{SMatrix, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NX: usize = 12;
pub const NU: usize = 4;

pub type Vector12 = SVector<f64, NX>;
pub type StateJacobian = SMatrix<f64, NX, NX>;
pub type InputJacobian = SMatrix<f64, NX, NU>;

/// Distance from the Euler-map singularity at which the model refuses to
/// evaluate.
pub const SINGULARITY_TOL: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("Euler-angle map is singular (roll = {roll}, pitch = {pitch})")]
    SingularAttitude { roll: f64, pitch: f64 },
    #[error("state contains non-finite components")]
    NonFinite,
    #[error("invalid quadrotor parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State12 {
    /// Position, world frame (m).
    pub p: Vector3<f64>,
    /// Linear velocity, world frame (m/s).
    pub v: Vector3<f64>,
    /// Roll, pitch, yaw (rad).
    pub q: Vector3<f64>,
    /// Body angular rates (rad/s).
    pub w: Vector3<f64>,
}

impl Default for State12 {
    fn default() -> Self {
        Self::at_rest(Vector3::zeros())
    }
}

impl State12 {
    pub fn at_rest(p: Vector3<f64>) -> Self {
        Self {
            p,
            v: Vector3::zeros(),
            q: Vector3::zeros(),
            w: Vector3::zeros(),
        }
    }

    pub fn to_vector(&self) -> Vector12 {
        let mut out = Vector12::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&self.p);
        out.fixed_rows_mut::<3>(3).copy_from(&self.v);
        out.fixed_rows_mut::<3>(6).copy_from(&self.q);
        out.fixed_rows_mut::<3>(9).copy_from(&self.w);
        out
    }

    pub fn from_vector(x: &Vector12) -> Self {
        Self {
            p: x.fixed_rows::<3>(0).into_owned(),
            v: x.fixed_rows::<3>(3).into_owned(),
            q: x.fixed_rows::<3>(6).into_owned(),
            w: x.fixed_rows::<3>(9).into_owned(),
        }
    }

    pub fn to_array(&self) -> [f64; NX] {
        self.to_vector().into()
    }

    pub fn from_array(a: [f64; NX]) -> Self {
        Self::from_vector(&Vector12::from(a))
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|c| c.is_finite())
    }

    /// Checks the type invariants: finite components and a nonsingular
    /// Euler-rate map.
    pub fn check(&self) -> Result<(), DynamicsError> {
        if !self.is_finite() {
            return Err(DynamicsError::NonFinite);
        }
        let limit = std::f64::consts::FRAC_PI_2 - SINGULARITY_TOL;
        if self.q.x.abs() >= limit || self.q.y.abs() >= limit {
            return Err(DynamicsError::SingularAttitude {
                roll: self.q.x,
                pitch: self.q.y,
            });
        }
        Ok(())
    }
}

/// Four per-motor thrusts (N).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub u: Vector4<f64>,
}

impl ControlInput {
    pub fn new(u1: f64, u2: f64, u3: f64, u4: f64) -> Self {
        Self {
            u: Vector4::new(u1, u2, u3, u4),
        }
    }

    pub fn uniform(c: f64) -> Self {
        Self::new(c, c, c, c)
    }

    pub fn zero() -> Self {
        Self::uniform(0.0)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        Self {
            u: self.u.map(|c| c.clamp(lo, hi)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadrotorParams {
    /// kg
    pub mass: f64,
    /// Moment arm along body x (m).
    pub arm_x: f64,
    /// Moment arm along body y (m).
    pub arm_y: f64,
    /// Yaw torque per newton of rotor thrust (N·m/N).
    pub yaw_coeff: f64,
    /// Diagonal inertia (kg·m²).
    pub inertia: [f64; 3],
    pub rotor_radius: f64,
    /// Regularizer in the ground-effect denominator (m).
    pub ge_eps: f64,
    /// Upper clamp on the ground-effect multiplier.
    pub ge_max: f64,
    /// Half-width (in multiplier units) of the C1 blend that rounds the
    /// clamp corner; 0 gives the hard clamp.
    pub ge_blend: f64,
    pub gravity: f64,
    /// Height of the world ground plane (m).
    pub z_ground: f64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            mass: 1.5,
            arm_x: 0.12,
            arm_y: 0.12,
            yaw_coeff: 0.016,
            inertia: [0.02, 0.02, 0.035],
            rotor_radius: 0.12,
            ge_eps: 0.01,
            ge_max: 1.5,
            ge_blend: 0.1,
            gravity: 9.81,
            z_ground: 0.0,
        }
    }
}

impl QuadrotorParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |msg: &str| Err(DynamicsError::InvalidParams(msg.to_string()));
        if !(self.mass > 0.0) {
            return bad("mass must be positive");
        }
        if self.inertia.iter().any(|j| !(*j > 0.0)) {
            return bad("inertia entries must be positive");
        }
        if !(self.rotor_radius > 0.0) {
            return bad("rotor_radius must be positive");
        }
        if !(self.ge_eps > 0.0) {
            return bad("ge_eps must be positive");
        }
        if !(self.ge_max >= 1.0) {
            return bad("ge_max must be at least 1");
        }
        if !(self.ge_blend >= 0.0 && self.ge_blend <= self.ge_max - 1.0) {
            return bad("ge_blend must lie in [0, ge_max - 1]");
        }
        if !(self.gravity > 0.0) {
            return bad("gravity must be positive");
        }
        if !(self.arm_x >= 0.0 && self.arm_y >= 0.0 && self.yaw_coeff >= 0.0) {
            return bad("arm lengths and yaw coefficient must be non-negative");
        }
        Ok(())
    }

    /// Per-motor thrust that balances gravity out of ground effect.
    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity / 4.0
    }

    /// Signed torque allocation matrix (rows: roll, pitch, yaw).
    pub fn torque_matrix(&self) -> SMatrix<f64, 3, 4> {
        let (lx, ly, kt) = (self.arm_x, self.arm_y, self.yaw_coeff);
        SMatrix::<f64, 3, 4>::new(
            -ly, ly, ly, -ly, //
            -lx, lx, -lx, lx, //
            kt, kt, -kt, -kt,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyWrench {
    pub total_thrust: f64,
    pub torque: Vector3<f64>,
}

pub fn mix(u: &ControlInput, params: &QuadrotorParams) -> BodyWrench {
    BodyWrench {
        total_thrust: u.u.sum(),
        torque: params.torque_matrix() * u.u,
    }
}

/// In-ground-effect thrust multiplier `1 / (1 - (r / 4(z_r + eps))^2)`,
/// clamped to `[1, ge_max]`. Negative heights are treated as contact.
///
/// With `ge_blend = b > 0` the clamp is the quadratic soft minimum
/// `k - (k - ge_max + b)^2 / 4b` for raw values within `b` of `ge_max`,
/// which keeps the multiplier continuously differentiable in height.
pub fn ground_effect_multiplier(z_r: f64, params: &QuadrotorParams) -> f64 {
    ground_effect_with_slope(z_r, params).0
}

/// Multiplier and its derivative with respect to `z_r` (zero where clamped).
pub fn ground_effect_with_slope(z_r: f64, params: &QuadrotorParams) -> (f64, f64) {
    let h = z_r.max(0.0) + params.ge_eps;
    let ratio = params.rotor_radius / (4.0 * h);
    let s = ratio * ratio;
    if s >= 1.0 {
        return (params.ge_max, 0.0);
    }
    let k = 1.0 / (1.0 - s);
    let b = params.ge_blend;
    if k >= params.ge_max + b {
        return (params.ge_max, 0.0);
    }
    let slope = if z_r > 0.0 { -2.0 * s * k * k / h } else { 0.0 };
    let e = k - params.ge_max + b;
    if e <= 0.0 {
        return (k, slope);
    }
    (k - e * e / (4.0 * b), slope * (1.0 - e / (2.0 * b)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDerivative(pub Vector12);

impl StateDerivative {
    pub fn p_dot(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }
    pub fn v_dot(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }
    pub fn q_dot(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(6).into_owned()
    }
    pub fn w_dot(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(9).into_owned()
    }
}

/// Third column of the ZYX rotation body→world (the thrust direction).
fn thrust_axis(q: &Vector3<f64>) -> Vector3<f64> {
    let (sf, cf) = q.x.sin_cos();
    let (st, ct) = q.y.sin_cos();
    let (sp, cp) = q.z.sin_cos();
    Vector3::new(cp * st * cf + sp * sf, sp * st * cf - cp * sf, ct * cf)
}

/// Continuous dynamics `f(x, u)`. `z_surface` is the height of the surface
/// under the drone, used for the ground-effect correction.
pub fn derivative(
    x: &State12,
    u: &ControlInput,
    params: &QuadrotorParams,
    z_surface: f64,
) -> Result<StateDerivative, DynamicsError> {
    x.check()?;
    Ok(StateDerivative(raw_derivative(x, u, params, z_surface)))
}

fn raw_derivative(x: &State12, u: &ControlInput, params: &QuadrotorParams, z_surface: f64) -> Vector12 {
    let wrench = mix(u, params);
    let k_ge = ground_effect_multiplier(x.p.z - z_surface, params);
    let accel = thrust_axis(&x.q) * (wrench.total_thrust * k_ge / params.mass) - Vector3::new(0.0, 0.0, params.gravity);

    let (sf, cf) = x.q.x.sin_cos();
    let (st, ct) = x.q.y.sin_cos();
    let tt = st / ct;
    let (wx, wy, wz) = (x.w.x, x.w.y, x.w.z);
    let euler_rates = Vector3::new(
        wx + sf * tt * wy + cf * tt * wz,
        cf * wy - sf * wz,
        (sf * wy + cf * wz) / ct,
    );

    let [jx, jy, jz] = params.inertia;
    let tau = wrench.torque;
    let w_dot = Vector3::new(
        (tau.x - (jz - jy) * wy * wz) / jx,
        (tau.y - (jx - jz) * wz * wx) / jy,
        (tau.z - (jy - jx) * wx * wy) / jz,
    );

    let mut out = Vector12::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&x.v);
    out.fixed_rows_mut::<3>(3).copy_from(&accel);
    out.fixed_rows_mut::<3>(6).copy_from(&euler_rates);
    out.fixed_rows_mut::<3>(9).copy_from(&w_dot);
    out
}

/// Analytic Jacobians `(df/dx, df/du)` of the continuous dynamics.
pub fn derivative_jacobians(
    x: &State12,
    u: &ControlInput,
    params: &QuadrotorParams,
    z_surface: f64,
) -> (StateJacobian, InputJacobian) {
    let mut a = StateJacobian::zeros();
    let mut b = InputJacobian::zeros();

    for i in 0..3 {
        a[(i, 3 + i)] = 1.0;
    }

    let thrust = u.u.sum();
    let (k_ge, dk_dz) = ground_effect_with_slope(x.p.z - z_surface, params);
    let m = params.mass;
    let (sf, cf) = x.q.x.sin_cos();
    let (st, ct) = x.q.y.sin_cos();
    let (sp, cp) = x.q.z.sin_cos();
    let axis = thrust_axis(&x.q);
    let d_axis_roll = Vector3::new(-cp * st * sf + sp * cf, -sp * st * sf - cp * cf, -ct * sf);
    let d_axis_pitch = Vector3::new(cp * ct * cf, sp * ct * cf, -st * cf);
    let d_axis_yaw = Vector3::new(-sp * st * cf + cp * sf, cp * st * cf + sp * sf, 0.0);
    let scale = thrust * k_ge / m;
    for i in 0..3 {
        a[(3 + i, 2)] = thrust * dk_dz / m * axis[i];
        a[(3 + i, 6)] = scale * d_axis_roll[i];
        a[(3 + i, 7)] = scale * d_axis_pitch[i];
        a[(3 + i, 8)] = scale * d_axis_yaw[i];
        for j in 0..4 {
            b[(3 + i, j)] = k_ge / m * axis[i];
        }
    }

    let (wx, wy, wz) = (x.w.x, x.w.y, x.w.z);
    let tt = st / ct;
    let sec2 = 1.0 / (ct * ct);
    // roll rate
    a[(6, 6)] = cf * tt * wy - sf * tt * wz;
    a[(6, 7)] = (sf * wy + cf * wz) * sec2;
    a[(6, 9)] = 1.0;
    a[(6, 10)] = sf * tt;
    a[(6, 11)] = cf * tt;
    // pitch rate
    a[(7, 6)] = -sf * wy - cf * wz;
    a[(7, 10)] = cf;
    a[(7, 11)] = -sf;
    // yaw rate
    a[(8, 6)] = (cf * wy - sf * wz) / ct;
    a[(8, 7)] = (sf * wy + cf * wz) * st * sec2;
    a[(8, 10)] = sf / ct;
    a[(8, 11)] = cf / ct;

    let [jx, jy, jz] = params.inertia;
    a[(9, 10)] = -(jz - jy) * wz / jx;
    a[(9, 11)] = -(jz - jy) * wy / jx;
    a[(10, 9)] = -(jx - jz) * wz / jy;
    a[(10, 11)] = -(jx - jz) * wx / jy;
    a[(11, 9)] = -(jy - jx) * wy / jz;
    a[(11, 10)] = -(jy - jx) * wx / jz;

    let torque = params.torque_matrix();
    for j in 0..4 {
        b[(9, j)] = torque[(0, j)] / jx;
        b[(10, j)] = torque[(1, j)] / jy;
        b[(11, j)] = torque[(2, j)] / jz;
    }
    (a, b)
}

/// One explicit Euler step; this is the discretization used by the
/// prediction model.
pub fn euler_step(
    x: &State12,
    u: &ControlInput,
    dt: f64,
    params: &QuadrotorParams,
    z_surface: f64,
) -> Result<State12, DynamicsError> {
    let f = derivative(x, u, params, z_surface)?;
    Ok(State12::from_vector(&(x.to_vector() + f.0 * dt)))
}

/// Jacobians of [`euler_step`] with respect to the state and the input.
pub fn euler_step_jacobians(
    x: &State12,
    u: &ControlInput,
    dt: f64,
    params: &QuadrotorParams,
    z_surface: f64,
) -> (StateJacobian, InputJacobian) {
    let (a, b) = derivative_jacobians(x, u, params, z_surface);
    (StateJacobian::identity() + a * dt, b * dt)
}

/// Classical four-stage Runge-Kutta step.
pub fn rk4_step(
    x: &State12,
    u: &ControlInput,
    dt: f64,
    params: &QuadrotorParams,
    z_surface: f64,
) -> Result<State12, DynamicsError> {
    let x0 = x.to_vector();
    let eval = |v: &Vector12| derivative(&State12::from_vector(v), u, params, z_surface).map(|d| d.0);
    let k1 = eval(&x0)?;
    let k2 = eval(&(x0 + k1 * (dt / 2.0)))?;
    let k3 = eval(&(x0 + k2 * (dt / 2.0)))?;
    let k4 = eval(&(x0 + k3 * dt))?;
    let next = x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let out = State12::from_vector(&next);
    out.check()?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// One explicit Euler step per control period (matches the prediction model).
    Euler,
    #[default]
    Rk4,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn symmetric_thrust_has_no_torque() {
        let p = QuadrotorParams::default();
        for c in [0.0, 1.0, 3.3, 7.5] {
            let w = mix(&ControlInput::uniform(c), &p);
            assert_eq!(w.torque, Vector3::zeros());
            assert!(close(w.total_thrust, 4.0 * c, 1e-12));
        }
    }

    #[test]
    fn mixing_hand_evaluation() {
        let p = QuadrotorParams {
            arm_x: 0.1,
            arm_y: 0.1,
            yaw_coeff: 0.02,
            ..Default::default()
        };
        let w = mix(&ControlInput::new(1.0, 2.0, 3.0, 4.0), &p);
        assert!(close(w.torque.x, 0.0, 1e-12));
        assert!(close(w.torque.y, 0.2, 1e-12));
        assert!(close(w.torque.z, -0.08, 1e-12));
        assert_eq!(w.total_thrust, 10.0);
        let z = mix(&ControlInput::zero(), &p);
        assert_eq!(z.total_thrust, 0.0);
        assert_eq!(z.torque, Vector3::zeros());
    }

    #[test]
    fn ground_effect_values() {
        let p = QuadrotorParams::default();
        assert!(close(ground_effect_multiplier(0.11, &p), 1.0 / 0.9375, 1e-12));
        assert!(close(ground_effect_multiplier(1e6, &p), 1.0, 1e-12));
        assert_eq!(ground_effect_multiplier(0.0, &p), p.ge_max);
        assert_eq!(ground_effect_multiplier(-0.5, &p), p.ge_max);
    }

    #[test]
    fn ground_effect_clamp_threshold_matches_bisection() {
        let p = QuadrotorParams {
            ge_blend: 0.0,
            ..Default::default()
        };
        let raw = |z: f64| {
            let r = p.rotor_radius / (4.0 * (z + p.ge_eps));
            1.0 / (1.0 - r * r)
        };
        // Bisection on the raw formula for the height where it reaches ge_max,
        // starting above the pole at z + eps = r / 4.
        let (mut lo, mut hi) = (p.rotor_radius / 4.0 - p.ge_eps + 1e-9, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if raw(mid) > p.ge_max {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let threshold = 0.5 * (lo + hi);
        assert!(close(threshold, 0.12 * 3f64.sqrt() / 4.0 - 0.01, 1e-9));
        assert_eq!(ground_effect_multiplier(threshold - 1e-7, &p), p.ge_max);
        assert!(ground_effect_multiplier(threshold + 1e-7, &p) < p.ge_max);
    }

    #[test]
    fn ground_effect_slope_matches_finite_difference() {
        let p = QuadrotorParams::default();
        for z in [0.06, 0.1, 0.3, 1.0] {
            let h = 1e-6;
            let fd = (ground_effect_multiplier(z + h, &p) - ground_effect_multiplier(z - h, &p)) / (2.0 * h);
            let (_, slope) = ground_effect_with_slope(z, &p);
            assert!(
                (fd - slope).abs() <= 1e-6 * slope.abs().max(1e-3),
                "z={z}: {fd} vs {slope}"
            );
        }
    }

    #[test]
    fn blended_ground_effect_is_c1_and_bounded() {
        let p = QuadrotorParams::default();
        let mut prev = (p.ge_max, 0.0);
        let step = 1e-5;
        let mut z = 0.0;
        while z < 0.2 {
            z += step;
            let (k, slope) = ground_effect_with_slope(z, &p);
            assert!((1.0..=p.ge_max).contains(&k), "z={z}: {k}");
            assert!(k <= prev.0 + 1e-15, "not monotone at z={z}");
            assert!((k - prev.0).abs() < 1e-3, "jump at z={z}");
            assert!(
                (slope - prev.1).abs() < 0.5,
                "slope jump at z={z}: {} -> {slope}",
                prev.1
            );
            prev = (k, slope);
        }
    }

    #[test]
    fn hover_balances_gravity() {
        let p = QuadrotorParams::default();
        let x = State12::at_rest(Vector3::new(0.0, 0.0, 100.0));
        let f = derivative(&x, &ControlInput::uniform(p.hover_thrust()), &p, 0.0).unwrap();
        assert!(f.v_dot().norm() < 1e-6, "{:?}", f.v_dot());
    }

    #[test]
    fn free_fall_any_attitude() {
        let p = QuadrotorParams::default();
        let x = State12 {
            p: Vector3::new(1.0, 2.0, 3.0),
            v: Vector3::new(0.3, -0.2, 0.1),
            q: Vector3::new(0.3, -0.4, 1.2),
            w: Vector3::new(0.5, -1.0, 2.0),
        };
        let f = derivative(&x, &ControlInput::zero(), &p, 0.0).unwrap();
        assert_eq!(f.v_dot(), Vector3::new(0.0, 0.0, -p.gravity));
        let j = Vector3::from(p.inertia);
        let jw = x.w.component_mul(&j);
        let expected = -(x.w.cross(&jw)).component_div(&j);
        assert!((f.w_dot() - expected).norm() < 1e-12);
    }

    #[test]
    fn near_ground_hover_accelerates_upward() {
        let p = QuadrotorParams::default();
        let x = State12::at_rest(Vector3::new(0.0, 0.0, 0.11));
        let f = derivative(&x, &ControlInput::uniform(p.hover_thrust()), &p, 0.0).unwrap();
        let expected = p.gravity * (1.0 / 0.9375 - 1.0);
        assert!(close(f.v_dot().z, expected, 1e-9));
        assert!(close(f.v_dot().z, 0.654, 1e-3));
    }

    #[test]
    fn singular_attitude_is_a_fault() {
        let p = QuadrotorParams::default();
        let mut x = State12::default();
        x.q.y = std::f64::consts::FRAC_PI_2;
        assert!(matches!(
            derivative(&x, &ControlInput::zero(), &p, 0.0),
            Err(DynamicsError::SingularAttitude { .. })
        ));
        x.q.y = 0.0;
        x.p.x = f64::NAN;
        assert_eq!(
            derivative(&x, &ControlInput::zero(), &p, 0.0),
            Err(DynamicsError::NonFinite)
        );
    }

    #[test]
    fn euler_free_fall_one_step() {
        let p = QuadrotorParams::default();
        let x = State12::at_rest(Vector3::new(0.0, 0.0, 5.0));
        let next = euler_step(&x, &ControlInput::zero(), 0.1, &p, 0.0).unwrap();
        assert!(close(next.v.z, -0.981, 1e-12));
        assert_eq!(next.p.z, 5.0);
    }

    #[test]
    fn zero_dt_is_identity() {
        let p = QuadrotorParams::default();
        let x = State12 {
            p: Vector3::new(1.0, -2.0, 3.0),
            v: Vector3::new(0.3, 0.2, -0.1),
            q: Vector3::new(0.1, 0.05, -0.3),
            w: Vector3::new(0.2, 0.1, 0.0),
        };
        let u = ControlInput::new(3.0, 4.0, 3.5, 3.9);
        assert_eq!(euler_step(&x, &u, 0.0, &p, 0.0).unwrap(), x);
        assert_eq!(rk4_step(&x, &u, 0.0, &p, 0.0).unwrap(), x);
    }

    #[test]
    fn hover_is_a_fixed_point() {
        let p = QuadrotorParams::default();
        let x = State12::at_rest(Vector3::new(0.5, 0.5, 1e4));
        let u = ControlInput::uniform(p.hover_thrust());
        let e = euler_step(&x, &u, 0.1, &p, 0.0).unwrap();
        let r = rk4_step(&x, &u, 0.1, &p, 0.0).unwrap();
        assert!((e.to_vector() - x.to_vector()).norm() < 1e-8);
        assert!((r.to_vector() - x.to_vector()).norm() < 1e-8);
    }

    #[test]
    fn rk4_free_fall_matches_closed_form() {
        let p = QuadrotorParams::default();
        let mut x = State12::at_rest(Vector3::new(0.0, 0.0, 10.0));
        for _ in 0..10 {
            x = rk4_step(&x, &ControlInput::zero(), 0.1, &p, 0.0).unwrap();
        }
        assert!(close(x.v.z, -9.81, 1e-9));
        assert!(close(10.0 - x.p.z, 4.905, 1e-9));
    }

    #[test]
    fn jacobians_match_central_differences() {
        let p = QuadrotorParams::default();
        let x = State12 {
            p: Vector3::new(0.3, -0.2, 0.2),
            v: Vector3::new(0.4, -0.3, 0.2),
            q: Vector3::new(0.2, -0.3, 0.7),
            w: Vector3::new(0.5, -0.4, 0.3),
        };
        let u = ControlInput::new(3.0, 4.2, 3.7, 3.1);
        let (a, b) = derivative_jacobians(&x, &u, &p, 0.0);
        let h = 1e-6;
        let x0 = x.to_vector();
        for j in 0..NX {
            let mut xp = x0;
            let mut xm = x0;
            xp[j] += h;
            xm[j] -= h;
            let fp = raw_derivative(&State12::from_vector(&xp), &u, &p, 0.0);
            let fm = raw_derivative(&State12::from_vector(&xm), &u, &p, 0.0);
            let col = (fp - fm) / (2.0 * h);
            for i in 0..NX {
                assert!(
                    (col[i] - a[(i, j)]).abs() < 1e-6,
                    "A[{i},{j}]: fd {} vs {}",
                    col[i],
                    a[(i, j)]
                );
            }
        }
        for j in 0..NU {
            let mut up = u;
            let mut um = u;
            up.u[j] += h;
            um.u[j] -= h;
            let col = (raw_derivative(&x, &up, &p, 0.0) - raw_derivative(&x, &um, &p, 0.0)) / (2.0 * h);
            for i in 0..NX {
                assert!((col[i] - b[(i, j)]).abs() < 1e-6, "B[{i},{j}]");
            }
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = QuadrotorParams::default();
        assert!(p.validate().is_ok());
        p.mass = 0.0;
        assert!(p.validate().is_err());
        p = QuadrotorParams {
            inertia: [0.02, -1.0, 0.03],
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
