use nalgebra::{SMatrix, SVector, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use super::linalg::BandedSym;
use super::{DecisionVector, NmpcConfig, OcpError, ReferencePlan};
use crate::cbf::{barrier_gradient, barrier_value, CbfConfig, ObstacleSpec};
use crate::dynamics::{
    derivative, euler_step, euler_step_jacobians, ControlInput, QuadrotorParams, State12, Vector12, NU, NX,
};

pub(crate) const STRIDE: usize = NX + NU;
/// Stage variables (states, then controls) the Euler step is nonlinear in:
/// altitude, attitude, body rates and the four thrusts.
const CURVED: [usize; 11] = [2, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15];
/// Widest coupling in the interleaved layout: `X[k]`, `U[k]`, `X[k+1]`.
const BANDWIDTH: usize = 2 * NX + NU - 1;

/// Lagrange multiplier estimates for the defects and the CBF inequalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub defect: Vec<Vector12>,
    /// Row-major `[k * n_obstacles + j]`, all non-negative.
    pub cbf: Vec<f64>,
}

impl Multipliers {
    pub fn zeros(horizon: usize, n_obstacles: usize) -> Self {
        Self {
            defect: vec![Vector12::zeros(); horizon],
            cbf: vec![0.0; horizon * n_obstacles],
        }
    }

    pub fn fits(&self, horizon: usize, n_obstacles: usize) -> bool {
        self.defect.len() == horizon && self.cbf.len() == horizon * n_obstacles
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Evaluation {
    /// Augmented Lagrangian value.
    pub phi: f64,
    pub defects: Vec<Vector12>,
    pub cbf: Vec<f64>,
}

impl Evaluation {
    pub fn defect_norm(&self) -> f64 {
        self.defects.iter().map(|d| d.amax()).fold(0.0, f64::max)
    }

    pub fn cbf_violation(&self) -> f64 {
        self.cbf.iter().fold(0.0, |acc: f64, c| acc.max(-c))
    }

    pub fn min_cbf(&self) -> f64 {
        self.cbf.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// One instance of the landing OCP with the pinned initial state: the
/// augmented-Lagrangian objective over the flat decision vector, its
/// gradient and its Gauss-Newton approximation.
pub struct OcpProblem<'a> {
    x_init: State12,
    plan: &'a ReferencePlan,
    cfg: &'a NmpcConfig,
    params: &'a QuadrotorParams,
    obstacles: Vec<ObstacleSpec>,
    /// Per-obstacle offset subtracted from the stage-0 CBF residual.
    first_row_shift: Vec<f64>,
    gamma: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[inline]
fn x_offset(k: usize) -> usize {
    debug_assert!(k >= 1);
    STRIDE * k - NX
}

#[inline]
fn u_offset(k: usize) -> usize {
    STRIDE * k
}

impl<'a> OcpProblem<'a> {
    pub fn new(
        x_init: State12,
        plan: &'a ReferencePlan,
        cfg: &'a NmpcConfig,
        cbf_cfg: &CbfConfig,
        params: &'a QuadrotorParams,
    ) -> Result<Self, OcpError> {
        cfg.validate()?;
        plan.validate(cfg.horizon)?;
        cbf_cfg.validate().map_err(|e| OcpError::Config(e.to_string()))?;
        if !x_init.is_finite() {
            return Err(OcpError::NonFiniteInit);
        }
        let n = cfg.horizon;
        let (xlo, xhi) = cfg.state_bounds.as_arrays();
        let mut lower = Vec::with_capacity(STRIDE * n);
        let mut upper = Vec::with_capacity(STRIDE * n);
        for _ in 0..n {
            lower.extend([cfg.u_min; NU]);
            upper.extend([cfg.u_max; NU]);
            lower.extend(xlo);
            upper.extend(xhi);
        }
        // Position and attitude of X1 do not depend on U0 under the Euler
        // model, so their boxes are widened to contain the forced values.
        let forced = euler_step(&x_init, &plan.u_ref[0], cfg.dt, params, plan.surface_height)?.to_vector();
        for i in (0..3).chain(6..9) {
            lower[NU + i] = lower[NU + i].min(forced[i]);
            upper[NU + i] = upper[NU + i].max(forced[i]);
        }
        // For the same reason the first CBF row is fixed by `x_init`; when it
        // is already violated it is relaxed to the forced value.
        let obstacles = cbf_cfg.solver_obstacles();
        let keep = 1.0 - cbf_cfg.gamma;
        let p1 = Vector2::new(forced[0], forced[1]);
        let first_row_shift = obstacles
            .iter()
            .map(|o| (barrier_value(p1, o) - keep * barrier_value(x_init.p.xy(), o)).min(0.0))
            .collect();
        Ok(Self {
            x_init,
            plan,
            cfg,
            params,
            obstacles,
            first_row_shift,
            gamma: cbf_cfg.gamma,
            lower,
            upper,
        })
    }

    fn cbf_row(&self, p0: Vector2<f64>, p1: Vector2<f64>, k: usize, j: usize, obs: &ObstacleSpec, keep: f64) -> f64 {
        let c = barrier_value(p1, obs) - keep * barrier_value(p0, obs);
        if k == 0 {
            c - self.first_row_shift[j]
        } else {
            c
        }
    }

    /// Largest box violation of `z` against this problem's bounds.
    pub fn bound_violation(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .fold(0.0, |acc: f64, (v, (lo, hi))| acc.max(lo - v).max(v - hi))
    }

    pub fn dim(&self) -> usize {
        STRIDE * self.cfg.horizon
    }

    pub fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    pub fn n_obstacles(&self) -> usize {
        self.obstacles.len()
    }

    pub fn x_init(&self) -> &State12 {
        &self.x_init
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn project(&self, z: &mut [f64]) {
        for ((v, lo), hi) in z.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    pub fn pack(&self, d: &DecisionVector) -> Vec<f64> {
        let mut z = vec![0.0; self.dim()];
        for k in 0..self.horizon() {
            z[u_offset(k)..u_offset(k) + NU].copy_from_slice(d.controls[k].u.as_slice());
            z[x_offset(k + 1)..x_offset(k + 1) + NX].copy_from_slice(&d.states[k + 1].to_array());
        }
        z
    }

    pub fn unpack(&self, z: &[f64]) -> DecisionVector {
        let n = self.horizon();
        DecisionVector {
            states: (0..=n).map(|k| self.node(z, k)).collect(),
            controls: (0..n).map(|k| self.control(z, k)).collect(),
        }
    }

    fn node(&self, z: &[f64], k: usize) -> State12 {
        if k == 0 {
            self.x_init
        } else {
            let o = x_offset(k);
            State12::from_array(z[o..o + NX].try_into().expect("node slice"))
        }
    }

    fn control(&self, z: &[f64], k: usize) -> ControlInput {
        let o = u_offset(k);
        ControlInput {
            u: Vector4::from_column_slice(&z[o..o + NU]),
        }
    }

    pub fn augmented_value(&self, z: &[f64], mult: &Multipliers, rho: f64) -> Result<f64, OcpError> {
        Ok(self.evaluate(z, mult, rho, None)?.phi)
    }

    pub fn augmented_gradient(&self, z: &[f64], mult: &Multipliers, rho: f64) -> Result<(f64, Vec<f64>), OcpError> {
        let mut g = vec![0.0; self.dim()];
        let e = self.evaluate(z, mult, rho, Some(&mut g))?;
        Ok((e.phi, g))
    }

    /// Objective, constraints and (optionally) the gradient of
    /// `J + sum(lambda.d + rho/2 |d|^2) + sum((max(0, mu - rho c)^2 - mu^2) / 2 rho)`.
    pub(crate) fn evaluate(
        &self,
        z: &[f64],
        mult: &Multipliers,
        rho: f64,
        mut grad: Option<&mut [f64]>,
    ) -> Result<Evaluation, OcpError> {
        let n = self.horizon();
        let m = self.obstacles.len();
        let cfg = self.cfg;
        let plan = self.plan;
        let states: Vec<State12> = (0..=n).map(|k| self.node(z, k)).collect();
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }

        let mut cost = 0.0;
        for k in 0..n {
            let x = states[k].to_array();
            let r = plan.states[k].to_array();
            let u = self.control(z, k);
            for i in 0..NX {
                let e = x[i] - r[i];
                cost += cfg.q[i] * e * e;
                if k >= 1 {
                    if let Some(g) = grad.as_deref_mut() {
                        g[x_offset(k) + i] += 2.0 * cfg.q[i] * e;
                    }
                }
            }
            for j in 0..NU {
                let e = u.u[j] - plan.u_ref[k].u[j];
                cost += cfg.r[j] * e * e;
                if let Some(g) = grad.as_deref_mut() {
                    g[u_offset(k) + j] += 2.0 * cfg.r[j] * e;
                }
            }
            if plan.tracking {
                for i in 0..3 {
                    let e = x[i] - plan.platform[k][i];
                    cost += cfg.lambda[i] * e * e;
                    if k >= 1 {
                        if let Some(g) = grad.as_deref_mut() {
                            g[x_offset(k) + i] += 2.0 * cfg.lambda[i] * e;
                        }
                    }
                }
            }
        }
        let xn = states[n].to_array();
        let rf = plan.terminal.to_array();
        for i in 0..NX {
            let e = xn[i] - rf[i];
            cost += cfg.q_terminal[i] * e * e;
            if let Some(g) = grad.as_deref_mut() {
                g[x_offset(n) + i] += 2.0 * cfg.q_terminal[i] * e;
            }
        }

        let mut phi = cost;
        let mut defects = Vec::with_capacity(n);
        for k in 0..n {
            let u = self.control(z, k);
            let f = derivative(&states[k], &u, self.params, plan.surface_height)?;
            let pred = states[k].to_vector() + f.0 * cfg.dt;
            let d = states[k + 1].to_vector() - pred;
            let lam = &mult.defect[k];
            phi += lam.dot(&d) + 0.5 * rho * d.norm_squared();
            if let Some(g) = grad.as_deref_mut() {
                let y = lam + d * rho;
                let o1 = x_offset(k + 1);
                for i in 0..NX {
                    g[o1 + i] += y[i];
                }
                let (ad, bd) = euler_step_jacobians(&states[k], &u, cfg.dt, self.params, plan.surface_height);
                let gu = bd.tr_mul(&y);
                for j in 0..NU {
                    g[u_offset(k) + j] -= gu[j];
                }
                if k >= 1 {
                    let gx = ad.tr_mul(&y);
                    let o0 = x_offset(k);
                    for i in 0..NX {
                        g[o0 + i] -= gx[i];
                    }
                }
            }
            defects.push(d);
        }

        let mut cbf = Vec::with_capacity(n * m);
        let keep = 1.0 - self.gamma;
        for k in 0..n {
            let p0 = states[k].p.xy();
            let p1 = states[k + 1].p.xy();
            for (j, obs) in self.obstacles.iter().enumerate() {
                let c = self.cbf_row(p0, p1, k, j, obs, keep);
                let mu = mult.cbf[k * m + j];
                let sigma = if rho > 0.0 {
                    let s = (mu - rho * c).max(0.0);
                    phi += (s * s - mu * mu) / (2.0 * rho);
                    s
                } else {
                    phi -= mu * c;
                    mu
                };
                if sigma > 0.0 {
                    if let Some(g) = grad.as_deref_mut() {
                        let g1: Vector2<f64> = barrier_gradient(p1, obs);
                        let o1 = x_offset(k + 1);
                        g[o1] -= sigma * g1.x;
                        g[o1 + 1] -= sigma * g1.y;
                        if k >= 1 {
                            let g0 = barrier_gradient(p0, obs);
                            let o0 = x_offset(k);
                            g[o0] += sigma * keep * g0.x;
                            g[o0 + 1] += sigma * keep * g0.y;
                        }
                    }
                }
                cbf.push(c);
            }
        }

        Ok(Evaluation { phi, defects, cbf })
    }

    /// Gauss-Newton matrix of the augmented objective: exact cost Hessian
    /// plus `rho J^T J` for the defects and the active CBF terms.
    pub(crate) fn gauss_newton(&self, z: &[f64], mult: &Multipliers, rho: f64) -> BandedSym {
        let n = self.horizon();
        let m = self.obstacles.len();
        let cfg = self.cfg;
        let plan = self.plan;
        let dim = self.dim();
        let mut h = BandedSym::zeros(dim, BANDWIDTH.min(dim - 1));

        for k in 1..=n {
            let o = x_offset(k);
            for i in 0..NX {
                let mut w = if k == n { cfg.q_terminal[i] } else { cfg.q[i] };
                if k < n && plan.tracking && i < 3 {
                    w += cfg.lambda[i];
                }
                h.add(o + i, o + i, 2.0 * w);
            }
        }
        for k in 0..n {
            let o = u_offset(k);
            for j in 0..NU {
                h.add(o + j, o + j, 2.0 * cfg.r[j]);
            }
        }

        let states: Vec<State12> = (0..=n).map(|k| self.node(z, k)).collect();
        for k in 0..n {
            let u = self.control(z, k);
            let (ad, bd) = euler_step_jacobians(&states[k], &u, cfg.dt, self.params, plan.surface_height);
            let o1 = x_offset(k + 1);
            let ou = u_offset(k);
            for i in 0..NX {
                h.add(o1 + i, o1 + i, rho);
            }
            let btb: SMatrix<f64, NU, NU> = bd.tr_mul(&bd);
            for a in 0..NU {
                for b in 0..=a {
                    h.add(ou + a, ou + b, rho * btb[(a, b)]);
                }
            }
            for a in 0..NX {
                for b in 0..NU {
                    h.add(o1 + a, ou + b, -rho * bd[(a, b)]);
                }
            }
            if k >= 1 {
                let o0 = x_offset(k);
                let ata = ad.tr_mul(&ad);
                let atb = ad.tr_mul(&bd);
                for a in 0..NX {
                    for b in 0..=a {
                        h.add(o0 + a, o0 + b, rho * ata[(a, b)]);
                    }
                    for b in 0..NU {
                        h.add(o0 + a, ou + b, rho * atb[(a, b)]);
                    }
                    for b in 0..NX {
                        h.add(o1 + b, o0 + a, -rho * ad[(b, a)]);
                    }
                }
            }
        }

        let keep = 1.0 - self.gamma;
        for k in 0..n {
            let p0 = states[k].p.xy();
            let p1 = states[k + 1].p.xy();
            for (j, obs) in self.obstacles.iter().enumerate() {
                let c = self.cbf_row(p0, p1, k, j, obs, keep);
                if mult.cbf[k * m + j] - rho * c <= 0.0 {
                    continue;
                }
                let mut entries: Vec<(usize, f64)> = Vec::with_capacity(4);
                let g1 = barrier_gradient(p1, obs);
                entries.push((x_offset(k + 1), g1.x));
                entries.push((x_offset(k + 1) + 1, g1.y));
                if k >= 1 {
                    let g0 = barrier_gradient(p0, obs) * (-keep);
                    entries.push((x_offset(k), g0.x));
                    entries.push((x_offset(k) + 1, g0.y));
                }
                for (ia, &(a, va)) in entries.iter().enumerate() {
                    for &(b, vb) in &entries[..=ia] {
                        h.add(a, b, rho * va * vb);
                    }
                }
                // Curvature of the barrier itself (its Hessian is 2I).
                let sigma = mult.cbf[k * m + j] - rho * c;
                let o1 = x_offset(k + 1);
                h.add(o1, o1, -2.0 * sigma);
                h.add(o1 + 1, o1 + 1, -2.0 * sigma);
                if k >= 1 {
                    let o0 = x_offset(k);
                    h.add(o0, o0, 2.0 * sigma * keep);
                    h.add(o0 + 1, o0 + 1, 2.0 * sigma * keep);
                }
            }
        }

        for k in 0..n {
            self.add_dynamics_curvature(&mut h, &states, z, k, mult, rho);
        }
        h
    }

    /// Adds `-sum_i y_i Hess(F_i)` for stage `k`, where `F` is the Euler step
    /// and `y = lambda_k + rho d_k`. The Hessian is taken by forward
    /// differences of the analytic product `J(x, u)^T y`.
    fn add_dynamics_curvature(
        &self,
        h: &mut BandedSym,
        states: &[State12],
        z: &[f64],
        k: usize,
        mult: &Multipliers,
        rho: f64,
    ) {
        let (dt, surface) = (self.cfg.dt, self.plan.surface_height);
        let u = self.control(z, k);
        let Ok(next) = euler_step(&states[k], &u, dt, self.params, surface) else {
            return;
        };
        let y = mult.defect[k] + (states[k + 1].to_vector() - next.to_vector()) * rho;
        let jty = |x: &State12, u: &ControlInput| -> SVector<f64, STRIDE> {
            let (a, b) = euler_step_jacobians(x, u, dt, self.params, surface);
            let mut g = SVector::<f64, STRIDE>::zeros();
            g.fixed_rows_mut::<NX>(0).copy_from(&a.tr_mul(&y));
            g.fixed_rows_mut::<NU>(NX).copy_from(&b.tr_mul(&y));
            g
        };
        let base = jty(&states[k], &u);
        let mut v = SVector::<f64, STRIDE>::zeros();
        v.fixed_rows_mut::<NX>(0).copy_from(&states[k].to_vector());
        v.fixed_rows_mut::<NU>(NX).copy_from(&u.u);
        // X[0] is pinned, so stage 0 only contributes the control block.
        let vars: &[usize] = if k == 0 { &CURVED[7..] } else { &CURVED };
        let mut hess = SMatrix::<f64, STRIDE, STRIDE>::zeros();
        for &j in vars {
            let step = 1e-7 * v[j].abs().max(1.0);
            let mut vp = v;
            vp[j] += step;
            let xp = State12::from_vector(&vp.fixed_rows::<NX>(0).into_owned());
            let up = ControlInput {
                u: vp.fixed_rows::<NU>(NX).into_owned(),
            };
            hess.set_column(j, &((jty(&xp, &up) - base) / step));
        }
        let index = |i: usize| {
            if i < NX {
                x_offset(k.max(1)) + i
            } else {
                u_offset(k) + i - NX
            }
        };
        for (ia, &a) in vars.iter().enumerate() {
            for &b in &vars[..=ia] {
                let v = 0.5 * (hess[(a, b)] + hess[(b, a)]);
                h.add(index(a), index(b), -v);
            }
        }
    }
}
