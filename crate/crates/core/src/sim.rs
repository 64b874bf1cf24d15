//! Closed-loop executor: the receding-horizon controller flying the RK4
//! plant onto the platform, with full per-step logging.

use std::io::Write;
use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbf::state_barrier;
use crate::dynamics::{
    euler_step, ground_effect_multiplier, rk4_step, ControlInput, DynamicsError, Integrator, QuadrotorParams, State12,
};
use crate::harness::ScenarioConfig;
use crate::ocp::{self, shift_multipliers, shift_warm_start, OcpSolution, ReferencePlan, WarmStart};
use crate::platform::{descent_reference, platform_state_at, LandingPhase, PhaseMachine, PlatformModel, PlatformState};

/// Consecutive solver faults after which a trial is abandoned.
pub const MAX_CONSECUTIVE_HOLDS: usize = 3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Per-group standard deviations of the additive feedback noise.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSigmas {
    pub position: f64,
    pub velocity: f64,
    pub attitude: f64,
    pub rates: f64,
}

impl NoiseSigmas {
    pub fn is_zero(&self) -> bool {
        self.position == 0.0 && self.velocity == 0.0 && self.attitude == 0.0 && self.rates == 0.0
    }

    /// Named presets: `none`, `low` (motion-capture grade) and `high`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "none" => Some(Self::default()),
            "low" => Some(Self {
                position: 0.002,
                velocity: 0.01,
                attitude: 0.005,
                rates: 0.01,
            }),
            "high" => Some(Self {
                position: 0.01,
                velocity: 0.05,
                attitude: 0.02,
                rates: 0.05,
            }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = [self.position, self.velocity, self.attitude, self.rates];
        if all.iter().all(|s| s.is_finite() && *s >= 0.0) {
            Ok(())
        } else {
            Err("noise sigmas must be finite and non-negative".into())
        }
    }
}

/// Adds zero-mean Gaussian noise to every state component, with one sigma
/// per group. Groups with zero sigma are returned untouched and draw no
/// samples.
pub fn add_state_noise<R: Rng + ?Sized>(state: &State12, sigma: &NoiseSigmas, rng: &mut R) -> State12 {
    fn perturb<R: Rng + ?Sized>(v: &Vector3<f64>, sigma: f64, rng: &mut R) -> Vector3<f64> {
        if sigma == 0.0 {
            return *v;
        }
        let normal = Normal::new(0.0, sigma).expect("sigma validated non-negative");
        Vector3::new(
            v.x + normal.sample(rng),
            v.y + normal.sample(rng),
            v.z + normal.sample(rng),
        )
    }
    State12 {
        p: perturb(&state.p, sigma.position, rng),
        v: perturb(&state.v, sigma.velocity, rng),
        q: perturb(&state.q, sigma.attitude, rng),
        w: perturb(&state.w, sigma.rates, rng),
    }
}

/// How the plant is integrated over one control period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantConfig {
    pub integrator: Integrator,
    pub substeps: usize,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            integrator: Integrator::Rk4,
            substeps: 10,
        }
    }
}

impl PlantConfig {
    /// One Euler step per period: the plant then equals the prediction model.
    pub fn euler_at_dt() -> Self {
        Self {
            integrator: Integrator::Euler,
            substeps: 1,
        }
    }
}

/// Seeded perturbation of the nominal initial state (uniform half-widths).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialPerturbation {
    pub position: f64,
    pub attitude: f64,
}

impl Default for InitialPerturbation {
    fn default() -> Self {
        Self {
            position: 0.3,
            attitude: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub cost: f64,
    pub kkt_residual: f64,
    pub defect_norm: f64,
    pub min_cbf_residual: f64,
    pub iterations: usize,
    pub inner_iterations: usize,
    pub converged: bool,
}

impl From<&OcpSolution> for SolverDiagnostics {
    fn from(s: &OcpSolution) -> Self {
        Self {
            cost: s.cost,
            kkt_residual: s.kkt_residual,
            defect_norm: s.defect_norm,
            min_cbf_residual: s.min_cbf_residual,
            iterations: s.iterations,
            inner_iterations: s.inner_iterations,
            converged: s.converged,
        }
    }
}

/// One control cycle. `state` is the true plant state at `t`, before the
/// control is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub state: State12,
    pub control: ControlInput,
    /// Solver's `X[1]`; absent when no solve produced the control.
    pub predicted: Option<State12>,
    pub platform: PlatformState,
    pub phase: LandingPhase,
    pub solver: Option<SolverDiagnostics>,
    /// Previous control re-applied after a solver fault.
    pub held: bool,
    /// Barrier value of the plant state, one per obstacle.
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalRecord {
    pub touchdown_time: f64,
    pub drone_position: Vector3<f64>,
    pub platform_position: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    Timeout,
    SolverFaults,
    PlantFault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLog {
    pub scenario: String,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    /// Present iff the trial reached LANDED.
    pub terminal: Option<TerminalRecord>,
    pub failure: Option<FailureReason>,
    /// Cycles whose solve did not meet the convergence test.
    pub nonconverged_cycles: usize,
    pub held_cycles: usize,
}

impl TrialLog {
    pub fn landed(&self) -> bool {
        self.terminal.is_some()
    }

    /// Smallest logged barrier value over all records and obstacles.
    pub fn min_h(&self) -> Option<f64> {
        self.records.iter().flat_map(|r| r.h.iter().copied()).reduce(f64::min)
    }

    pub fn phases(&self) -> Vec<LandingPhase> {
        self.records.iter().map(|r| r.phase).collect()
    }

    /// Largest `|plant - predicted X[1]|` (max-norm) over consecutive
    /// records that carry a prediction.
    pub fn max_prediction_gap(&self) -> Option<f64> {
        self.records
            .windows(2)
            .filter_map(|w| {
                let pred = w[0].predicted?;
                Some((w[1].state.to_vector() - pred.to_vector()).amax())
            })
            .reduce(f64::max)
    }

    /// Columnar CSV, one row per record. Header:
    /// `t, px..pz, vx..vz, roll, pitch, yaw, wx..wz, u1..u4,
    /// pred_px..pred_wz, plat_px..plat_pz, plat_vx..plat_vz, phase, cost,
    /// kkt, defect, min_cbf, iters, inner_iters, converged, held,
    /// h_0..h_{m-1}`. Missing values are empty cells.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SimError> {
        const STATE: [&str; 12] = [
            "px", "py", "pz", "vx", "vy", "vz", "roll", "pitch", "yaw", "wx", "wy", "wz",
        ];
        let n_obs = self.records.first().map_or(0, |r| r.h.len());
        let mut header: Vec<String> = vec!["t".into()];
        header.extend(STATE.iter().map(|s| s.to_string()));
        header.extend(["u1", "u2", "u3", "u4"].map(String::from));
        header.extend(STATE.iter().map(|s| format!("pred_{s}")));
        header.extend(["plat_px", "plat_py", "plat_pz", "plat_vx", "plat_vy", "plat_vz"].map(String::from));
        header.extend(
            [
                "phase",
                "cost",
                "kkt",
                "defect",
                "min_cbf",
                "iters",
                "inner_iters",
                "converged",
                "held",
            ]
            .map(String::from),
        );
        header.extend((0..n_obs).map(|j| format!("h_{j}")));

        let mut w = csv::Writer::from_writer(out);
        w.write_record(&header)?;
        for r in &self.records {
            let mut row: Vec<String> = vec![r.t.to_string()];
            row.extend(r.state.to_array().iter().map(f64::to_string));
            row.extend(r.control.u.iter().map(f64::to_string));
            match &r.predicted {
                Some(p) => row.extend(p.to_array().iter().map(f64::to_string)),
                None => row.extend(std::iter::repeat_n(String::new(), 12)),
            }
            row.extend(
                r.platform
                    .position
                    .iter()
                    .chain(r.platform.velocity.iter())
                    .map(f64::to_string),
            );
            row.push(r.phase.as_str().to_string());
            match &r.solver {
                Some(d) => row.extend([
                    d.cost.to_string(),
                    d.kkt_residual.to_string(),
                    d.defect_norm.to_string(),
                    d.min_cbf_residual.to_string(),
                    d.iterations.to_string(),
                    d.inner_iterations.to_string(),
                    d.converged.to_string(),
                ]),
                None => row.extend(std::iter::repeat_n(String::new(), 7)),
            }
            row.push(r.held.to_string());
            row.extend(r.h.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Terminal summary written next to the CSV.
    pub fn summary(&self) -> TrialSummaryJson {
        TrialSummaryJson {
            scenario: self.scenario.clone(),
            seed: self.seed,
            landed: self.landed(),
            failure: self.failure,
            terminal: self.terminal,
            steps: self.records.len(),
            min_h: self.min_h(),
            nonconverged_cycles: self.nonconverged_cycles,
            held_cycles: self.held_cycles,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummaryJson {
    pub scenario: String,
    pub seed: u64,
    pub landed: bool,
    pub failure: Option<FailureReason>,
    pub terminal: Option<TerminalRecord>,
    pub steps: usize,
    pub min_h: Option<f64>,
    pub nonconverged_cycles: usize,
    pub held_cycles: usize,
}

/// A finished trial: the deterministic log plus the measured wall time of
/// every control cycle (ms), which is kept apart because it varies between
/// runs.
#[derive(Debug, Clone)]
pub struct Trial {
    pub log: TrialLog,
    pub cycle_ms: Vec<f64>,
}

/// Seeded initial state: the nominal state with uniform position and
/// attitude offsets.
pub fn perturbed_initial_state(scenario: &ScenarioConfig, seed: u64) -> State12 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dp, dq) = (scenario.perturbation.position, scenario.perturbation.attitude);
    let mut x = scenario.initial_state;
    if dp > 0.0 {
        for i in 0..3 {
            x.p[i] += rng.random_range(-dp..=dp);
        }
    }
    if dq > 0.0 {
        for i in 0..3 {
            x.q[i] += rng.random_range(-dq..=dq);
        }
    }
    x
}

fn surface_height(platform: &PlatformModel, params: &QuadrotorParams, xy: Vector2<f64>, t: f64) -> f64 {
    platform.surface_below(xy, t, params.z_ground)
}

/// Receding-horizon reference for the current phase: node `k` targets the
/// phase set-point of the platform as it will be at `t + k dt`, at zero
/// velocity, level attitude and the held yaw.
pub fn build_plan(
    scenario: &ScenarioConfig,
    machine: &PhaseMachine,
    t: f64,
    measured: &State12,
    yaw_ref: f64,
) -> ReferencePlan {
    let cfg = &scenario.nmpc;
    let params = &scenario.vehicle;
    let descent_time = machine.time_in_descent(t);
    let targets: Vec<Vector3<f64>> = (0..=cfg.horizon)
        .map(|k| {
            let dt_k = k as f64 * cfg.dt;
            let plat = platform_state_at(&scenario.platform, t + dt_k);
            descent_reference(machine.phase, &plat.position, &scenario.landing, descent_time + dt_k)
        })
        .collect();
    // Reference velocity follows the moving target.
    let states: Vec<State12> = (0..=cfg.horizon)
        .map(|k| {
            let mut s = State12::at_rest(targets[k]);
            let (a, b) = if k < cfg.horizon { (k, k + 1) } else { (k - 1, k) };
            s.v = (targets[b] - targets[a]) / cfg.dt;
            s.q.z = yaw_ref;
            s
        })
        .collect();
    // Hover input that holds each stage's target, ground effect included.
    let u_ref = targets[..cfg.horizon]
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let surface = surface_height(&scenario.platform, params, p.xy(), t + k as f64 * cfg.dt);
            ControlInput::uniform(params.hover_thrust() / ground_effect_multiplier(p.z - surface, params))
        })
        .collect();
    ReferencePlan {
        terminal: *states.last().expect("horizon >= 1"),
        states,
        platform: targets,
        u_ref,
        tracking: machine.phase.tracks_platform(),
        surface_height: surface_height(&scenario.platform, params, measured.p.xy(), t),
    }
}

/// Advances the plant over one control period with a zero-order hold on
/// `u`. Contact with the surface below stops downward motion.
pub fn propagate_plant(
    x: &State12,
    u: &ControlInput,
    t: f64,
    scenario: &ScenarioConfig,
) -> Result<State12, DynamicsError> {
    let params = &scenario.vehicle;
    let plant = scenario.plant;
    let n = plant.substeps.max(1);
    let h = scenario.nmpc.dt / n as f64;
    let mut x = *x;
    for i in 0..n {
        let ts = t + i as f64 * h;
        let surface = surface_height(&scenario.platform, params, x.p.xy(), ts);
        x = match plant.integrator {
            Integrator::Euler => euler_step(&x, u, h, params, surface)?,
            Integrator::Rk4 => rk4_step(&x, u, h, params, surface)?,
        };
        let below = surface_height(&scenario.platform, params, x.p.xy(), ts + h);
        if x.p.z < below {
            x.p.z = below;
            x.v.z = x.v.z.max(0.0);
        }
    }
    Ok(x)
}

/// Runs one seeded closed-loop trial until LANDED or timeout.
///
/// The scenario is assumed validated.
pub fn run_closed_loop(scenario: &ScenarioConfig, seed: u64) -> Trial {
    let cfg = &scenario.nmpc;
    let dt = cfg.dt;
    let obstacles = &scenario.cbf.obstacles;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);

    let mut x = perturbed_initial_state(scenario, seed);
    let yaw_ref = scenario.initial_state.q.z;
    let mut machine = PhaseMachine::default();
    let mut warm: Option<WarmStart> = None;
    let mut last_u = ControlInput::uniform(scenario.vehicle.hover_thrust());
    let mut consecutive_holds = 0;

    let mut log = TrialLog {
        scenario: scenario.name.clone(),
        seed,
        records: Vec::new(),
        terminal: None,
        failure: None,
        nonconverged_cycles: 0,
        held_cycles: 0,
    };
    let mut cycle_ms = Vec::new();

    for k in 0usize.. {
        let t = k as f64 * dt;
        let platform = platform_state_at(&scenario.platform, t);
        let phase = machine.phase;
        let h: Vec<f64> = obstacles.iter().map(|o| state_barrier(&x, o)).collect();
        if phase == LandingPhase::Landed {
            log.records.push(StepRecord {
                t,
                state: x,
                control: ControlInput::zero(),
                predicted: None,
                platform,
                phase,
                solver: None,
                held: false,
                h,
            });
            break;
        }
        if phase != LandingPhase::Touchdown && t >= scenario.timeout - 1e-9 {
            log.failure = Some(FailureReason::Timeout);
            break;
        }

        let clock = Instant::now();
        let mut record = StepRecord {
            t,
            state: x,
            control: ControlInput::zero(),
            predicted: None,
            platform,
            phase,
            solver: None,
            held: false,
            h,
        };
        if phase != LandingPhase::Touchdown {
            let measured = add_state_noise(&x, &scenario.noise, &mut noise_rng);
            let plan = build_plan(scenario, &machine, t, &measured, yaw_ref);
            match ocp::solve(&measured, &plan, warm.as_ref(), cfg, &scenario.cbf, &scenario.vehicle) {
                Ok(sol) => {
                    consecutive_holds = 0;
                    if !sol.converged {
                        log.nonconverged_cycles += 1;
                    }
                    record.control = sol.u_apply;
                    record.predicted = Some(sol.decision.states[1]);
                    record.solver = Some(SolverDiagnostics::from(&sol));
                    warm = Some(WarmStart {
                        decision: shift_warm_start(&sol.decision),
                        multipliers: sol
                            .converged
                            .then(|| shift_multipliers(&sol.multipliers, obstacles.len())),
                        penalty: sol.converged.then_some(sol.penalty),
                    });
                    last_u = sol.u_apply;
                }
                Err(_) => {
                    consecutive_holds += 1;
                    log.held_cycles += 1;
                    record.control = last_u;
                    record.held = true;
                    warm = None;
                }
            }
        }
        cycle_ms.push(clock.elapsed().as_secs_f64() * 1e3);
        let u = record.control;
        log.records.push(record);
        if consecutive_holds >= MAX_CONSECUTIVE_HOLDS {
            log.failure = Some(FailureReason::SolverFaults);
            break;
        }

        x = match propagate_plant(&x, &u, t, scenario) {
            Ok(next) => next,
            Err(_) => {
                log.failure = Some(FailureReason::PlantFault);
                break;
            }
        };
        let t_next = (k + 1) as f64 * dt;
        let next_platform = platform_state_at(&scenario.platform, t_next);
        let before = machine.phase;
        let after = machine.step(t_next, dt, &x, &next_platform, &scenario.landing.thresholds);
        if after == LandingPhase::Touchdown && before != LandingPhase::Touchdown {
            log.terminal = Some(TerminalRecord {
                touchdown_time: t_next,
                drone_position: x.p,
                platform_position: next_platform.position,
            });
        }
    }
    Trial { log, cycle_ms }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_identity() {
        let x = State12 {
            p: Vector3::new(1.0, -2.0, 3.0),
            v: Vector3::new(0.1, 0.2, 0.3),
            q: Vector3::new(0.01, 0.02, 0.03),
            w: Vector3::new(-0.1, 0.0, 0.1),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(add_state_noise(&x, &NoiseSigmas::default(), &mut rng), x);
    }

    #[test]
    fn noise_is_reproducible_per_seed() {
        let sigma = NoiseSigmas::preset("high").unwrap();
        let x = State12::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5)
                .map(|_| add_state_noise(&x, &sigma, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn empirical_std_matches_sigma() {
        let sigma = NoiseSigmas {
            position: 0.02,
            velocity: 0.1,
            attitude: 0.005,
            rates: 0.3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sum = [0.0f64; 12];
        let mut sq = [0.0f64; 12];
        for _ in 0..n {
            let a = add_state_noise(&State12::default(), &sigma, &mut rng).to_array();
            for i in 0..12 {
                sum[i] += a[i];
                sq[i] += a[i] * a[i];
            }
        }
        let expected = [sigma.position, sigma.velocity, sigma.attitude, sigma.rates];
        for i in 0..12 {
            let mean = sum[i] / n as f64;
            let std = (sq[i] / n as f64 - mean * mean).sqrt();
            let s = expected[i / 3];
            assert!((std - s).abs() <= 0.02 * s, "component {i}: {std} vs {s}");
        }
    }

    #[test]
    fn unknown_preset_rejected() {
        assert!(NoiseSigmas::preset("medium").is_none());
        assert!(NoiseSigmas::preset("none").unwrap().is_zero());
    }

    #[test]
    fn contact_stops_penetration() {
        let mut sc = ScenarioConfig::example();
        sc.platform = PlatformModel::fixed([0.0, 0.0], 0.3);
        let x = State12 {
            v: Vector3::new(0.0, 0.0, -1.0),
            ..State12::at_rest(Vector3::new(0.0, 0.0, 0.32))
        };
        let next = propagate_plant(&x, &ControlInput::zero(), 0.0, &sc).unwrap();
        assert_eq!(next.p.z, 0.3);
        assert!(next.v.z >= 0.0);
    }
}
