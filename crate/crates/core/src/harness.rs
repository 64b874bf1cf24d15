//! Scenario files, seeded trial batches, Final Point Error metrics and
//! report rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbf::{CbfConfig, CbfError};
use crate::dynamics::{DynamicsError, QuadrotorParams, State12};
use crate::ocp::{gradient_check, random_probe, GradientReport, NmpcConfig, OcpError, OcpProblem};
use crate::platform::{platform_state_at, LandingConfig, PhaseMachine, PlatformModel, PlatformMotion};
use crate::sim::{
    build_plan, perturbed_initial_state, run_closed_loop, InitialPerturbation, NoiseSigmas, PlantConfig, SimError,
    Trial, TrialLog,
};

/// Relative error bound for the analytic-gradient check.
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
/// Central-difference step for the analytic-gradient check.
pub const GRADIENT_STEP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Cbf(#[from] CbfError),
    #[error("scenario parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("trial {0} has no touchdown record")]
    NoTouchdown(u64),
}

/// Bounds checked by `lander run --assert`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceBounds {
    pub max_mean_fpe_cm: f64,
    /// Lower bound on every logged barrier value (m²).
    #[serde(default = "default_min_h")]
    pub min_h: f64,
}

fn default_min_h() -> f64 {
    -1e-5
}

fn default_trials() -> usize {
    10
}

fn default_timeout() -> f64 {
    60.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub vehicle: QuadrotorParams,
    #[serde(default)]
    pub nmpc: NmpcConfig,
    #[serde(default)]
    pub cbf: CbfConfig,
    pub platform: PlatformModel,
    #[serde(default)]
    pub landing: LandingConfig,
    /// Nominal initial drone state, before the per-seed perturbation.
    pub initial_state: State12,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseSigmas,
    /// Simulated seconds before an unlanded trial fails.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default)]
    pub plant: PlantConfig,
    #[serde(default)]
    pub perturbation: InitialPerturbation,
    #[serde(default)]
    pub acceptance: Option<AcceptanceBounds>,
}

/// Distance from `c` to the segment `[a, b]`.
fn segment_distance(a: Vector2<f64>, b: Vector2<f64>, c: Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let s = if len2 > 0.0 {
        ((c - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (a + ab * s - c).norm()
}

impl ScenarioConfig {
    /// Static platform at the origin, drone starting 2 m above it.
    pub fn example() -> Self {
        Self {
            name: "example".into(),
            vehicle: QuadrotorParams::default(),
            nmpc: NmpcConfig::default(),
            cbf: CbfConfig::default(),
            platform: PlatformModel::fixed([0.0, 0.0], 0.3),
            landing: LandingConfig::default(),
            initial_state: State12::at_rest(Vector3::new(0.0, 0.0, 2.3)),
            trials: default_trials(),
            seed: 0,
            noise: NoiseSigmas::default(),
            timeout: default_timeout(),
            plant: PlantConfig::default(),
            perturbation: InitialPerturbation::default(),
            acceptance: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads and validates a scenario file.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let sc = Self::from_json(&fs::read_to_string(path)?)?;
        sc.validate()?;
        Ok(sc)
    }

    /// The horizontal segment swept by the platform centre before timeout.
    fn platform_path(&self) -> (Vector2<f64>, Vector2<f64>) {
        let p0 = Vector2::from(self.platform.p0);
        match self.platform.motion {
            PlatformMotion::Static => (p0, p0),
            PlatformMotion::ConstantVelocity { .. } => {
                (p0, platform_state_at(&self.platform, self.timeout).position.xy())
            }
            PlatformMotion::Sinusoidal { amplitude, .. } => {
                let a = Vector2::from(amplitude);
                (p0 - a, p0 + a)
            }
        }
    }

    /// Checks every module's own invariants plus the cross-module ones: the
    /// platform path stays clear of all safety circles (including the
    /// optimizer back-off), and every perturbed start lies outside them.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let invalid = |m: String| Err(HarnessError::Invalid(m));
        self.vehicle.validate()?;
        self.nmpc.validate()?;
        self.cbf.validate()?;
        self.platform.validate().map_err(HarnessError::Invalid)?;
        self.noise.validate().map_err(HarnessError::Invalid)?;
        self.initial_state.check()?;
        if !(self.timeout > 0.0) {
            return invalid("timeout must be positive".into());
        }
        if self.plant.substeps == 0 {
            return invalid("plant substeps must be at least 1".into());
        }
        let pert = &self.perturbation;
        if !(pert.position >= 0.0 && pert.attitude >= 0.0) {
            return invalid("perturbation half-widths must be non-negative".into());
        }
        let max_tilt = self.nmpc.state_bounds.max_tilt;
        let q = &self.initial_state.q;
        if q.x.abs() + pert.attitude > max_tilt || q.y.abs() + pert.attitude > max_tilt {
            return invalid("initial attitude may exceed the tilt bound".into());
        }
        if self.initial_state.p.z - pert.position <= self.platform.top_height.max(self.vehicle.z_ground) {
            return invalid("initial drone state may start below the landing surface".into());
        }
        let (a, b) = self.platform_path();
        let start = self.initial_state.p.xy();
        let start_slack = pert.position * std::f64::consts::SQRT_2;
        for (j, obs) in self.cbf.obstacles.iter().enumerate() {
            let c = Vector2::from(obs.center);
            let keep_out = obs.r_safe() + self.cbf.solver_backoff;
            if segment_distance(a, b, c) <= keep_out {
                return invalid(format!("platform path enters the safety circle of obstacle {j}"));
            }
            if (start - c).norm() - start_slack <= keep_out {
                return invalid(format!(
                    "initial drone position may lie inside the safety circle of obstacle {j}"
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpeMode {
    /// Horizontal distance only.
    #[default]
    Horizontal,
    /// Full 3-D distance to the platform surface centre.
    ThreeD,
}

/// Final Point Error in centimetres: distance between the drone and the
/// platform centre at the touchdown timestamp.
pub fn final_point_error(log: &TrialLog) -> Result<f64, HarnessError> {
    final_point_error_with(log, FpeMode::Horizontal)
}

pub fn final_point_error_with(log: &TrialLog, mode: FpeMode) -> Result<f64, HarnessError> {
    let term = log.terminal.as_ref().ok_or(HarnessError::NoTouchdown(log.seed))?;
    let d = term.drone_position - term.platform_position;
    let metres = match mode {
        FpeMode::Horizontal => d.xy().norm(),
        FpeMode::ThreeD => d.norm(),
    };
    Ok(100.0 * metres)
}

/// Deterministic per-trial metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub seed: u64,
    pub failed: bool,
    pub failure: Option<String>,
    pub fpe_cm: Option<f64>,
    pub touchdown_time: Option<f64>,
    pub min_h: Option<f64>,
    pub cycles: usize,
    pub mean_iterations: f64,
    pub max_iterations: usize,
    pub nonconverged_cycles: usize,
    pub held_cycles: usize,
}

impl TrialReport {
    pub fn from_log(log: &TrialLog) -> Self {
        let iters: Vec<usize> = log
            .records
            .iter()
            .filter_map(|r| r.solver.map(|s| s.iterations))
            .collect();
        let failure = log.failure.map(|f| {
            serde_json::to_value(f)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default()
        });
        Self {
            seed: log.seed,
            failed: !log.landed(),
            failure,
            fpe_cm: final_point_error(log).ok(),
            touchdown_time: log.terminal.map(|t| t.touchdown_time),
            min_h: log.min_h(),
            cycles: log.records.len(),
            mean_iterations: if iters.is_empty() {
                0.0
            } else {
                iters.iter().sum::<usize>() as f64 / iters.len() as f64
            },
            max_iterations: iters.iter().copied().max().unwrap_or(0),
            nonconverged_cycles: log.nonconverged_cycles,
            held_cycles: log.held_cycles,
        }
    }
}

/// Batch metrics. Contains nothing that depends on wall time, so the same
/// inputs always serialize to the same bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub scenario: String,
    pub base_seed: u64,
    pub trials: Vec<TrialReport>,
    pub successes: usize,
    /// `successes / trials`; absent for an empty batch.
    pub success_rate: Option<f64>,
    /// Over successful trials only.
    pub mean_fpe_cm: Option<f64>,
    pub max_fpe_cm: Option<f64>,
    /// Smallest barrier value logged in any trial.
    pub min_h: Option<f64>,
}

impl BatchReport {
    pub fn from_trials(scenario: &str, base_seed: u64, trials: Vec<TrialReport>) -> Self {
        let fpes: Vec<f64> = trials.iter().filter(|t| !t.failed).filter_map(|t| t.fpe_cm).collect();
        let successes = trials.iter().filter(|t| !t.failed).count();
        Self {
            scenario: scenario.to_string(),
            base_seed,
            successes,
            success_rate: (!trials.is_empty()).then(|| successes as f64 / trials.len() as f64),
            mean_fpe_cm: (!fpes.is_empty()).then(|| fpes.iter().sum::<f64>() / fpes.len() as f64),
            max_fpe_cm: fpes.iter().copied().reduce(f64::max),
            min_h: trials.iter().filter_map(|t| t.min_h).reduce(f64::min),
            trials,
        }
    }

    pub fn all_succeeded(&self) -> bool {
        self.trials.iter().all(|t| !t.failed)
    }

    /// Violated acceptance bounds, as human-readable lines.
    pub fn check(&self, bounds: &AcceptanceBounds) -> Vec<String> {
        let mut out = Vec::new();
        if !self.all_succeeded() {
            out.push(format!(
                "{} of {} trials failed",
                self.trials.len() - self.successes,
                self.trials.len()
            ));
        }
        match self.mean_fpe_cm {
            Some(m) if m <= bounds.max_mean_fpe_cm => {}
            Some(m) => out.push(format!("mean FPE {m:.3} cm exceeds {} cm", bounds.max_mean_fpe_cm)),
            None => out.push("no successful trial to measure FPE".into()),
        }
        if let Some(h) = self.min_h {
            if h < bounds.min_h {
                out.push(format!("min h {h:e} below {:e}", bounds.min_h));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialTiming {
    pub seed: u64,
    pub mean_cycle_ms: f64,
    pub max_cycle_ms: f64,
}

/// Wall-clock statistics; kept out of [`BatchReport`] because they differ
/// from run to run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchTiming {
    pub trials: Vec<TrialTiming>,
}

impl BatchTiming {
    pub fn max_cycle_ms(&self) -> Option<f64> {
        self.trials.iter().map(|t| t.max_cycle_ms).reduce(f64::max)
    }

    fn of(trial: &Trial) -> TrialTiming {
        let ms = &trial.cycle_ms;
        TrialTiming {
            seed: trial.log.seed,
            mean_cycle_ms: if ms.is_empty() {
                0.0
            } else {
                ms.iter().sum::<f64>() / ms.len() as f64
            },
            max_cycle_ms: ms.iter().copied().fold(0.0, f64::max),
        }
    }
}

pub struct Batch {
    pub report: BatchReport,
    pub timing: BatchTiming,
    pub trials: Vec<Trial>,
}

/// Runs trials with seeds `base_seed..base_seed + trials` (in parallel when
/// threads are available); results are in seed order.
pub fn run_batch(scenario: &ScenarioConfig, trials: usize, base_seed: u64) -> Batch {
    let results: Vec<Trial> = (0..trials as u64)
        .into_par_iter()
        .map(|i| run_closed_loop(scenario, base_seed + i))
        .collect();
    let report = BatchReport::from_trials(
        &scenario.name,
        base_seed,
        results.iter().map(|t| TrialReport::from_log(&t.log)).collect(),
    );
    let timing = BatchTiming {
        trials: results.iter().map(BatchTiming::of).collect(),
    };
    Batch {
        report,
        timing,
        trials: results,
    }
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.prec$}"))
}

/// Aligned plain-text table of a batch; timing columns appear only when
/// timing is supplied.
pub fn render_table(report: &BatchReport, timing: Option<&BatchTiming>) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "scenario: {}  trials: {}  base seed: {}",
        report.scenario,
        report.trials.len(),
        report.base_seed
    );
    let _ = write!(
        s,
        "{:>6}  {:<20}  {:>8}  {:>9}  {:>11}  {:>7}  {:>10}",
        "seed", "status", "fpe_cm", "touchdown", "min_h", "cycles", "iters_mean"
    );
    if timing.is_some() {
        let _ = write!(s, "  {:>9}  {:>9}", "mean_ms", "max_ms");
    }
    s.push('\n');
    for (i, t) in report.trials.iter().enumerate() {
        let status = if t.failed {
            format!("FAILED:{}", t.failure.as_deref().unwrap_or("?"))
        } else {
            "LANDED".to_string()
        };
        let _ = write!(
            s,
            "{:>6}  {:<20}  {:>8}  {:>9}  {:>11}  {:>7}  {:>10.2}",
            t.seed,
            status,
            opt(t.fpe_cm, 3),
            opt(t.touchdown_time, 1),
            t.min_h.map_or_else(|| "n/a".to_string(), |h| format!("{h:.4e}")),
            t.cycles,
            t.mean_iterations,
        );
        if let Some(tm) = timing.and_then(|tm| tm.trials.get(i)) {
            let _ = write!(s, "  {:>9.2}  {:>9.2}", tm.mean_cycle_ms, tm.max_cycle_ms);
        }
        s.push('\n');
    }
    let rate = report
        .success_rate
        .map_or_else(|| "n/a".to_string(), |r| format!("{:.1}%", 100.0 * r));
    let _ = writeln!(
        s,
        "mean FPE: {} cm  max FPE: {} cm  success: {}/{} ({})",
        opt(report.mean_fpe_cm, 3),
        opt(report.max_fpe_cm, 3),
        report.successes,
        report.trials.len(),
        rate
    );
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Json,
    Table,
}

/// Renders the report in the requested format (JSON is pretty-printed and
/// newline-terminated).
pub fn format_report(report: &BatchReport, timing: Option<&BatchTiming>, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Table => render_table(report, timing),
    }
}

/// Writes `trial_<seed>.csv`, `trial_<seed>.json`, `report.json`,
/// `report.txt` and `timing.json` into `out`.
pub fn write_outputs(batch: &Batch, out: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(out)?;
    for trial in &batch.trials {
        let seed = trial.log.seed;
        trial
            .log
            .write_csv(fs::File::create(out.join(format!("trial_{seed}.csv")))?)?;
        let mut summary = serde_json::to_string_pretty(&trial.log.summary())?;
        summary.push('\n');
        fs::write(out.join(format!("trial_{seed}.json")), summary)?;
    }
    emit_report(&batch.report, Some(&batch.timing), out)?;
    let mut timing = serde_json::to_string_pretty(&batch.timing)?;
    timing.push('\n');
    fs::write(out.join("timing.json"), timing)?;
    Ok(())
}

/// Writes `report.json` and `report.txt` into `out`.
pub fn emit_report(report: &BatchReport, timing: Option<&BatchTiming>, out: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(out)?;
    fs::write(
        out.join("report.json"),
        format_report(report, timing, ReportFormat::Json),
    )?;
    fs::write(
        out.join("report.txt"),
        format_report(report, timing, ReportFormat::Table),
    )?;
    Ok(())
}

/// Gradient check of the scenario's first OCP (platform cost active, one
/// obstacle term per configured obstacle) at `points` random decision
/// points with random multipliers.
pub fn check_gradients(
    scenario: &ScenarioConfig,
    points: usize,
    seed: u64,
) -> Result<Vec<GradientReport>, HarnessError> {
    let x0 = perturbed_initial_state(scenario, seed);
    let mut plan = build_plan(scenario, &PhaseMachine::default(), 0.0, &x0, scenario.initial_state.q.z);
    plan.tracking = true;
    let prob = OcpProblem::new(x0, &plan, &scenario.nmpc, &scenario.cbf, &scenario.vehicle)?;
    let rho = scenario.nmpc.solver.penalty_init;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..points)
        .map(|_| {
            let (z, mult) = random_probe(&prob, &mut rng);
            Ok(gradient_check(
                &prob,
                &z,
                &mult,
                rho,
                GRADIENT_STEP,
                GRADIENT_TOLERANCE,
            )?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbf::ObstacleSpec;
    use crate::sim::TerminalRecord;

    fn log_with_touchdown(drone: Vector3<f64>, platform: Vector3<f64>) -> TrialLog {
        TrialLog {
            scenario: "t".into(),
            seed: 0,
            records: Vec::new(),
            terminal: Some(TerminalRecord {
                touchdown_time: 1.0,
                drone_position: drone,
                platform_position: platform,
            }),
            failure: None,
            nonconverged_cycles: 0,
            held_cycles: 0,
        }
    }

    #[test]
    fn fpe_hand_values() {
        let p = Vector3::new(1.0, 2.0, 0.3);
        assert_eq!(final_point_error(&log_with_touchdown(p, p)).unwrap(), 0.0);
        let log = log_with_touchdown(Vector3::new(1.03, 2.04, 0.33), p);
        assert!((final_point_error(&log).unwrap() - 5.0).abs() < 1e-9);
        let three_d = final_point_error_with(&log, FpeMode::ThreeD).unwrap();
        assert!((three_d - 100.0 * (0.03f64.powi(2) * 2.0 + 0.04f64.powi(2)).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn fpe_rejects_unlanded_log() {
        let mut log = log_with_touchdown(Vector3::zeros(), Vector3::zeros());
        log.terminal = None;
        assert!(matches!(final_point_error(&log), Err(HarnessError::NoTouchdown(0))));
    }

    #[test]
    fn empty_batch_renders_na() {
        let report = BatchReport::from_trials("empty", 0, Vec::new());
        assert_eq!(report.success_rate, None);
        let table = render_table(&report, None);
        assert!(table.contains("success: 0/0 (n/a)"), "{table}");
        let back: BatchReport = serde_json::from_str(&format_report(&report, None, ReportFormat::Json)).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn validation_rejects_bad_geometry() {
        let mut sc = ScenarioConfig::example();
        sc.validate().unwrap();
        sc.cbf.obstacles = vec![ObstacleSpec::new([0.2, 0.0], 0.2, 0.3)];
        assert!(matches!(sc.validate(), Err(HarnessError::Invalid(_))));

        let mut sc = ScenarioConfig::example();
        sc.initial_state.p = Vector3::new(-2.0, 0.0, 1.3);
        sc.cbf.obstacles = vec![ObstacleSpec::new([-2.3, 0.1], 0.2, 0.3)];
        assert!(matches!(sc.validate(), Err(HarnessError::Invalid(_))));

        let mut sc = ScenarioConfig::example();
        sc.platform.motion = PlatformMotion::ConstantVelocity { velocity: [1.0, 0.0] };
        sc.cbf.obstacles = vec![ObstacleSpec::new([30.0, 0.3], 0.2, 0.3)];
        assert!(matches!(sc.validate(), Err(HarnessError::Invalid(_))));
    }

    #[test]
    fn validation_rejects_degenerate_solver_config() {
        let mut sc = ScenarioConfig::example();
        sc.nmpc.horizon = 0;
        assert!(matches!(sc.validate(), Err(HarnessError::Ocp(_))));
        let mut sc = ScenarioConfig::example();
        sc.nmpc.dt = 0.0;
        assert!(sc.validate().is_err());
        let mut sc = ScenarioConfig::example();
        sc.nmpc.dt = -0.1;
        assert!(sc.validate().is_err());
    }

    #[test]
    fn segment_distance_cases() {
        let (a, b) = (Vector2::new(0.0, 0.0), Vector2::new(2.0, 0.0));
        assert_eq!(segment_distance(a, b, Vector2::new(1.0, 1.0)), 1.0);
        assert_eq!(segment_distance(a, b, Vector2::new(3.0, 0.0)), 1.0);
        assert_eq!(segment_distance(a, a, Vector2::new(0.0, 2.0)), 2.0);
    }

    #[test]
    fn scenario_json_round_trip() {
        let sc = ScenarioConfig::example();
        let text = serde_json::to_string(&sc).unwrap();
        assert_eq!(ScenarioConfig::from_json(&text).unwrap(), sc);
    }
}
