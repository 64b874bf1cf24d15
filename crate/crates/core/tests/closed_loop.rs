use std::path::Path;

use nalgebra::Vector3;
use proptest::prelude::*;

use lander::harness::{final_point_error, run_batch, BatchReport, ScenarioConfig, TrialReport};
use lander::platform::{descent_reference, is_complete_phase_sequence, LandingConfig, LandingPhase};
use lander::sim::{run_closed_loop, TerminalRecord, TrialLog};

fn scenario(name: &str) -> ScenarioConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"));
    ScenarioConfig::load(&path).unwrap()
}

fn check_log(sc: &ScenarioConfig, log: &TrialLog) -> Result<(), TestCaseError> {
    prop_assert!(log.landed(), "seed {} failed: {:?}", log.seed, log.failure);
    prop_assert!(is_complete_phase_sequence(&log.phases()), "{:?}", log.phases());
    let dt = sc.nmpc.dt;
    for (k, r) in log.records.iter().enumerate() {
        prop_assert!((r.t - k as f64 * dt).abs() < 1e-9);
    }
    let landed = log.records.iter().filter(|r| r.phase == LandingPhase::Landed).count();
    prop_assert_eq!(landed, 1, "logging continues after LANDED");
    prop_assert_eq!(log.records.last().unwrap().phase, LandingPhase::Landed);

    let term = log.terminal.unwrap();
    prop_assert!((term.drone_position.z - term.platform_position.z).abs() <= 0.05);
    if !sc.cbf.obstacles.is_empty() && log.nonconverged_cycles == 0 {
        prop_assert!(log.min_h().unwrap() >= -1e-5);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn static_obstacle_trials_land_safely(seed in 100u64..10_000) {
        let sc = scenario("static_obstacle");
        check_log(&sc, &run_closed_loop(&sc, seed).log)?;
    }

    #[test]
    fn dynamic_obstacle_trials_land_safely(seed in 100u64..10_000) {
        let sc = scenario("dynamic_obstacle");
        check_log(&sc, &run_closed_loop(&sc, seed).log)?;
    }

    #[test]
    fn trials_are_deterministic(seed in 0u64..10_000) {
        let sc = scenario("dynamic_clear");
        prop_assert_eq!(run_closed_loop(&sc, seed).log, run_closed_loop(&sc, seed).log);
    }
}

fn terminal_log(drone: Vector3<f64>, platform: Vector3<f64>) -> TrialLog {
    TrialLog {
        scenario: "synthetic".into(),
        seed: 0,
        records: Vec::new(),
        terminal: Some(TerminalRecord {
            touchdown_time: 3.0,
            drone_position: drone,
            platform_position: platform,
        }),
        failure: None,
        nonconverged_cycles: 0,
        held_cycles: 0,
    }
}

fn trial_report() -> impl Strategy<Value = TrialReport> {
    (
        any::<u64>(),
        any::<bool>(),
        0.0..20.0f64,
        prop::option::of(-1.0..5.0f64),
        1usize..400,
    )
        .prop_map(|(seed, failed, fpe, min_h, cycles)| TrialReport {
            seed,
            failed,
            failure: failed.then(|| "timeout".to_string()),
            fpe_cm: (!failed).then_some(fpe),
            touchdown_time: (!failed).then_some(cycles as f64 * 0.1),
            min_h,
            cycles,
            mean_iterations: 2.5,
            max_iterations: 7,
            nonconverged_cycles: 0,
            held_cycles: 0,
        })
}

proptest! {
    #[test]
    fn fpe_is_translation_invariant(
        d in prop::array::uniform3(-2.0..2.0f64),
        p in prop::array::uniform3(-2.0..2.0f64),
        shift in prop::array::uniform3(-100.0..100.0f64),
    ) {
        let (drone, platform) = (Vector3::from(p) + Vector3::from(d) * 0.1, Vector3::from(p));
        let s = Vector3::from(shift);
        let a = final_point_error(&terminal_log(drone, platform)).unwrap();
        let b = final_point_error(&terminal_log(drone + s, platform + s)).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + s.amax()) * 100.0);
    }

    #[test]
    fn batch_aggregates_match_recomputation(trials in prop::collection::vec(trial_report(), 0..30)) {
        let report = BatchReport::from_trials("synthetic", 0, trials.clone());
        let ok: Vec<&TrialReport> = trials.iter().filter(|t| !t.failed).collect();
        prop_assert_eq!(report.successes, ok.len());
        if trials.is_empty() {
            prop_assert!(report.success_rate.is_none());
        } else {
            prop_assert_eq!(report.success_rate, Some(ok.len() as f64 / trials.len() as f64));
        }
        let fpes: Vec<f64> = ok.iter().map(|t| t.fpe_cm.unwrap()).collect();
        if fpes.is_empty() {
            prop_assert!(report.mean_fpe_cm.is_none() && report.max_fpe_cm.is_none());
        } else {
            let mean = fpes.iter().sum::<f64>() / fpes.len() as f64;
            prop_assert!((report.mean_fpe_cm.unwrap() - mean).abs() <= 1e-12 * mean.max(1.0));
            prop_assert_eq!(report.max_fpe_cm, fpes.iter().copied().reduce(f64::max));
        }
        prop_assert_eq!(report.min_h, trials.iter().filter_map(|t| t.min_h).reduce(f64::min));

        let json = serde_json::to_string(&report).unwrap();
        prop_assert_eq!(serde_json::from_str::<BatchReport>(&json).unwrap(), report);
    }

    #[test]
    fn descent_target_never_rises_while_descending(top in 0.0..2.0f64, t in 0.0..20.0f64, dt in 0.0..5.0f64) {
        let cfg = LandingConfig::default();
        let p = Vector3::new(0.3, -0.2, top);
        let a = descent_reference(LandingPhase::Descend, &p, &cfg, t);
        let b = descent_reference(LandingPhase::Descend, &p, &cfg, t + dt);
        prop_assert!(b.z <= a.z);
    }
}

#[test]
fn single_trial_batch_equals_trial_metrics() {
    let sc = scenario("static_clear");
    let batch = run_batch(&sc, 1, 42);
    let trial = TrialReport::from_log(&run_closed_loop(&sc, 42).log);
    assert_eq!(batch.report.trials, vec![trial.clone()]);
    assert_eq!(batch.report.mean_fpe_cm, trial.fpe_cm);
    assert_eq!(batch.report.max_fpe_cm, trial.fpe_cm);
    assert_eq!(batch.report.success_rate, Some(1.0));
}
