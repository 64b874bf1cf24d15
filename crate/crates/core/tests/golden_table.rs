use std::path::PathBuf;

use lander::harness::{render_table, BatchReport, BatchTiming, TrialReport, TrialTiming};

fn known_report() -> (BatchReport, BatchTiming) {
    let landed = |seed: u64, fpe: f64, min_h: Option<f64>| TrialReport {
        seed,
        failed: false,
        failure: None,
        fpe_cm: Some(fpe),
        touchdown_time: Some(4.2 + seed as f64 * 0.1),
        min_h,
        cycles: 43 + seed as usize,
        mean_iterations: 2.75,
        max_iterations: 9,
        nonconverged_cycles: 0,
        held_cycles: 0,
    };
    let trials = vec![
        landed(0, 0.0031, Some(0.0838)),
        landed(1, 1.25, Some(0.1402)),
        TrialReport {
            seed: 2,
            failed: true,
            failure: Some("timeout".into()),
            fpe_cm: None,
            touchdown_time: None,
            min_h: Some(-2.5e-6),
            cycles: 600,
            mean_iterations: 6.5,
            max_iterations: 20,
            nonconverged_cycles: 31,
            held_cycles: 2,
        },
    ];
    let timing = BatchTiming {
        trials: (0..3)
            .map(|seed| TrialTiming {
                seed,
                mean_cycle_ms: 4.5 + seed as f64,
                max_cycle_ms: 21.25 * (seed + 1) as f64,
            })
            .collect(),
    };
    (BatchReport::from_trials("golden", 0, trials), timing)
}

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn assert_golden(name: &str, actual: &str) {
    let path = golden(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "rendering differs from {}", path.display());
}

#[test]
fn table_matches_golden_file() {
    let (report, timing) = known_report();
    assert_golden("table.txt", &render_table(&report, Some(&timing)));
}

#[test]
fn table_without_timing_matches_golden_file() {
    let (report, _) = known_report();
    assert_golden("table_no_timing.txt", &render_table(&report, None));
}

#[test]
fn empty_batch_table_matches_golden_file() {
    assert_golden(
        "table_empty.txt",
        &render_table(&BatchReport::from_trials("empty", 5, Vec::new()), None),
    );
}
