use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use lander::harness::{
    check_gradients, format_report, run_batch, write_outputs, HarnessError, ReportFormat, ScenarioConfig,
};
use lander::sim::NoiseSigmas;

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID: u8 = 2;

#[derive(Parser)]
#[command(name = "lander", version, about = "NMPC + CBF quadrotor landing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a seeded batch of closed-loop landing trials.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Number of trials (scenario value if omitted).
        #[arg(long)]
        trials: Option<usize>,
        /// Base seed; trial `i` uses `seed + i` (scenario value if omitted).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Measurement noise preset: none, low or high.
        #[arg(long)]
        noise: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Also fail when the scenario's acceptance bounds are not met.
        #[arg(long)]
        assert: bool,
    },
    /// Compare analytic OCP gradients with central finite differences.
    CheckGradients {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Load and validate a scenario file.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Table => ReportFormat::Table,
        }
    }
}

fn load(path: &Path) -> Result<ScenarioConfig, ExitCode> {
    match ScenarioConfig::load(path).and_then(|s| s.validate().map(|()| s)) {
        Ok(s) => Ok(s),
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            Err(ExitCode::from(EXIT_INVALID))
        }
    }
}

fn run(
    scenario: &Path,
    trials: Option<usize>,
    seed: Option<u64>,
    out: &Path,
    noise: Option<&str>,
    format: Format,
    assert: bool,
) -> anyhow::Result<ExitCode> {
    let mut sc = match load(scenario) {
        Ok(s) => s,
        Err(code) => return Ok(code),
    };
    if let Some(name) = noise {
        match NoiseSigmas::preset(name) {
            Some(n) => sc.noise = n,
            None => {
                eprintln!("unknown noise preset {name:?} (expected none, low or high)");
                return Ok(ExitCode::from(EXIT_INVALID));
            }
        }
    }
    let trials = trials.unwrap_or(sc.trials);
    let seed = seed.unwrap_or(sc.seed);

    let batch = run_batch(&sc, trials, seed);
    write_outputs(&batch, out).with_context(|| format!("writing outputs to {}", out.display()))?;
    print!("{}", format_report(&batch.report, Some(&batch.timing), format.into()));

    let mut problems = Vec::new();
    if !batch.report.all_succeeded() {
        problems.push(format!(
            "{} of {} trials failed",
            batch.report.trials.len() - batch.report.successes,
            batch.report.trials.len()
        ));
    }
    if assert {
        match &sc.acceptance {
            Some(bounds) => problems.extend(batch.report.check(bounds)),
            None => eprintln!("note: scenario {} declares no acceptance bounds", sc.name),
        }
    }
    problems.dedup();
    for p in &problems {
        eprintln!("FAIL: {p}");
    }
    Ok(if problems.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAILURE)
    })
}

fn gradients(scenario: &Path, points: usize, seed: Option<u64>) -> anyhow::Result<ExitCode> {
    let sc = match load(scenario) {
        Ok(s) => s,
        Err(code) => return Ok(code),
    };
    let reports = match check_gradients(&sc, points, seed.unwrap_or(sc.seed)) {
        Ok(r) => r,
        Err(e @ (HarnessError::Invalid(_) | HarnessError::Ocp(_))) => {
            eprintln!("{}: {e}", scenario.display());
            return Ok(ExitCode::from(EXIT_INVALID));
        }
        Err(e) => return Err(e.into()),
    };
    let mut worst: f64 = 0.0;
    for (i, r) in reports.iter().enumerate() {
        println!(
            "point {i:>3}  max_rel_error {:.3e}  worst_index {:>4}  {}",
            r.max_rel_error,
            r.worst_index,
            if r.passed { "ok" } else { "FAIL" }
        );
        worst = worst.max(r.max_rel_error);
    }
    let passed = reports.iter().all(|r| r.passed);
    println!(
        "{}: {} points, max relative error {worst:.3e} (tolerance {:.0e}) {}",
        sc.name,
        reports.len(),
        lander::harness::GRADIENT_TOLERANCE,
        if passed { "PASS" } else { "FAIL" }
    );
    Ok(if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAILURE)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            scenario,
            trials,
            seed,
            out,
            noise,
            format,
            assert,
        } => run(scenario, *trials, *seed, out, noise.as_deref(), *format, *assert),
        Command::CheckGradients { scenario, points, seed } => gradients(scenario, *points, *seed),
        Command::Validate { scenario } => Ok(match load(scenario) {
            Ok(sc) => {
                println!("{}: ok ({})", scenario.display(), sc.name);
                ExitCode::SUCCESS
            }
            Err(code) => code,
        }),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(EXIT_FAILURE)
    })
}
