//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test --release --test acceptance`. The real-data criterion
//! reads the claims table from `PERSONAL_INJURY_CSV` and is skipped when that
//! variable is unset.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use conformal_claims::io::{parse_feature_line, read_claims, ClaimsTableSchema};
use conformal_claims::selfcheck::{grid_equivalence_suite, rank_uniformity_suite};
use conformal_claims::simulation::with_thread_limit;
use conformal_claims::{
    closed_form_interval, run_study, Method, ScenarioId, ScenarioSpec, SimulationReport,
};

const SEED: u64 = 42;

const GRID_CASES: usize = 200;
const GRID_STEP: f64 = 1e-3;
const GRID_BUDGET: Duration = Duration::from_secs(60);

const RANK_REPS: usize = 5000;
const RANK_N: usize = 20;
const RANK_SIGNIFICANCE: f64 = 0.001;
const RANK_BUDGET: Duration = Duration::from_secs(60);

const COVERAGE_FLOOR: f64 = 0.990;
const EXAMPLE1_RATIO: (f64, f64) = (0.95, 1.20);
const EXAMPLE2_RATIO: (f64, f64) = (0.93, 1.35);
const EXAMPLE3_RATIO: (f64, f64) = (1.3, 2.2);
const EXAMPLE1_BUDGET: Duration = Duration::from_secs(300);

const GLM_MISSPECIFIED_MAX_COVERAGE: f64 = 0.80;
const GLM_MISSPECIFIED_MAX_MEDIAN: f64 = 5.0;
const GLM_WELL_SPECIFIED_MIN_COVERAGE: f64 = 0.98;

const REAL_DATA_ROWS: usize = 22_036;
const REAL_DATA_TOLERANCE: f64 = 0.01;
const REAL_DATA_BOUNDS: [(f64, f64); 3] = [(0.10, 85_333.0), (0.05, 148_993.0), (0.005, 544_093.0)];

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Line {
    id: &'static str,
    name: &'static str,
    verdict: Verdict,
    detail: String,
}

impl Line {
    fn new(id: &'static str, name: &'static str, passed: bool, detail: String) -> Self {
        let verdict = if passed { Verdict::Pass } else { Verdict::Fail };
        Self { id, name, verdict, detail }
    }

    fn print(&self) {
        let tag = match self.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Skip => "SKIP",
        };
        println!("{tag}  [{}] {}: {}", self.id, self.name, self.detail);
    }
}

fn within((lo, hi): (f64, f64), v: f64) -> bool {
    v >= lo && v <= hi
}

fn study(id: ScenarioId, methods: &[Method], threads: Option<usize>) -> (SimulationReport, Duration) {
    let started = Instant::now();
    let report = with_thread_limit(threads, || run_study(&ScenarioSpec::new(id), methods, SEED))
        .expect("thread pool")
        .expect("study runs");
    (report, started.elapsed())
}

fn grid_equivalence() -> Line {
    let started = Instant::now();
    let outcome = grid_equivalence_suite(GRID_CASES, GRID_STEP, SEED).expect("grid suite");
    let elapsed = started.elapsed();
    let matched = outcome.cases - outcome.failures.len();
    Line::new(
        "1",
        "closed form vs grid scan",
        outcome.passed() && elapsed < GRID_BUDGET,
        format!(
            "{matched}/{} datasets match within one step of {GRID_STEP} ({:.1} s, budget {} s)",
            outcome.cases,
            elapsed.as_secs_f64(),
            GRID_BUDGET.as_secs()
        ),
    )
}

fn rank_uniformity() -> Line {
    let started = Instant::now();
    let outcome = rank_uniformity_suite(ScenarioId::Example1, RANK_N, RANK_REPS, SEED, RANK_SIGNIFICANCE)
        .expect("rank suite");
    let elapsed = started.elapsed();
    Line::new(
        "2",
        "rank uniformity",
        outcome.passed() && elapsed < RANK_BUDGET,
        format!(
            "chi-square {:.3} <= {:.3} on {} atoms at {RANK_SIGNIFICANCE} ({:.1} s, budget {} s)",
            outcome.chi_square,
            outcome.critical_value,
            RANK_N + 1,
            elapsed.as_secs_f64(),
            RANK_BUDGET.as_secs()
        ),
    )
}

fn conformal_row(
    id: &'static str,
    name: &'static str,
    report: &SimulationReport,
    band: (f64, f64),
    budget: Option<(Duration, Duration)>,
) -> Line {
    let m = report.method(Method::Conformal).expect("conformal row");
    let coverage_ok = within((COVERAGE_FLOOR, 1.0), m.coverage_probability);
    let ratio_ok = within(band, m.mean_length_ratio);
    let time_ok = budget.is_none_or(|(spent, limit)| spent < limit);
    let timing = budget.map_or(String::new(), |(spent, limit)| {
        format!(", {:.1} s, budget {} s", spent.as_secs_f64(), limit.as_secs())
    });
    Line::new(
        id,
        name,
        coverage_ok && ratio_ok && time_ok,
        format!(
            "coverage {:.4} in [{COVERAGE_FLOOR}, 1] {}; length ratio {:.4} in [{}, {}] {}{timing}",
            m.coverage_probability,
            if coverage_ok { "ok" } else { "no" },
            m.mean_length_ratio,
            band.0,
            band.1,
            if ratio_ok { "ok" } else { "no" },
        ),
    )
}

fn glm_misspecified(report: &SimulationReport) -> Line {
    let m = report.method(Method::GlmBootstrap).expect("glm row");
    let median = m.length_summary.map_or(f64::NAN, |s| s.median);
    let coverage_ok = m.coverage_probability <= GLM_MISSPECIFIED_MAX_COVERAGE;
    let median_ok = median < GLM_MISSPECIFIED_MAX_MEDIAN;
    Line::new(
        "6",
        "example 2 GLM under misspecification",
        coverage_ok && median_ok,
        format!(
            "coverage {:.4} <= {GLM_MISSPECIFIED_MAX_COVERAGE} {}; median length {:.4} < {GLM_MISSPECIFIED_MAX_MEDIAN} {}",
            m.coverage_probability,
            if coverage_ok { "ok" } else { "no" },
            median,
            if median_ok { "ok" } else { "no" },
        ),
    )
}

fn glm_well_specified(report: &SimulationReport) -> Line {
    let m = report.method(Method::GlmBootstrap).expect("glm row");
    Line::new(
        "7",
        "example 1 GLM, well specified",
        m.coverage_probability >= GLM_WELL_SPECIFIED_MIN_COVERAGE,
        format!(
            "coverage {:.4} >= {GLM_WELL_SPECIFIED_MIN_COVERAGE} ({} failed fits)",
            m.coverage_probability, m.failed_fits
        ),
    )
}

fn real_data() -> Line {
    const ID: &str = "8";
    const NAME: &str = "personal injury upper bounds";
    let Some(path) = std::env::var_os("PERSONAL_INJURY_CSV").map(PathBuf::from) else {
        return Line {
            id: ID,
            name: NAME,
            verdict: Verdict::Skip,
            detail: "PERSONAL_INJURY_CSV not set".into(),
        };
    };
    let file = match std::fs::File::open(&path) {
        Ok(f) => f,
        Err(e) => {
            return Line {
                id: ID,
                name: NAME,
                verdict: Verdict::Skip,
                detail: format!("{}: {e}", path.display()),
            }
        }
    };
    let full = read_claims(file, &ClaimsTableSchema::default())
        .expect("claims table parses")
        .dataset;
    let (rest, last) = full.split_last().expect("at least two rows");
    let new_row = std::env::var("PERSONAL_INJURY_NEW_ROW")
        .ok()
        .map(|line| parse_feature_line(&line, full.p()).expect("feature vector parses"))
        .unwrap_or_else(|| last.x.clone());

    let mode = |training, x: &[f64]| -> (bool, String) {
        let mut ok = true;
        let parts: Vec<String> = REAL_DATA_BOUNDS
            .iter()
            .map(|&(alpha, target)| {
                let upper = closed_form_interval(training, x, alpha).expect("interval").upper;
                let rel = (upper - target).abs() / target;
                ok &= rel <= REAL_DATA_TOLERANCE;
                format!("{upper:.0} vs {target:.0}")
            })
            .collect();
        (ok, parts.join(", "))
    };
    let (loo_ok, loo) = mode(&rest, &last.x);
    let (all_ok, all) = mode(&full, &new_row);
    Line::new(
        ID,
        NAME,
        full.n() == REAL_DATA_ROWS && (loo_ok || all_ok),
        format!(
            "n = {}; leave-last-out [{loo}]; all rows [{all}]; tolerance {REAL_DATA_TOLERANCE}",
            full.n()
        ),
    )
}

fn determinism() -> Line {
    let methods = [Method::Conformal, Method::GlmBootstrap];
    let runs = [Some(1), None, Some(4), Some(1)]
        .map(|threads| study(ScenarioId::Example1, &methods, threads).0);
    let key = |r: &SimulationReport| -> Vec<(u64, u64)> {
        r.methods
            .iter()
            .map(|m| (m.coverage_probability.to_bits(), m.mean_length_ratio.to_bits()))
            .collect()
    };
    let first = key(&runs[0]);
    Line::new(
        "9",
        "determinism across thread counts",
        runs.iter().all(|r| key(r) == first),
        "example 1 with 1 thread, all cores, 4 threads and 1 thread again; coverage and ratio compared bitwise".into(),
    )
}

fn main() -> ExitCode {
    let both = [Method::Conformal, Method::GlmBootstrap];
    let mut lines = vec![grid_equivalence(), rank_uniformity()];

    let (ex1, ex1_time) = study(ScenarioId::Example1, &both, None);
    let (ex2, _) = study(ScenarioId::Example2, &both, None);
    let (ex3, _) = study(ScenarioId::Example3, &[Method::Conformal], None);
    lines.push(conformal_row(
        "3",
        "example 1 conformal",
        &ex1,
        EXAMPLE1_RATIO,
        Some((ex1_time, EXAMPLE1_BUDGET)),
    ));
    lines.push(conformal_row("4", "example 2 conformal", &ex2, EXAMPLE2_RATIO, None));
    lines.push(conformal_row("5", "example 3 conformal", &ex3, EXAMPLE3_RATIO, None));
    lines.push(glm_misspecified(&ex2));
    lines.push(glm_well_specified(&ex1));
    lines.push(real_data());
    lines.push(determinism());

    for line in &lines {
        line.print();
    }
    let failed = lines.iter().filter(|l| matches!(l.verdict, Verdict::Fail)).count();
    println!("{} criteria, {failed} failed", lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
