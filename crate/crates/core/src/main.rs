use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use conformal_claims::io::{
    parse_feature_line, read_claims, summary_table, write_report_csv, write_report_json,
    PredictionRecord,
};
use conformal_claims::selfcheck::{grid_equivalence_suite, rank_uniformity_suite};
use conformal_claims::glm::MIN_BOOTSTRAP;
use conformal_claims::simulation::with_thread_limit;
use conformal_claims::{
    closed_form_interval, run_study, ClaimsTableSchema, Method, ScenarioId, ScenarioSpec,
};

const THREADS_VAR: &str = "CONFORMAL_THREADS";

#[derive(Debug, Parser)]
#[command(name = "conformal-claims", version, about = "Conformal prediction intervals for claim amounts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a simulation study and write its report.
    Simulate(SimulateArgs),
    /// Compute a conformal upper bound on a claims table.
    Predict(PredictArgs),
    /// Run the closed-form/grid and rank-uniformity suites.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    example: u8,
    #[arg(long, default_value_t = 200, value_parser = positive)]
    n: usize,
    #[arg(long, default_value_t = 2000, value_parser = positive)]
    reps: usize,
    #[arg(long, default_value_t = 0.005, value_parser = alpha)]
    alpha: f64,
    /// Comma-separated list of `conformal`, `glm_bootstrap`.
    #[arg(long, default_value = "conformal,glm_bootstrap", value_parser = methods)]
    methods: MethodList,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Predictive draws per GLM bootstrap interval.
    #[arg(long, default_value_t = 500)]
    bootstrap_draws: usize,
    /// Monte Carlo draws for an empirical oracle.
    #[arg(long, default_value_t = 1_000_000)]
    oracle_draws: usize,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "total")]
    response: String,
    /// Comma-separated predictor columns, replacing the default claims layout.
    #[arg(long, value_delimiter = ',')]
    predictors: Option<Vec<String>>,
    #[arg(long, value_parser = alpha)]
    alpha: f64,
    /// Feature vector of the new claim; all rows then form the training set.
    #[arg(long, conflicts_with = "leave_last_out")]
    new_row: Option<String>,
    /// Use the last row's features as the new claim and train on the rest (default).
    #[arg(long)]
    leave_last_out: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelfcheckArgs {
    #[arg(long, default_value_t = 200)]
    cases: usize,
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    #[arg(long, default_value_t = 5000)]
    reps: usize,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Debug, Clone)]
struct MethodList(Vec<Method>);

fn alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if a > 0.0 && a < 1.0 {
        Ok(a)
    } else {
        Err(format!("{a} is outside (0, 1)"))
    }
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn methods(s: &str) -> Result<MethodList, String> {
    let list: Vec<Method> = s
        .split(',')
        .filter(|m| !m.trim().is_empty())
        .map(|m| m.parse().map_err(|e: conformal_claims::Error| e.to_string()))
        .collect::<Result<_, _>>()?;
    if list.is_empty() {
        return Err("at least one method is required".into());
    }
    Ok(MethodList(list))
}

fn thread_limit() -> Result<Option<usize>, String> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(t) if t > 0 => Ok(Some(t)),
            _ => Err(format!("{THREADS_VAR} must be a positive integer, got `{v}`")),
        },
    }
}

fn usage_error(message: &str) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(2)
}

fn open_output(out: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn simulate(args: SimulateArgs) -> anyhow::Result<ExitCode> {
    let id = ScenarioId::from_number(args.example).expect("range-checked by clap");
    let scenario = ScenarioSpec {
        n: args.n,
        reps: args.reps,
        alpha: args.alpha,
        bootstrap_draws: args.bootstrap_draws,
        oracle_draws: args.oracle_draws,
        ..ScenarioSpec::new(id)
    };
    let glm_requested = args.methods.0.contains(&Method::GlmBootstrap);
    if let Err(e) = scenario.validate() {
        return Ok(usage_error(&e.to_string()));
    }
    if glm_requested && args.bootstrap_draws < MIN_BOOTSTRAP {
        return Ok(usage_error(&format!(
            "--bootstrap-draws must be at least {MIN_BOOTSTRAP}"
        )));
    }
    let report = run_study(&scenario, &args.methods.0, args.seed)?;
    let mut out = open_output(args.out.as_deref())?;
    match args.format {
        Format::Json => write_report_json(&report, &mut out)?,
        Format::Csv => write_report_csv(&report, &mut out)?,
    }
    out.flush()?;
    eprint!("{}", summary_table(&report));
    if report.conformal_valid() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "conformal coverage below the validity floor {:.6}",
            report.validity_floor()
        );
        Ok(ExitCode::FAILURE)
    }
}

fn predict(args: PredictArgs) -> anyhow::Result<ExitCode> {
    let mut schema = ClaimsTableSchema::default().with_response(&args.response);
    if let Some(predictors) = args.predictors {
        schema = schema.with_predictors(predictors);
    }
    let file = File::open(&args.data).with_context(|| format!("opening {}", args.data.display()))?;
    let ingested = read_claims(file, &schema)
        .with_context(|| format!("reading {}", args.data.display()))?;
    info!(
        "ingested {} rows, rejected {}",
        ingested.dataset.n(),
        ingested.rejected.len()
    );
    let full = ingested.dataset;
    let (training, x_new, mode) = match &args.new_row {
        Some(line) => {
            let x = parse_feature_line(line, full.p()).context("parsing --new-row")?;
            (full, x, "new_row")
        }
        None => {
            if full.n() < 2 {
                bail!("leave-last-out needs at least two rows");
            }
            let (rest, last) = full.split_last()?;
            (rest, last.x, "leave_last_out")
        }
    };
    let interval = closed_form_interval(&training, &x_new, args.alpha)?;
    let record = PredictionRecord::new(&interval, training.n(), training.p(), mode);
    let mut out = open_output(args.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &record)?;
    writeln!(out)?;
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn selfcheck(args: SelfcheckArgs) -> anyhow::Result<ExitCode> {
    let grid = grid_equivalence_suite(args.cases, args.step, args.seed)?;
    println!(
        "closed form vs grid: {} cases, {} mismatched  {}",
        grid.cases,
        grid.failures.len(),
        if grid.passed() { "PASS" } else { "FAIL" }
    );
    for case in &grid.failures {
        println!("  {case:?}");
    }
    let ranks = rank_uniformity_suite(ScenarioId::Example1, args.n, args.reps, args.seed, 0.001)?;
    println!(
        "rank uniformity: chi-square {:.3} vs critical {:.3} (df {})  {}",
        ranks.chi_square,
        ranks.critical_value,
        ranks.n,
        if ranks.passed() { "PASS" } else { "FAIL" }
    );
    Ok(if grid.passed() && ranks.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let threads = match thread_limit() {
        Ok(t) => t,
        Err(message) => return usage_error(&message),
    };
    let outcome = with_thread_limit(threads, || match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Predict(args) => predict(args),
        Command::Selfcheck(args) => selfcheck(args),
    });
    match outcome.map_err(anyhow::Error::from).and_then(|r| r) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
