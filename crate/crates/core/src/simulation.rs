//! Monte Carlo coverage studies for the three claim-severity scenarios.
//!
//! Replication `r` draws its data from stream `(master_seed, r)` in the data
//! lane and its bootstrap draws from the same stream id in the bootstrap
//! lane. Results are collected in replication order and reduced serially, so
//! a report does not depend on the thread count.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{
    closed_form_interval, validate_alpha, Dataset, IntervalMethod, IntervalWarning,
    ObservationPair, PredictionInterval,
};
use crate::distributions::{empirical_quantile, lane, DistributionSpec, Sampler, SeedSpec};
use crate::error::{Error, Result};
use crate::glm::{bootstrap_interval, fit_gamma_identity, MIN_BOOTSTRAP};

/// Smallest allowed Monte Carlo sample for an empirical oracle.
pub const MIN_ORACLE_DRAWS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioId {
    /// `Y = X1 + e`, `X1 ~ Gamma(2, 2.5)`, `e ~ Gamma(0.04, 2.5)`.
    Example1,
    /// `Y = X1 + e`, `X1 ~ Pareto2(3, 10)`, `e ~ Gamma(0.04, 2.5)`.
    Example2,
    /// `Y = X1^2 + 3 X2 + 2 X3 + e` with `X1 ~ Pareto2(1.5, 4)`,
    /// `X2 ~ Bernoulli(1/3)`, `X3 ~ LogNormal(1, 0.5)`, `e ~ Gamma(2, 4)`.
    Example3,
}

impl ScenarioId {
    pub fn from_number(k: u8) -> Option<Self> {
        match k {
            1 => Some(Self::Example1),
            2 => Some(Self::Example2),
            3 => Some(Self::Example3),
            _ => None,
        }
    }

    pub fn mechanism(self) -> Mechanism {
        let small_gamma = DistributionSpec::gamma(0.04, 2.5);
        match self {
            Self::Example1 => Mechanism {
                features: vec![DistributionSpec::gamma(2.0, 2.5)],
                noise: small_gamma,
                rule: ResponseRule::FirstPlusNoise,
                exact_response: Some(DistributionSpec::gamma(2.04, 2.5)),
            },
            Self::Example2 => Mechanism {
                features: vec![DistributionSpec::pareto2(3.0, 10.0)],
                noise: small_gamma,
                rule: ResponseRule::FirstPlusNoise,
                exact_response: None,
            },
            Self::Example3 => Mechanism {
                features: vec![
                    DistributionSpec::pareto2(1.5, 4.0),
                    DistributionSpec::bernoulli(1.0 / 3.0),
                    DistributionSpec::lognormal(1.0, 0.5),
                ],
                noise: DistributionSpec::gamma(2.0, 4.0),
                rule: ResponseRule::SquaredParetoMix,
                exact_response: None,
            },
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::Example1 => "example1",
            Self::Example2 => "example2",
            Self::Example3 => "example3",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseRule {
    /// `Y = X1 + e`
    FirstPlusNoise,
    /// `Y = X1^2 + 3 X2 + 2 X3 + e`
    SquaredParetoMix,
}

impl ResponseRule {
    pub fn apply(self, x: &[f64], noise: f64) -> f64 {
        match self {
            Self::FirstPlusNoise => x[0] + noise,
            Self::SquaredParetoMix => x[0] * x[0] + 3.0 * x[1] + 2.0 * x[2] + noise,
        }
    }
}

/// A data-generating mechanism.
#[derive(Debug, Clone, PartialEq)]
pub struct Mechanism {
    pub features: Vec<DistributionSpec>,
    pub noise: DistributionSpec,
    pub rule: ResponseRule,
    /// Known marginal law of `Y`, when it has one.
    pub exact_response: Option<DistributionSpec>,
}

struct RowSampler {
    features: Vec<Sampler>,
    noise: Sampler,
    rule: ResponseRule,
}

impl RowSampler {
    fn new(mechanism: &Mechanism) -> Result<Self> {
        Ok(Self {
            features: mechanism
                .features
                .iter()
                .map(DistributionSpec::sampler)
                .collect::<Result<_>>()?,
            noise: mechanism.noise.sampler()?,
            rule: mechanism.rule,
        })
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> ObservationPair {
        let x: Vec<f64> = self.features.iter().map(|s| s.sample(rng)).collect();
        let noise = self.noise.sample(rng);
        let y = self.rule.apply(&x, noise);
        ObservationPair::new(x, y)
    }
}

/// One simulation study: a mechanism plus its sizes and level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    /// Training size `n`.
    pub n: usize,
    /// Replication count `N`.
    pub reps: usize,
    pub alpha: f64,
    /// Predictive draws per GLM bootstrap interval.
    pub bootstrap_draws: usize,
    /// Monte Carlo draws behind an empirical oracle.
    pub oracle_draws: usize,
}

impl ScenarioSpec {
    /// The reference configuration: `n = 200`, `N = 2000`, `alpha = 0.005`,
    /// `B = 500`, `M = 10^6`.
    pub fn new(id: ScenarioId) -> Self {
        Self {
            id,
            n: 200,
            reps: 2000,
            alpha: 0.005,
            bootstrap_draws: 500,
            oracle_draws: 1_000_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_alpha(self.alpha)?;
        if self.n == 0 {
            return Err(Error::Invalid("n must be at least 1".into()));
        }
        if self.reps == 0 {
            return Err(Error::Invalid("replication count must be at least 1".into()));
        }
        if self.id.mechanism().exact_response.is_none() && self.oracle_draws < MIN_ORACLE_DRAWS {
            return Err(Error::Invalid(format!(
                "empirical oracle needs at least {MIN_ORACLE_DRAWS} draws, got {}",
                self.oracle_draws
            )));
        }
        Ok(())
    }

    pub fn mechanism(&self) -> Mechanism {
        self.id.mechanism()
    }
}

/// Draws `n + 1` rows from the replication's stream: the first `n` form the
/// training set, the last one is held out.
pub fn generate_replication(
    scenario: &ScenarioSpec,
    seed: SeedSpec,
) -> Result<(Dataset, ObservationPair)> {
    scenario.validate()?;
    let sampler = RowSampler::new(&scenario.mechanism())?;
    let mut rng = seed.rng_in_lane(lane::DATA);
    let mut rows: Vec<ObservationPair> = (0..=scenario.n).map(|_| sampler.draw(&mut rng)).collect();
    let holdout = rows.pop().expect("n + 1 rows");
    Ok((Dataset::new(rows)?, holdout))
}

/// The oracle interval `[0, b)`, `b` the `1 - alpha` quantile of `Y`.
///
/// Analytic when the response law is known; otherwise the empirical
/// quantile of `oracle_draws` fresh responses from the oracle lane of
/// `master_seed`.
pub fn oracle_interval(scenario: &ScenarioSpec, master_seed: u64) -> Result<PredictionInterval> {
    scenario.validate()?;
    let level = 1.0 - scenario.alpha;
    let mechanism = scenario.mechanism();
    let upper = match &mechanism.exact_response {
        Some(law) => law.quantile(level)?,
        None => {
            let sampler = RowSampler::new(&mechanism)?;
            let mut rng = SeedSpec::new(master_seed, 0).rng_in_lane(lane::ORACLE);
            let ys: Vec<f64> = (0..scenario.oracle_draws)
                .map(|_| sampler.draw(&mut rng).y)
                .collect();
            empirical_quantile(&ys, level)?
        }
    };
    Ok(PredictionInterval::one_sided(
        upper,
        level,
        IntervalMethod::Oracle,
    ))
}

/// Interval constructions compared in a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Conformal,
    GlmBootstrap,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Conformal => "conformal",
            Self::GlmBootstrap => "glm_bootstrap",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "conformal" => Ok(Self::Conformal),
            "glm_bootstrap" | "glm" => Ok(Self::GlmBootstrap),
            other => Err(Error::Invalid(format!("unknown method `{other}`"))),
        }
    }
}

/// What happened to one method in one replication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodOutcome {
    pub interval: PredictionInterval,
    pub covered: bool,
}

/// Builds the interval for `method` on one replication.
pub fn method_interval(
    method: Method,
    scenario: &ScenarioSpec,
    training: &Dataset,
    x_new: &[f64],
    seed: SeedSpec,
) -> Result<PredictionInterval> {
    match method {
        Method::Conformal => closed_form_interval(training, x_new, scenario.alpha),
        Method::GlmBootstrap => {
            let level = 1.0 - scenario.alpha;
            let failed = || {
                PredictionInterval::unbounded(
                    level,
                    IntervalMethod::GlmBootstrap,
                    IntervalWarning::FitFailed,
                )
            };
            match fit_gamma_identity(training) {
                Ok(fit) if fit.converged => bootstrap_interval(
                    &fit,
                    x_new,
                    scenario.alpha,
                    scenario.bootstrap_draws,
                    seed,
                ),
                Ok(_) => Ok(failed()),
                Err(Error::Singular | Error::NonPositiveResponse { .. }) => Ok(failed()),
                Err(e) => Err(e),
            }
        }
    }
}

/// Runs one replication for every requested method.
pub fn run_replication(
    scenario: &ScenarioSpec,
    methods: &[Method],
    master_seed: u64,
    replication: u64,
) -> Result<Vec<MethodOutcome>> {
    let seed = SeedSpec::new(master_seed, replication);
    let (training, holdout) = generate_replication(scenario, seed)?;
    methods
        .iter()
        .map(|&method| {
            let interval =
                method_interval(method, scenario, &training, &holdout.x, seed)?;
            Ok(MethodOutcome {
                covered: interval.contains(holdout.y),
                interval,
            })
        })
        .collect()
}

/// Order statistics of the bounded interval lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub p90: f64,
    pub max: f64,
    pub mean: f64,
}

impl LengthSummary {
    fn from_lengths(lengths: &[f64]) -> Option<Self> {
        if lengths.is_empty() {
            return None;
        }
        let q = |p: f64| empirical_quantile(lengths, p).expect("non-empty, finite");
        Some(Self {
            min: lengths.iter().copied().fold(f64::INFINITY, f64::min),
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            p90: q(0.9),
            max: lengths.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: lengths.iter().sum::<f64>() / lengths.len() as f64,
        })
    }
}

/// Aggregated results for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    /// `K`, the number of replications whose interval held `Y_{n+1}`.
    pub covered: usize,
    /// `K / N`.
    pub coverage_probability: f64,
    /// Mean length of the bounded intervals; NaN (`null`) when there are none.
    #[serde(with = "nan_as_null")]
    pub mean_length: f64,
    /// `mean_length / oracle length`.
    #[serde(with = "nan_as_null")]
    pub mean_length_ratio: f64,
    pub unbounded_intervals: usize,
    pub failed_fits: usize,
    pub degenerate_intervals: usize,
    pub length_summary: Option<LengthSummary>,
}

impl MethodSummary {
    fn aggregate(method: Method, outcomes: &[MethodOutcome], oracle_length: f64) -> Self {
        let covered = outcomes.iter().filter(|o| o.covered).count();
        let lengths: Vec<f64> = outcomes
            .iter()
            .map(|o| o.interval.length())
            .filter(|l| l.is_finite())
            .collect();
        let mean_length = if lengths.is_empty() {
            f64::NAN
        } else {
            lengths.iter().sum::<f64>() / lengths.len() as f64
        };
        let count_warning = |w: IntervalWarning| {
            outcomes
                .iter()
                .filter(|o| o.interval.warning == Some(w))
                .count()
        };
        Self {
            method,
            covered,
            coverage_probability: covered as f64 / outcomes.len() as f64,
            mean_length,
            mean_length_ratio: mean_length / oracle_length,
            unbounded_intervals: outcomes.len() - lengths.len(),
            failed_fits: count_warning(IntervalWarning::FitFailed),
            degenerate_intervals: count_warning(IntervalWarning::NonPositiveUpper),
            length_summary: LengthSummary::from_lengths(&lengths),
        }
    }
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Results of [`run_study`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub scenario: ScenarioId,
    pub n: usize,
    #[serde(rename = "N")]
    pub reps: usize,
    pub alpha: f64,
    pub master_seed: u64,
    pub bootstrap_draws: usize,
    pub oracle_draws: Option<usize>,
    pub oracle_upper: f64,
    pub methods: Vec<MethodSummary>,
    pub wall_clock_seconds: f64,
}

impl SimulationReport {
    pub fn method(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// `1 - alpha - 3 sqrt(alpha (1 - alpha) / N)`.
    pub fn validity_floor(&self) -> f64 {
        validity_floor(self.alpha, self.reps)
    }

    /// Whether conformal coverage clears [`Self::validity_floor`]. Vacuously
    /// true when conformal was not run.
    pub fn conformal_valid(&self) -> bool {
        self.method(Method::Conformal)
            .is_none_or(|m| m.coverage_probability >= self.validity_floor())
    }
}

pub fn validity_floor(alpha: f64, reps: usize) -> f64 {
    1.0 - alpha - 3.0 * (alpha * (1.0 - alpha) / reps as f64).sqrt()
}

/// Runs `N` replications on the current rayon pool and aggregates them.
pub fn run_study(
    scenario: &ScenarioSpec,
    methods: &[Method],
    master_seed: u64,
) -> Result<SimulationReport> {
    let started = Instant::now();
    scenario.validate()?;
    if methods.is_empty() {
        return Err(Error::Invalid("no methods requested".into()));
    }
    if methods.contains(&Method::GlmBootstrap) && scenario.bootstrap_draws < MIN_BOOTSTRAP {
        return Err(Error::BootstrapTooSmall(scenario.bootstrap_draws));
    }
    let mut unique = methods.to_vec();
    unique.dedup();

    let oracle = oracle_interval(scenario, master_seed)?;
    let per_replication: Vec<Vec<MethodOutcome>> = (0..scenario.reps as u64)
        .into_par_iter()
        .map(|r| run_replication(scenario, &unique, master_seed, r))
        .collect::<Result<_>>()?;

    let summaries = unique
        .iter()
        .enumerate()
        .map(|(j, &method)| {
            let outcomes: Vec<MethodOutcome> = per_replication.iter().map(|o| o[j]).collect();
            MethodSummary::aggregate(method, &outcomes, oracle.length())
        })
        .collect();

    let empirical_oracle = scenario.mechanism().exact_response.is_none();
    Ok(SimulationReport {
        scenario: scenario.id,
        n: scenario.n,
        reps: scenario.reps,
        alpha: scenario.alpha,
        master_seed,
        bootstrap_draws: scenario.bootstrap_draws,
        oracle_draws: empirical_oracle.then_some(scenario.oracle_draws),
        oracle_upper: oracle.upper,
        methods: summaries,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Runs `f` on a dedicated pool of `threads` workers, or on the global pool
/// when `threads` is `None`.
pub fn with_thread_limit<T, F>(threads: Option<usize>, f: F) -> Result<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    match threads {
        None => Ok(f()),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(id: ScenarioId) -> ScenarioSpec {
        ScenarioSpec {
            n: 30,
            reps: 50,
            alpha: 0.05,
            oracle_draws: MIN_ORACLE_DRAWS,
            ..ScenarioSpec::new(id)
        }
    }

    #[test]
    fn example1_responses_are_positive() {
        let s = small(ScenarioId::Example1);
        for r in 0..20 {
            let (d, hold) = generate_replication(&s, SeedSpec::new(5, r)).unwrap();
            assert_eq!(d.n(), 30);
            assert!(d.responses().all(|y| y > 0.0));
            assert!(hold.y > 0.0);
        }
    }

    #[test]
    fn example3_second_feature_is_binary() {
        let s = small(ScenarioId::Example3);
        let (d, hold) = generate_replication(&s, SeedSpec::new(5, 1)).unwrap();
        assert_eq!(d.p(), 3);
        assert!(d
            .pairs()
            .iter()
            .chain(std::iter::once(&hold))
            .all(|z| z.x[1] == 0.0 || z.x[1] == 1.0));
        for z in d.pairs() {
            let expected_min = z.x[0] * z.x[0] + 3.0 * z.x[1] + 2.0 * z.x[2];
            assert!(z.y > expected_min);
        }
    }

    #[test]
    fn replication_is_deterministic() {
        let s = small(ScenarioId::Example1);
        let a = generate_replication(&s, SeedSpec::new(42, 7)).unwrap();
        let b = generate_replication(&s, SeedSpec::new(42, 7)).unwrap();
        assert_eq!(a, b);
        let c = generate_replication(&s, SeedSpec::new(42, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn example1_oracle_is_the_gamma_quantile() {
        let s = ScenarioSpec::new(ScenarioId::Example1);
        let oracle = oracle_interval(&s, 0).unwrap();
        let law = DistributionSpec::gamma(2.04, 2.5);
        assert!((law.cdf(oracle.upper) - 0.995).abs() < 1e-10);
        assert_eq!(oracle.method, IntervalMethod::Oracle);
    }

    #[test]
    fn oracle_is_monotone_in_alpha() {
        for id in [ScenarioId::Example1, ScenarioId::Example2, ScenarioId::Example3] {
            let mut s = small(id);
            s.alpha = 0.1;
            let loose = oracle_interval(&s, 3).unwrap().upper;
            s.alpha = 0.005;
            let tight = oracle_interval(&s, 3).unwrap().upper;
            assert!(tight >= loose, "{id}: {tight} < {loose}");
        }
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut s = small(ScenarioId::Example2);
        s.alpha = 1.5;
        assert!(s.validate().is_err());
        let mut s = small(ScenarioId::Example2);
        s.oracle_draws = 10;
        assert!(s.validate().is_err());
        let mut s = small(ScenarioId::Example1);
        s.oracle_draws = 10;
        assert!(s.validate().is_ok());
        let mut s = small(ScenarioId::Example1);
        s.reps = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn coverage_count_matches_indicators() {
        let s = small(ScenarioId::Example1);
        let methods = [Method::Conformal, Method::GlmBootstrap];
        let report = run_study(&s, &methods, 11).unwrap();
        for (j, &method) in methods.iter().enumerate() {
            let k = (0..s.reps as u64)
                .filter(|&r| run_replication(&s, &methods, 11, r).unwrap()[j].covered)
                .count();
            let summary = report.method(method).unwrap();
            assert_eq!(summary.covered, k);
            assert_eq!(summary.coverage_probability, k as f64 / s.reps as f64);
            assert!(summary.mean_length_ratio > 0.0);
        }
    }

    #[test]
    fn study_is_independent_of_thread_count() {
        let s = small(ScenarioId::Example2);
        let methods = [Method::Conformal, Method::GlmBootstrap];
        let one = with_thread_limit(Some(1), || run_study(&s, &methods, 9))
            .unwrap()
            .unwrap();
        let four = with_thread_limit(Some(4), || run_study(&s, &methods, 9))
            .unwrap()
            .unwrap();
        assert_eq!(one.methods, four.methods);
        assert_eq!(one.oracle_upper, four.oracle_upper);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("conformal".parse::<Method>().unwrap(), Method::Conformal);
        assert_eq!("glm".parse::<Method>().unwrap(), Method::GlmBootstrap);
        assert_eq!(
            " GLM_bootstrap ".parse::<Method>().unwrap(),
            Method::GlmBootstrap
        );
        assert!("forest".parse::<Method>().is_err());
    }

    #[test]
    fn validity_floor_value() {
        let floor = validity_floor(0.005, 2000);
        assert!((floor - (0.995 - 3.0 * (0.005f64 * 0.995 / 2000.0).sqrt())).abs() < 1e-15);
        assert!((0.990..0.991).contains(&floor));
    }
}
