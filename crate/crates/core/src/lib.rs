//! Finite-sample valid, one-sided conformal prediction intervals for
//! non-negative regression responses such as insurance claim amounts.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conformal;
pub mod distributions;
pub mod error;
pub mod glm;
pub mod io;
pub mod selfcheck;
pub mod simulation;

pub use conformal::{
    closed_form_interval, coverage_indicator, feature_sum_score, grid_region, plausibility,
    ClosedFormComputation, Dataset, FeatureSumMeasure, IntervalMethod, IntervalWarning,
    NonconformityMeasure, ObservationPair, PlausibilityEvaluation, PredictionInterval,
};
pub use distributions::{empirical_quantile, sample, DistributionSpec, SeedSpec};
pub use error::{Error, Result};
pub use io::{ingest_csv, ClaimsTableSchema};
pub use simulation::{run_study, Method, ScenarioId, ScenarioSpec, SimulationReport};
