//! Full conformal prediction for regression with a non-negative response.
//!
//! Two routes to the same region are provided:
//!
//! - the generic route: a [`NonconformityMeasure`], the leave-one-out
//!   [`plausibility`] function and a grid scan of `{y : pl(y) > alpha}`;
//! - the closed form for [`FeatureSumMeasure`], which reduces the region to
//!   `[0, W_(k))` with adjusted responses `W_i = Y_i + (S_new - S_i) / n`,
//!   where `S` is the sum of a row's features.
//!
//! The closed form runs in `O(n p + n log n)`. The grid scan costs
//! `O(G n^2)` and exists to cross-check it.

use std::cmp::Ordering;
use std::iter;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observation `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPair {
    pub x: Vec<f64>,
    pub y: f64,
}

impl ObservationPair {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        Self { x, y }
    }

    /// Sum of the feature coordinates.
    pub fn feature_sum(&self) -> f64 {
        self.x.iter().sum()
    }
}

/// An immutable, validated collection of observations sharing one feature
/// dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pairs: Vec<ObservationPair>,
    p: usize,
}

impl Dataset {
    /// Validates `n >= 1`, `p >= 1`, a common dimension and finite values.
    pub fn new(pairs: Vec<ObservationPair>) -> Result<Self> {
        let first = pairs.first().ok_or(Error::Empty("dataset"))?;
        let p = first.x.len();
        if p == 0 {
            return Err(Error::Empty("feature vector"));
        }
        for pair in &pairs {
            if pair.x.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: pair.x.len(),
                });
            }
            if !pair.y.is_finite() {
                return Err(Error::NonFinite("response"));
            }
            if pair.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("features"));
            }
        }
        Ok(Self { pairs, p })
    }

    /// Builds a dataset from row-wise features and matching responses.
    pub fn from_rows(features: Vec<Vec<f64>>, responses: Vec<f64>) -> Result<Self> {
        if features.len() != responses.len() {
            return Err(Error::Invalid(format!(
                "{} feature rows but {} responses",
                features.len(),
                responses.len()
            )));
        }
        Self::new(
            features
                .into_iter()
                .zip(responses)
                .map(|(x, y)| ObservationPair::new(x, y))
                .collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.pairs.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn pairs(&self) -> &[ObservationPair] {
        &self.pairs
    }

    pub fn responses(&self) -> impl Iterator<Item = f64> + '_ {
        self.pairs.iter().map(|z| z.y)
    }

    /// Checks that `x` is a finite feature vector of this dataset's dimension.
    pub fn check_features(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.p {
            return Err(Error::DimensionMismatch {
                expected: self.p,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("new feature vector"));
        }
        Ok(())
    }

    /// Splits off the last row: returns the first `n - 1` rows and the held-out pair.
    pub fn split_last(&self) -> Result<(Dataset, ObservationPair)> {
        if self.n() < 2 {
            return Err(Error::Invalid(
                "leave-last-out needs at least two rows".into(),
            ));
        }
        let (last, rest) = self.pairs.split_last().expect("n >= 2");
        Ok((
            Dataset {
                pairs: rest.to_vec(),
                p: self.p,
            },
            last.clone(),
        ))
    }
}

pub(crate) fn validate_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

/// Scores how strongly a provisional observation `z` disagrees with a bag.
///
/// Implementations must be deterministic and invariant to the order of the
/// bag.
pub trait NonconformityMeasure: Sync {
    fn score(&self, bag: &[&ObservationPair], z: &ObservationPair) -> Result<f64>;
}

/// The feature-sum measure
///
/// `M(B, z) = y - [ (sum_j x_j) / n + sum_i (y_i - (sum_j x_ij) / n) ]`
///
/// with `n = |B|`. Its conformal region is always an interval `[0, b)` with a
/// closed-form endpoint (see [`closed_form_interval`]).
#[derive(Debug, Clone, Copy, Default)]
pub struct FeatureSumMeasure;

impl NonconformityMeasure for FeatureSumMeasure {
    fn score(&self, bag: &[&ObservationPair], z: &ObservationPair) -> Result<f64> {
        feature_sum_score(bag, z)
    }
}

/// Evaluates [`FeatureSumMeasure`] directly.
///
/// The bag terms are summed in sorted order so that any permutation of the
/// bag yields a bitwise-identical score.
pub fn feature_sum_score(bag: &[&ObservationPair], z: &ObservationPair) -> Result<f64> {
    if bag.is_empty() {
        return Err(Error::Empty("bag"));
    }
    let p = z.x.len();
    let n = bag.len() as f64;
    let mut terms = Vec::with_capacity(bag.len());
    for member in bag {
        if member.x.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: member.x.len(),
            });
        }
        terms.push(member.y - member.feature_sum() / n);
    }
    terms.sort_unstable_by(f64::total_cmp);
    let bag_term: f64 = terms.iter().sum();
    Ok(z.y - (z.feature_sum() / n + bag_term))
}

/// Non-conformity scores of the augmented sample and the resulting plausibility.
#[derive(Debug, Clone, PartialEq)]
pub struct PlausibilityEvaluation {
    /// `mu_1, ..., mu_{n+1}`; the last entry belongs to the candidate.
    pub scores: Vec<f64>,
    /// `#{i : mu_i >= mu_{n+1}}`, always at least 1.
    pub conforming: usize,
    /// `conforming / (n + 1)`.
    pub plausibility: f64,
}

/// Plausibility of the candidate `(x_new, y_candidate)` given the dataset.
///
/// Each of the `n + 1` augmented observations is scored against the bag of
/// the other `n`. Ties count as conforming.
pub fn plausibility<M: NonconformityMeasure + ?Sized>(
    dataset: &Dataset,
    x_new: &[f64],
    y_candidate: f64,
    measure: &M,
) -> Result<PlausibilityEvaluation> {
    dataset.check_features(x_new)?;
    let candidate = ObservationPair::new(x_new.to_vec(), y_candidate);
    let augmented: Vec<&ObservationPair> = dataset
        .pairs()
        .iter()
        .chain(iter::once(&candidate))
        .collect();

    let mut bag: Vec<&ObservationPair> = Vec::with_capacity(dataset.n());
    let mut scores = Vec::with_capacity(augmented.len());
    for (i, z) in augmented.iter().enumerate() {
        bag.clear();
        bag.extend(
            augmented
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, other)| *other),
        );
        scores.push(measure.score(&bag, z)?);
    }

    let own = *scores.last().expect("n + 1 >= 2 scores");
    let conforming = scores.iter().filter(|&&s| s >= own).count();
    Ok(PlausibilityEvaluation {
        plausibility: conforming as f64 / augmented.len() as f64,
        conforming,
        scores,
    })
}

/// Evenly spaced grid `lo, lo + step, ...` up to and including `hi`.
pub fn uniform_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !lo.is_finite() || !hi.is_finite() || hi < lo {
        return Err(Error::Invalid(format!(
            "bad grid [{lo}, {hi}] with step {step}"
        )));
    }
    let count = ((hi - lo) / step).floor() as usize + 1;
    Ok((0..count).map(|i| lo + i as f64 * step).collect())
}

/// The grid points whose plausibility exceeds `alpha`.
///
/// A finite approximation of the conformal region, used to validate the
/// closed form.
pub fn grid_region<M: NonconformityMeasure + ?Sized>(
    dataset: &Dataset,
    x_new: &[f64],
    alpha: f64,
    measure: &M,
    grid: &[f64],
) -> Result<Vec<f64>> {
    validate_alpha(alpha)?;
    dataset.check_features(x_new)?;
    if grid.is_empty() {
        return Err(Error::Empty("grid"));
    }
    if let Some(i) = grid.iter().position(|v| v.is_nan()) {
        return Err(Error::UnsortedGrid(i));
    }
    if let Some(i) = grid.windows(2).position(|w| w[1] < w[0]) {
        return Err(Error::UnsortedGrid(i + 1));
    }
    let mut region = Vec::new();
    for &y in grid {
        if plausibility(dataset, x_new, y, measure)?.plausibility > alpha {
            region.push(y);
        }
    }
    Ok(region)
}

/// How an interval was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    ClosedForm,
    GridScan,
    GlmBootstrap,
    Oracle,
}

/// Pathologies surfaced alongside an interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalWarning {
    /// The order statistic was not positive; the interval is `[0, 0)`.
    NonPositiveUpper,
    /// The GLM fit failed or did not converge; the interval is `[0, inf)`.
    FitFailed,
    /// The fitted GLM mean at the new point was not positive; `[0, inf)`.
    NonPositiveFittedMean,
}

/// A one-sided prediction interval `[lower, upper)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionInterval {
    pub lower: f64,
    /// May be `f64::INFINITY`.
    pub upper: f64,
    /// Nominal level `1 - alpha`.
    pub level: f64,
    pub method: IntervalMethod,
    /// Order-statistic index `k` (1-based) for closed-form intervals.
    pub k_index: Option<usize>,
    pub warning: Option<IntervalWarning>,
}

impl PredictionInterval {
    pub(crate) fn one_sided(upper: f64, level: f64, method: IntervalMethod) -> Self {
        Self {
            lower: 0.0,
            upper,
            level,
            method,
            k_index: None,
            warning: None,
        }
    }

    pub(crate) fn unbounded(level: f64, method: IntervalMethod, warning: IntervalWarning) -> Self {
        Self {
            warning: Some(warning),
            ..Self::one_sided(f64::INFINITY, level, method)
        }
    }

    pub fn contains(&self, y: f64) -> bool {
        coverage_indicator(self, y)
    }

    /// `upper - lower`; infinite for unbounded intervals.
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn is_bounded(&self) -> bool {
        self.upper.is_finite()
    }
}

/// True iff `lower <= y < upper`.
pub fn coverage_indicator(interval: &PredictionInterval, y_actual: f64) -> bool {
    interval.lower <= y_actual && y_actual < interval.upper
}

/// Smallest `m` with `m / (n + 1) > alpha`, evaluated in the same floating
/// arithmetic as [`plausibility`].
fn required_conforming(n: usize, alpha: f64) -> usize {
    let total = (n + 1) as f64;
    let exceeds = |m: usize| m as f64 / total > alpha;
    let mut m = ((alpha * total).floor() as usize + 1).clamp(1, n + 1);
    while m > 1 && exceeds(m - 1) {
        m -= 1;
    }
    while m < n + 1 && !exceeds(m) {
        m += 1;
    }
    m
}

/// Order-statistic index `k` of the exact conformal region `y <= W_(k)`.
///
/// Equals `n + 1 - floor((n + 1) alpha)`. Returns `None` when
/// `alpha < 1 / (n + 1)`: every candidate is then plausible and the region
/// is unbounded.
pub fn conformal_order_index(n: usize, alpha: f64) -> Option<usize> {
    let m = required_conforming(n, alpha);
    (m > 1).then(|| n + 2 - m)
}

/// The commonly quoted index `min{n, floor((n + 1)(1 - alpha) + 1)}`.
///
/// It agrees with [`conformal_order_index`] whenever `(n + 1) alpha` is not
/// an integer and `alpha >= 1 / (n + 1)`. When `(n + 1) alpha` is an integer
/// it is one larger than the exact index, and for `alpha < 1 / (n + 1)` it
/// truncates an unbounded region at the sample maximum.
pub fn order_index_floor_formula(n: usize, alpha: f64) -> usize {
    let k = ((n + 1) as f64 * (1.0 - alpha) + 1.0).floor() as usize;
    k.min(n)
}

/// Intermediate quantities of the closed-form interval for one new point.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormComputation {
    /// `S_i` for the training rows.
    pub row_sums: Vec<f64>,
    /// `S_{n+1}`.
    pub new_row_sum: f64,
    /// `W_i = Y_i + (S_{n+1} - S_i) / n`, in dataset order.
    pub adjusted: Vec<f64>,
    /// `W_(1) <= ... <= W_(n)`.
    pub sorted: Vec<f64>,
}

impl ClosedFormComputation {
    pub fn new(dataset: &Dataset, x_new: &[f64]) -> Result<Self> {
        dataset.check_features(x_new)?;
        let n = dataset.n() as f64;
        let new_row_sum: f64 = x_new.iter().sum();
        let row_sums: Vec<f64> = dataset.pairs().iter().map(|z| z.feature_sum()).collect();
        let adjusted: Vec<f64> = dataset
            .pairs()
            .iter()
            .zip(&row_sums)
            .map(|(z, s)| z.y + (new_row_sum - s) / n)
            .collect();
        let mut sorted = adjusted.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            row_sums,
            new_row_sum,
            adjusted,
            sorted,
        })
    }

    /// The `k`-th smallest adjusted response (1-based), before clamping.
    pub fn order_statistic(&self, k: usize) -> f64 {
        self.sorted[k - 1]
    }

    /// The conformal interval at level `1 - alpha`.
    pub fn interval(&self, alpha: f64) -> Result<PredictionInterval> {
        validate_alpha(alpha)?;
        let level = 1.0 - alpha;
        let Some(k) = conformal_order_index(self.sorted.len(), alpha) else {
            return Ok(PredictionInterval::one_sided(
                f64::INFINITY,
                level,
                IntervalMethod::ClosedForm,
            ));
        };
        let raw = self.order_statistic(k);
        let mut interval = PredictionInterval::one_sided(raw, level, IntervalMethod::ClosedForm);
        interval.k_index = Some(k);
        if raw <= 0.0 {
            interval.upper = 0.0;
            interval.warning = Some(IntervalWarning::NonPositiveUpper);
        }
        Ok(interval)
    }
}

/// The conformal interval `[0, W_(k))` for the feature-sum measure.
pub fn closed_form_interval(
    dataset: &Dataset,
    x_new: &[f64],
    alpha: f64,
) -> Result<PredictionInterval> {
    validate_alpha(alpha)?;
    ClosedFormComputation::new(dataset, x_new)?.interval(alpha)
}

/// Compares a grid-scan region with the closed-form interval.
///
/// Returns the grid points on which the two disagree (membership in the scan
/// region versus `y < upper`) that lie farther than `tolerance` from the
/// closed-form upper bound.
pub fn grid_disagreements(region: &[f64], grid: &[f64], upper: f64, tolerance: f64) -> Vec<f64> {
    let mut members = region.iter().peekable();
    let mut out = Vec::new();
    for &y in grid {
        let in_region = match members.peek() {
            Some(&&r) if r.total_cmp(&y) == Ordering::Equal => {
                members.next();
                true
            }
            _ => false,
        };
        let in_interval = y < upper;
        if in_region != in_interval && (y - upper).abs() > tolerance {
            out.push(y);
        }
    }
    out
}
