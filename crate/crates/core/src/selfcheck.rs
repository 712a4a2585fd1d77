//! Built-in consistency checks: closed form against grid scan, and
//! uniformity of the conformal rank under exchangeable data.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::conformal::{
    conformal_order_index, grid_disagreements, grid_region, plausibility, uniform_grid,
    ClosedFormComputation, Dataset, FeatureSumMeasure, ObservationPair,
};
use crate::distributions::{lane, SeedSpec, StreamRng};
use crate::error::{Error, Result};
use crate::simulation::{generate_replication, ScenarioId, ScenarioSpec};

/// Levels cycled through by the grid suite.
pub const GRID_ALPHAS: [f64; 3] = [0.05, 0.2, 0.5];

/// One random dataset of the grid suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCase {
    pub case: usize,
    pub n: usize,
    pub p: usize,
    pub alpha: f64,
    /// Untruncated `W_(k)`, infinite when the region is unbounded.
    pub threshold: f64,
    pub grid_points: usize,
    /// Grid points misclassified away from the boundary.
    pub disagreements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridEquivalenceOutcome {
    pub cases: usize,
    pub step: f64,
    pub failures: Vec<GridCase>,
}

impl GridEquivalenceOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn random_case(case: usize, seed: u64) -> (Dataset, Vec<f64>, f64) {
    let mut rng = SeedSpec::new(seed, case as u64).rng_in_lane(lane::DATA);
    let n = rng.random_range(3..=12);
    let p = rng.random_range(1..=3);
    let row = |rng: &mut StreamRng| -> Vec<f64> {
        (0..p).map(|_| rng.random_range(0.0..2.0)).collect()
    };
    let pairs = (0..n)
        .map(|_| {
            let x = row(&mut rng);
            ObservationPair::new(x, rng.random_range(0.0..4.0))
        })
        .collect();
    let x_new = row(&mut rng);
    let dataset = Dataset::new(pairs).expect("non-empty, finite, rectangular");
    (dataset, x_new, GRID_ALPHAS[case % GRID_ALPHAS.len()])
}

/// Checks one case: the scanned region `{y : pl(y) > alpha}` over
/// `[min W - 1, max W + 1]` must coincide with `y < W_(k)` except at grid
/// points within one step of `W_(k)`.
pub fn check_grid_case(
    case: usize,
    dataset: &Dataset,
    x_new: &[f64],
    alpha: f64,
    step: f64,
) -> Result<GridCase> {
    let cf = ClosedFormComputation::new(dataset, x_new)?;
    let threshold = conformal_order_index(dataset.n(), alpha)
        .map_or(f64::INFINITY, |k| cf.order_statistic(k));
    let lo = cf.sorted[0] - 1.0;
    let hi = cf.sorted[cf.sorted.len() - 1] + 1.0;
    let grid = uniform_grid(lo, hi, step)?;
    let region = grid_region(dataset, x_new, alpha, &FeatureSumMeasure, &grid)?;
    // The region is closed at W_(k); a point exactly there is tolerated.
    let bad = grid_disagreements(&region, &grid, threshold, step);
    Ok(GridCase {
        case,
        n: dataset.n(),
        p: dataset.p(),
        alpha,
        threshold,
        grid_points: grid.len(),
        disagreements: bad.len(),
    })
}

/// Runs `cases` random datasets (`n` in 3..=12, `p` in 1..=3) in parallel.
pub fn grid_equivalence_suite(cases: usize, step: f64, seed: u64) -> Result<GridEquivalenceOutcome> {
    if cases == 0 {
        return Err(Error::Invalid("at least one case is required".into()));
    }
    let results: Vec<GridCase> = (0..cases)
        .into_par_iter()
        .map(|case| {
            let (dataset, x_new, alpha) = random_case(case, seed);
            check_grid_case(case, &dataset, &x_new, alpha, step)
        })
        .collect::<Result<_>>()?;
    Ok(GridEquivalenceOutcome {
        cases,
        step,
        failures: results.into_iter().filter(|c| c.disagreements > 0).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankUniformityOutcome {
    pub reps: usize,
    pub n: usize,
    /// `counts[j]` is how often the true response had `j + 1` conforming scores.
    pub counts: Vec<usize>,
    pub chi_square: f64,
    pub critical_value: f64,
    pub significance: f64,
}

impl RankUniformityOutcome {
    pub fn passed(&self) -> bool {
        self.chi_square <= self.critical_value
    }
}

/// Pearson chi-square statistic of `counts` against equal expected cells.
pub fn chi_square_uniform(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum()
}

/// Evaluates the plausibility of the true held-out response across `reps`
/// replications of a scenario. Under exchangeability the conforming count is
/// uniform on `1..=n + 1`; the suite tests that with a chi-square test at
/// `significance`.
pub fn rank_uniformity_suite(
    scenario: ScenarioId,
    n: usize,
    reps: usize,
    master_seed: u64,
    significance: f64,
) -> Result<RankUniformityOutcome> {
    if !(significance > 0.0 && significance < 1.0) {
        return Err(Error::InvalidProbability(significance));
    }
    let mut spec = ScenarioSpec::new(scenario);
    spec.n = n;
    spec.reps = reps;
    spec.validate()?;
    let ranks: Vec<usize> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let (training, holdout) = generate_replication(&spec, SeedSpec::new(master_seed, r))?;
            Ok(plausibility(&training, &holdout.x, holdout.y, &FeatureSumMeasure)?.conforming)
        })
        .collect::<Result<_>>()?;
    let mut counts = vec![0; n + 1];
    for rank in ranks {
        counts[rank - 1] += 1;
    }
    let df = n as f64;
    let critical_value = ChiSquared::new(df)
        .map_err(|e| Error::InvalidParameters(e.to_string()))?
        .inverse_cdf(1.0 - significance);
    Ok(RankUniformityOutcome {
        reps,
        n,
        chi_square: chi_square_uniform(&counts),
        counts,
        critical_value,
        significance,
    })
}
