//! Samplers and quantile functions for the claim-severity families used by
//! the simulation scenarios, plus the seeding contract.
//!
//! Every random draw in the crate flows from a [`SeedSpec`]: a master seed
//! selects the ChaCha8 key and the stream id selects one of its 2^64
//! independent streams. A replication therefore produces the same numbers
//! whatever thread runs it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Gamma, LogNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::gamma_lr;

use crate::error::{Error, Result};

/// The generator behind every stream.
pub type StreamRng = ChaCha8Rng;

/// Independent key lanes under one master seed.
pub mod lane {
    /// Training and hold-out data; also [`super::sample`].
    pub const DATA: u64 = 0;
    /// Predictive draws of the GLM bootstrap.
    pub const BOOTSTRAP: u64 = 1;
    /// Monte Carlo estimation of oracle quantiles.
    pub const ORACLE: u64 = 2;
}

/// Identifies one reproducible random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self {
            master_seed,
            stream_id,
        }
    }

    /// The stream in the data lane.
    pub fn rng(&self) -> StreamRng {
        self.rng_in_lane(lane::DATA)
    }

    /// A stream keyed by `(master_seed, lane)` and positioned at `stream_id`.
    ///
    /// Lanes keep unrelated consumers (data generation, bootstrap draws,
    /// oracle estimation) from sharing numbers under one stream id.
    pub fn rng_in_lane(&self, lane: u64) -> StreamRng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.master_seed.to_le_bytes());
        key[8..16].copy_from_slice(&lane.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// A parametric distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionSpec {
    /// Density `b^a / Gamma(a) x^(a-1) e^(-b x)` on `x > 0`.
    Gamma { shape: f64, rate: f64 },
    /// Type II Pareto (Lomax), density `eta beta^eta / (x + beta)^(eta + 1)` on `x > 0`.
    Pareto2 { shape: f64, scale: f64 },
    /// Law of `exp(mu + sigma Z)` with `Z` standard normal.
    LogNormal { mu: f64, sigma: f64 },
    Bernoulli { p: f64 },
    /// `shift + factor * base` with `factor > 0`.
    Affine {
        base: Box<DistributionSpec>,
        factor: f64,
        shift: f64,
    },
}

fn positive(value: f64, what: &str) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameters(format!(
            "{what} must be positive and finite, got {value}"
        )))
    }
}

impl DistributionSpec {
    pub fn gamma(shape: f64, rate: f64) -> Self {
        Self::Gamma { shape, rate }
    }

    pub fn pareto2(shape: f64, scale: f64) -> Self {
        Self::Pareto2 { shape, scale }
    }

    pub fn lognormal(mu: f64, sigma: f64) -> Self {
        Self::LogNormal { mu, sigma }
    }

    pub fn bernoulli(p: f64) -> Self {
        Self::Bernoulli { p }
    }

    pub fn affine(base: DistributionSpec, factor: f64, shift: f64) -> Self {
        Self::Affine {
            base: Box::new(base),
            factor,
            shift,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Gamma { shape, rate } => {
                positive(*shape, "gamma shape")?;
                positive(*rate, "gamma rate")
            }
            Self::Pareto2 { shape, scale } => {
                positive(*shape, "pareto shape")?;
                positive(*scale, "pareto scale")
            }
            Self::LogNormal { mu, sigma } => {
                if !mu.is_finite() {
                    return Err(Error::InvalidParameters(format!(
                        "lognormal mu must be finite, got {mu}"
                    )));
                }
                positive(*sigma, "lognormal sigma")
            }
            Self::Bernoulli { p } => {
                if *p > 0.0 && *p < 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParameters(format!(
                        "bernoulli p must lie in (0, 1), got {p}"
                    )))
                }
            }
            Self::Affine {
                base,
                factor,
                shift,
            } => {
                positive(*factor, "affine factor")?;
                if !shift.is_finite() {
                    return Err(Error::InvalidParameters("affine shift must be finite".into()));
                }
                base.validate()
            }
        }
    }

    /// Analytic mean; infinite where it does not exist.
    pub fn mean(&self) -> f64 {
        match self {
            Self::Gamma { shape, rate } => shape / rate,
            Self::Pareto2 { shape, scale } if *shape > 1.0 => scale / (shape - 1.0),
            Self::Pareto2 { .. } => f64::INFINITY,
            Self::LogNormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
            Self::Bernoulli { p } => *p,
            Self::Affine {
                base,
                factor,
                shift,
            } => shift + factor * base.mean(),
        }
    }

    /// Cumulative distribution function.
    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            Self::Gamma { shape, rate } => {
                if x <= 0.0 {
                    0.0
                } else if x == f64::INFINITY {
                    1.0
                } else {
                    gamma_lr(*shape, rate * x)
                }
            }
            Self::Pareto2 { shape, scale } => {
                if x <= 0.0 {
                    0.0
                } else {
                    1.0 - (scale / (x + scale)).powf(*shape)
                }
            }
            Self::LogNormal { mu, sigma } => {
                if x <= 0.0 {
                    0.0
                } else {
                    standard_normal().cdf((x.ln() - mu) / sigma)
                }
            }
            Self::Bernoulli { p } => {
                if x < 0.0 {
                    0.0
                } else if x < 1.0 {
                    1.0 - p
                } else {
                    1.0
                }
            }
            Self::Affine {
                base,
                factor,
                shift,
            } => base.cdf((x - shift) / factor),
        }
    }

    /// Inverse CDF.
    ///
    /// Closed forms for Pareto II and lognormal; bracketed bisection on the
    /// regularized incomplete gamma function for the gamma family.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::InvalidProbability(q));
        }
        self.validate()?;
        match self {
            Self::Gamma { .. } => Ok(self.invert_cdf(q)),
            Self::Pareto2 { shape, scale } => Ok(scale * ((1.0 - q).powf(-1.0 / shape) - 1.0)),
            Self::LogNormal { mu, sigma } => {
                Ok((mu + sigma * standard_normal().inverse_cdf(q)).exp())
            }
            Self::Bernoulli { .. } => Err(Error::NoQuantile("bernoulli")),
            Self::Affine {
                base,
                factor,
                shift,
            } => Ok(shift + factor * base.quantile(q)?),
        }
    }

    // Bisection on ln x, so tiny quantiles of small-shape laws keep full
    // relative precision.
    fn invert_cdf(&self, q: f64) -> f64 {
        const MAX_ITER: usize = 200;
        const LOG_TOL: f64 = 1e-14;

        let mut hi = self.mean().max(1.0);
        while self.cdf(hi) < q && hi < f64::MAX / 16.0 {
            hi *= 16.0;
        }
        let mut lo = hi / 16.0;
        while self.cdf(lo) >= q && lo > f64::MIN_POSITIVE * 1e3 {
            hi = lo;
            lo /= 1e3;
        }
        let (mut log_lo, mut log_hi) = (lo.ln(), hi.ln());
        for _ in 0..MAX_ITER {
            let mid = 0.5 * (log_lo + log_hi);
            if self.cdf(mid.exp()) < q {
                log_lo = mid;
            } else {
                log_hi = mid;
            }
            if log_hi - log_lo <= LOG_TOL {
                break;
            }
        }
        (0.5 * (log_lo + log_hi)).exp()
    }

    /// A reusable sampler for this distribution.
    pub fn sampler(&self) -> Result<Sampler> {
        self.validate()?;
        Ok(match self {
            Self::Gamma { shape, rate } => Sampler::Gamma(
                Gamma::new(*shape, 1.0 / rate)
                    .map_err(|e| Error::InvalidParameters(e.to_string()))?,
            ),
            Self::Pareto2 { shape, scale } => Sampler::Pareto2 {
                inv_shape: 1.0 / shape,
                scale: *scale,
            },
            Self::LogNormal { mu, sigma } => Sampler::LogNormal(
                LogNormal::new(*mu, *sigma).map_err(|e| Error::InvalidParameters(e.to_string()))?,
            ),
            Self::Bernoulli { p } => Sampler::Bernoulli(
                Bernoulli::new(*p).map_err(|e| Error::InvalidParameters(e.to_string()))?,
            ),
            Self::Affine {
                base,
                factor,
                shift,
            } => Sampler::Affine {
                base: Box::new(base.sampler()?),
                factor: *factor,
                shift: *shift,
            },
        })
    }
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Pre-built sampler; see [`DistributionSpec::sampler`].
#[derive(Debug, Clone)]
pub enum Sampler {
    Gamma(Gamma<f64>),
    Pareto2 { inv_shape: f64, scale: f64 },
    LogNormal(LogNormal<f64>),
    Bernoulli(Bernoulli),
    Affine {
        base: Box<Sampler>,
        factor: f64,
        shift: f64,
    },
}

impl Distribution<f64> for Sampler {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Sampler::Gamma(g) => g.sample(rng),
            Sampler::Pareto2 { inv_shape, scale } => {
                // 1 - U lies in (0, 1]
                let u: f64 = rng.random();
                scale * ((1.0 - u).powf(-inv_shape) - 1.0)
            }
            Sampler::LogNormal(l) => l.sample(rng),
            Sampler::Bernoulli(b) => {
                if b.sample(rng) {
                    1.0
                } else {
                    0.0
                }
            }
            Sampler::Affine {
                base,
                factor,
                shift,
            } => shift + factor * base.sample(rng),
        }
    }
}

/// `count` independent draws from the stream named by `seed`.
pub fn sample(spec: &DistributionSpec, seed: SeedSpec, count: usize) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::Invalid("sample count must be at least 1".into()));
    }
    let sampler = spec.sampler()?;
    let mut rng = seed.rng();
    Ok((0..count).map(|_| sampler.sample(&mut rng)).collect())
}

/// The `ceil(q m)`-th smallest of `m` values.
pub fn empirical_quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("values"));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidProbability(q));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("values"));
    }
    let m = values.len();
    let rank = ((q * m as f64).ceil() as usize).clamp(1, m);
    let mut scratch = values.to_vec();
    let (_, nth, _) = scratch.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*nth)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MILLION: usize = 1_000_000;

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    fn ln_gamma_lanczos(x: f64) -> f64 {
        const G: f64 = 7.0;
        const C: [f64; 9] = [
            0.999_999_999_999_809_9,
            676.520_368_121_885_1,
            -1_259.139_216_722_402_8,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507_343_278_686_905,
            -0.138_571_095_265_720_12,
            9.984_369_578_019_572e-6,
            1.505_632_735_149_311_6e-7,
        ];
        let x = x - 1.0;
        let mut acc = C[0];
        for (i, c) in C.iter().enumerate().skip(1) {
            acc += c / (x + i as f64);
        }
        let t = x + G + 0.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
    }

    // Regularized lower incomplete gamma: power series below a + 1,
    // Lentz continued fraction for the upper tail above.
    fn gamma_p_oracle(a: f64, x: f64) -> f64 {
        let prefactor = (a * x.ln() - x - ln_gamma_lanczos(a)).exp();
        if x < a + 1.0 {
            let mut term = 1.0 / a;
            let mut sum = term;
            let mut k = a;
            for _ in 0..10_000 {
                k += 1.0;
                term *= x / k;
                sum += term;
                if term.abs() < sum.abs() * 1e-17 {
                    break;
                }
            }
            sum * prefactor
        } else {
            let tiny = 1e-300;
            let mut b = x + 1.0 - a;
            let mut c = 1.0 / tiny;
            let mut d = 1.0 / b;
            let mut h = d;
            for i in 1..10_000 {
                let an = -(i as f64) * (i as f64 - a);
                b += 2.0;
                d = an * d + b;
                if d.abs() < tiny {
                    d = tiny;
                }
                c = b + an / c;
                if c.abs() < tiny {
                    c = tiny;
                }
                d = 1.0 / d;
                let delta = d * c;
                h *= delta;
                if (delta - 1.0).abs() < 1e-16 {
                    break;
                }
            }
            1.0 - prefactor * h
        }
    }

    #[test]
    fn seed_streams_are_reproducible_and_distinct() {
        let spec = DistributionSpec::gamma(2.0, 2.5);
        let a = sample(&spec, SeedSpec::new(7, 3), 50).unwrap();
        let b = sample(&spec, SeedSpec::new(7, 3), 50).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample(&spec, SeedSpec::new(7, 4), 50).unwrap());
        assert_ne!(a, sample(&spec, SeedSpec::new(8, 3), 50).unwrap());
        let lane0: u64 = SeedSpec::new(7, 3).rng_in_lane(0).random();
        let lane1: u64 = SeedSpec::new(7, 3).rng_in_lane(1).random();
        assert_ne!(lane0, lane1);
    }

    #[test]
    fn gamma_mean_moment() {
        let xs = sample(&DistributionSpec::gamma(2.0, 2.5), SeedSpec::new(1, 0), MILLION).unwrap();
        let (mean, se) = mean_and_se(&xs);
        assert!((mean - 0.8).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn small_shape_gamma_moments() {
        let spec = DistributionSpec::gamma(0.04, 2.5);
        let xs = sample(&spec, SeedSpec::new(2, 0), MILLION).unwrap();
        assert!(xs.iter().all(|&x| x >= 0.0));
        let (mean, se) = mean_and_se(&xs);
        assert!((mean - 0.016).abs() < 3.0 * se, "mean {mean}, se {se}");
        let var = xs.iter().map(|x| (x - 0.016).powi(2)).sum::<f64>() / xs.len() as f64;
        // Var = a / b^2 = 0.0064
        assert!((var - 0.0064).abs() / 0.0064 < 0.05, "var {var}");
    }

    #[test]
    fn bernoulli_mean_moment() {
        let xs = sample(&DistributionSpec::bernoulli(1.0 / 3.0), SeedSpec::new(3, 0), MILLION).unwrap();
        assert!(xs.iter().all(|&x| x == 0.0 || x == 1.0));
        let (mean, se) = mean_and_se(&xs);
        assert!((mean - 1.0 / 3.0).abs() < 3.0 * se);
    }

    #[test]
    fn pareto_mean_moment_and_density_integral() {
        let spec = DistributionSpec::pareto2(3.0, 10.0);
        // Mean by numeric integration of x h(x) with x = t / (1 - t), Simpson.
        let (eta, beta) = (3.0_f64, 10.0_f64);
        let integrand = |t: f64| {
            if t >= 1.0 {
                return 0.0;
            }
            let x = t / (1.0 - t);
            let jac = 1.0 / (1.0 - t).powi(2);
            x * eta * beta.powf(eta) / (x + beta).powf(eta + 1.0) * jac
        };
        let m = 200_000;
        let h = 1.0 / m as f64;
        let mut acc = integrand(0.0) + integrand(1.0);
        for i in 1..m {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * integrand(i as f64 * h);
        }
        let integral = acc * h / 3.0;
        assert!((integral - 5.0).abs() < 1e-6, "integral {integral}");
        assert_eq!(spec.mean(), 5.0);

        let xs = sample(&spec, SeedSpec::new(4, 0), MILLION).unwrap();
        let (mean, se) = mean_and_se(&xs);
        assert!((mean - 5.0).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn closed_form_quantiles() {
        let p = DistributionSpec::pareto2(3.0, 10.0).quantile(0.5).unwrap();
        assert!((p - 10.0 * (2f64.powf(1.0 / 3.0) - 1.0)).abs() < 1e-12);
        assert!((p - 2.5992).abs() < 1e-4);
        assert!((DistributionSpec::pareto2(3.0, 10.0).cdf(p) - 0.5).abs() < 1e-12);
        let l = DistributionSpec::lognormal(1.0, 0.5).quantile(0.5).unwrap();
        assert!((l - std::f64::consts::E).abs() < 1e-9);
    }

    #[test]
    fn gamma_quantile_matches_independent_cdf() {
        let spec = DistributionSpec::gamma(2.04, 2.5);
        let v = spec.quantile(0.995).unwrap();
        assert!((gamma_p_oracle(2.04, 2.5 * v) - 0.995).abs() < 1e-10, "v = {v}");
        for &(a, b) in &[(0.04, 2.5), (2.0, 4.0), (2.0, 2.5), (37.5, 0.3)] {
            for &q in &[0.01, 0.3, 0.9, 0.999] {
                let v = DistributionSpec::gamma(a, b).quantile(q).unwrap();
                let p = gamma_p_oracle(a, b * v);
                assert!((p - q).abs() < 1e-9, "a {a} b {b} q {q}: P = {p}");
            }
        }
    }

    #[test]
    fn cdf_round_trip() {
        let specs = [
            DistributionSpec::gamma(2.04, 2.5),
            DistributionSpec::gamma(0.04, 2.5),
            DistributionSpec::pareto2(1.5, 4.0),
            DistributionSpec::pareto2(3.0, 10.0),
            DistributionSpec::lognormal(1.0, 0.5),
            DistributionSpec::affine(DistributionSpec::lognormal(1.0, 0.5), 2.0, 1.0),
        ];
        for spec in &specs {
            for &q in &[0.01, 0.1, 0.5, 0.9, 0.995] {
                let x = spec.quantile(q).unwrap();
                assert!((spec.cdf(x) - q).abs() < 1e-8, "{spec:?} q {q}");
            }
        }
    }

    #[test]
    fn quantile_errors() {
        let g = DistributionSpec::gamma(2.0, 1.0);
        for q in [0.0, 1.0, -1.0, f64::NAN] {
            assert!(matches!(g.quantile(q), Err(Error::InvalidProbability(_))));
        }
        assert!(matches!(
            DistributionSpec::bernoulli(0.5).quantile(0.5),
            Err(Error::NoQuantile(_))
        ));
        assert!(DistributionSpec::gamma(-1.0, 1.0).quantile(0.5).is_err());
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        for spec in [
            DistributionSpec::gamma(0.0, 1.0),
            DistributionSpec::gamma(1.0, -2.0),
            DistributionSpec::pareto2(1.0, 0.0),
            DistributionSpec::lognormal(f64::NAN, 1.0),
            DistributionSpec::lognormal(0.0, 0.0),
            DistributionSpec::bernoulli(1.0),
            DistributionSpec::affine(DistributionSpec::gamma(1.0, 1.0), 0.0, 0.0),
        ] {
            assert!(sample(&spec, SeedSpec::new(0, 0), 1).is_err(), "{spec:?}");
        }
        assert!(sample(&DistributionSpec::gamma(1.0, 1.0), SeedSpec::new(0, 0), 0).is_err());
    }

    #[test]
    fn empirical_quantile_order_statistic() {
        let v = [5.0, 3.0, 1.0, 4.0, 2.0];
        assert_eq!(empirical_quantile(&v, 0.5).unwrap(), 3.0);
        assert_eq!(empirical_quantile(&v, 0.995).unwrap(), 5.0);
        assert_eq!(empirical_quantile(&v, 0.2).unwrap(), 1.0);
        assert!(empirical_quantile(&[], 0.5).is_err());
        let draws: Vec<f64> = (1..=500).map(f64::from).collect();
        assert_eq!(empirical_quantile(&draws, 0.995).unwrap(), 498.0);
    }

    #[test]
    fn empirical_quantile_tracks_gamma_quantile() {
        let spec = DistributionSpec::gamma(2.04, 2.5);
        let xs = sample(&spec, SeedSpec::new(5, 0), MILLION).unwrap();
        let emp = empirical_quantile(&xs, 0.995).unwrap();
        let exact = spec.quantile(0.995).unwrap();
        assert!((emp - exact).abs() / exact < 0.02, "{emp} vs {exact}");
    }

    #[test]
    fn gamma_closure_through_the_sampler() {
        let x = sample(&DistributionSpec::gamma(2.0, 2.5), SeedSpec::new(6, 0), MILLION).unwrap();
        let e = sample(&DistributionSpec::gamma(0.04, 2.5), SeedSpec::new(6, 1), MILLION).unwrap();
        let y: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a + b).collect();
        let emp = empirical_quantile(&y, 0.995).unwrap();
        let exact = DistributionSpec::gamma(2.04, 2.5).quantile(0.995).unwrap();
        // Binomial standard error of the 99.5% order statistic, mapped through the density.
        let q_se = (0.995 * 0.005 / MILLION as f64).sqrt();
        let spec = DistributionSpec::gamma(2.04, 2.5);
        let density = (spec.cdf(exact + 1e-4) - spec.cdf(exact - 1e-4)) / 2e-4;
        assert!((emp - exact).abs() < 4.0 * q_se / density, "{emp} vs {exact}");
    }
}
