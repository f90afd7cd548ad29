//! Sensor-noise model and data-driven support estimation.
//!
//! Measurements of the relative ball position are corrupted by additive
//! per-axis noise drawn from a normal distribution truncated at three
//! standard deviations. The true support is therefore a box. From a batch of
//! calibration samples, [`fit_confidence_support`] builds a box that contains
//! the true support with probability at least `1 - epsilon` over the sampling
//! of the batch, by combining a Student-t interval for the mean and a
//! chi-square interval for the standard deviation on each axis (Bonferroni
//! split of `epsilon` across the four intervals).
//!
//! The interval machinery treats the samples as normal; the three-sigma
//! truncation only shifts the standard deviation by a known factor of about
//! 1.3%, which [`trunc_std_ratio`] removes so the fitted box converges to the
//! true support as the batch grows instead of to a slightly deflated copy.

use crate::sets::Box2;
use nalgebra::Vector2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

/// Truncation half-width in standard deviations.
pub const TRUNC_MULTIPLIER: f64 = 3.0;

/// Fewest samples accepted by the support fit.
pub const MIN_SAMPLES: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("support fit needs at least {MIN_SAMPLES} samples, got {0}")]
    InsufficientSamples(usize),
    #[error("epsilon must lie in (0, 1), got {0}")]
    InvalidEpsilon(f64),
    #[error("sigma must be non-negative, got {0}")]
    InvalidSigma(f64),
}

/// One noise axis: normal with mean `mu` and deviation `sigma`, truncated to
/// `mu ± trunc * sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncNormalAxis {
    pub mu: f64,
    pub sigma: f64,
    #[serde(default = "default_trunc")]
    pub trunc: f64,
}

fn default_trunc() -> f64 {
    TRUNC_MULTIPLIER
}

impl TruncNormalAxis {
    pub fn new(mu: f64, sigma: f64) -> Result<Self, NoiseError> {
        if !(sigma >= 0.0) {
            return Err(NoiseError::InvalidSigma(sigma));
        }
        Ok(Self { mu, sigma, trunc: TRUNC_MULTIPLIER })
    }

    pub fn support(&self) -> (f64, f64) {
        (self.mu - self.trunc * self.sigma, self.mu + self.trunc * self.sigma)
    }

    /// Inverse-CDF draw restricted to the truncated interval.
    pub fn draw(&self, rng: &mut impl Rng) -> f64 {
        if self.sigma == 0.0 {
            return self.mu;
        }
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        let lo = std.cdf(-self.trunc);
        let hi = std.cdf(self.trunc);
        let u = rng.gen_range(lo..hi);
        self.mu + self.sigma * std.inverse_cdf(u)
    }
}

/// Independent two-axis noise model; the true support is the product box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub axes: [TruncNormalAxis; 2],
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            axes: [
                TruncNormalAxis { mu: 0.0, sigma: 0.004, trunc: TRUNC_MULTIPLIER },
                TruncNormalAxis { mu: 0.0, sigma: 0.006, trunc: TRUNC_MULTIPLIER },
            ],
        }
    }
}

impl NoiseModel {
    pub fn new(mu: Vector2<f64>, sigma: Vector2<f64>) -> Result<Self, NoiseError> {
        Ok(Self {
            axes: [
                TruncNormalAxis::new(mu.x, sigma.x)?,
                TruncNormalAxis::new(mu.y, sigma.y)?,
            ],
        })
    }

    /// True support box.
    pub fn support(&self) -> Box2 {
        let (lx, hx) = self.axes[0].support();
        let (lz, hz) = self.axes[1].support();
        Box2::new(Vector2::new(lx, lz), Vector2::new(hx, hz))
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Vector2<f64> {
        Vector2::new(self.axes[0].draw(rng), self.axes[1].draw(rng))
    }
}

/// Ratio of the truncated-normal standard deviation to the parent sigma,
/// for truncation at `trunc` sigmas: `sqrt(1 - 2 t phi(t) / (2 Phi(t) - 1))`.
pub fn trunc_std_ratio(trunc: f64) -> f64 {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let phi = (-0.5 * trunc * trunc).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let z = 2.0 * std.cdf(trunc) - 1.0;
    (1.0 - 2.0 * trunc * phi / z).sqrt()
}

/// Per-axis parameter confidence intervals from one fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisCis {
    pub mu: (f64, f64),
    pub sigma: (f64, f64),
}

/// Data-driven noise support estimate: a box that contains the true support
/// with probability at least `1 - epsilon` over the calibration draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSupport {
    pub n: usize,
    pub epsilon: f64,
    pub support: Box2,
    pub param_cis: [AxisCis; 2],
}

/// Draw `count` noise vectors reproducibly from `seed`.
pub fn sample_noise(model: &NoiseModel, seed: u64, count: usize) -> Vec<Vector2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| model.draw(&mut rng)).collect()
}

/// Fit the confidence support from calibration samples.
///
/// Each axis gets a Student-t interval for the mean and a chi-square interval
/// for sigma, both at level `1 - epsilon/4`, and contributes the interval
/// `[mu_lo - 3 sigma_hi, mu_hi + 3 sigma_hi]`. A union bound over the four
/// intervals gives the `1 - epsilon` support guarantee.
pub fn fit_confidence_support(
    samples: &[Vector2<f64>],
    epsilon: f64,
) -> Result<ConfidenceSupport, NoiseError> {
    let n = samples.len();
    if n < MIN_SAMPLES {
        return Err(NoiseError::InsufficientSamples(n));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(NoiseError::InvalidEpsilon(epsilon));
    }
    let dof = (n - 1) as f64;
    // Each of the four intervals may fail with probability epsilon/4, so the
    // two-sided quantiles sit at epsilon/8.
    let tail = epsilon / 8.0;
    let t_quant = StudentsT::new(0.0, 1.0, dof)
        .expect("valid dof")
        .inverse_cdf(1.0 - tail);
    let chi = ChiSquared::new(dof).expect("valid dof");
    let chi_lo = chi.inverse_cdf(tail);
    let chi_hi = chi.inverse_cdf(1.0 - tail);
    let ratio = trunc_std_ratio(TRUNC_MULTIPLIER);

    let mut lo = Vector2::zeros();
    let mut hi = Vector2::zeros();
    let mut cis = [AxisCis { mu: (0.0, 0.0), sigma: (0.0, 0.0) }; 2];
    for axis in 0..2 {
        let mean = samples.iter().map(|s| s[axis]).sum::<f64>() / n as f64;
        let ss = samples.iter().map(|s| (s[axis] - mean).powi(2)).sum::<f64>();
        // Sample deviation, de-biased for the three-sigma truncation.
        let s = (ss / dof).sqrt() / ratio;
        let mu_ci = (mean - t_quant * s / (n as f64).sqrt(), mean + t_quant * s / (n as f64).sqrt());
        let sigma_ci = (s * (dof / chi_hi).sqrt(), s * (dof / chi_lo).sqrt());
        cis[axis] = AxisCis { mu: mu_ci, sigma: sigma_ci };
        lo[axis] = mu_ci.0 - TRUNC_MULTIPLIER * sigma_ci.1;
        hi[axis] = mu_ci.1 + TRUNC_MULTIPLIER * sigma_ci.1;
    }
    Ok(ConfidenceSupport { n, epsilon, support: Box2::new(lo, hi), param_cis: cis })
}

/// Whether `outer` contains `inner`; for boxes, corner checks reduce to
/// per-axis endpoint comparisons.
pub fn box_contains_box(outer: &Box2, inner: &Box2) -> bool {
    outer.contains(&inner.lo) && outer.contains(&inner.hi)
}

/// Empirical failure rate of the support guarantee: refit `trials` times with
/// fresh batches of the same size and epsilon, count fits whose box misses
/// part of the true support.
pub fn support_failure_prob(
    cs: &ConfidenceSupport,
    model: &NoiseModel,
    trials: usize,
    seed: u64,
) -> f64 {
    let truth = model.support();
    let mut failures = 0usize;
    for trial in 0..trials {
        let samples = sample_noise(model, seed.wrapping_add(trial as u64), cs.n);
        match fit_confidence_support(&samples, cs.epsilon) {
            Ok(fit) => {
                if !box_contains_box(&fit.support, &truth) {
                    failures += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    failures as f64 / trials as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_sigma_yields_constant_samples() {
        let model = NoiseModel::new(Vector2::new(0.003, -0.001), Vector2::zeros()).unwrap();
        for s in sample_noise(&model, 7, 100) {
            assert_eq!(s, Vector2::new(0.003, -0.001));
        }
    }

    #[test]
    fn empirical_mean_within_clt_band() {
        let model = NoiseModel::default();
        let n = 100_000;
        let samples = sample_noise(&model, 21, n);
        for axis in 0..2 {
            let mean = samples.iter().map(|s| s[axis]).sum::<f64>() / n as f64;
            let bound = 4.0 * model.axes[axis].sigma / (n as f64).sqrt();
            assert!(
                (mean - model.axes[axis].mu).abs() < bound,
                "axis {axis}: mean {mean} outside CLT band {bound}"
            );
        }
    }

    #[test]
    fn samples_never_leave_truncation_interval() {
        let model = NoiseModel::new(Vector2::new(0.01, -0.02), Vector2::new(0.004, 0.006)).unwrap();
        let truth = model.support();
        for s in sample_noise(&model, 33, 50_000) {
            assert!(truth.contains(&s));
        }
    }

    #[test]
    fn sampling_is_bit_reproducible_under_seed() {
        let model = NoiseModel::default();
        let a = sample_noise(&model, 99, 1000);
        let b = sample_noise(&model, 99, 1000);
        assert_eq!(a, b);
        let fit_a = fit_confidence_support(&a, 0.1).unwrap();
        let fit_b = fit_confidence_support(&b, 0.1).unwrap();
        assert_eq!(fit_a, fit_b);
        let c = sample_noise(&model, 100, 1000);
        assert_ne!(a, c);
    }

    #[test]
    fn truncation_ratio_matches_series_value() {
        // Independent check against sqrt(1 - 6 phi(3) / erf(3/sqrt 2))
        // evaluated with a separate math library.
        assert_relative_eq!(trunc_std_ratio(3.0), 0.9865783925581086, epsilon = 1e-12);
        // Very wide truncation changes nothing.
        assert_relative_eq!(trunc_std_ratio(12.0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn large_batch_support_is_hausdorff_close_to_truth() {
        let model = NoiseModel::default();
        let truth = model.support();
        let samples = sample_noise(&model, 5, 1_000_000);
        let fit = fit_confidence_support(&samples, 0.1).unwrap();
        for axis in 0..2 {
            let scale = TRUNC_MULTIPLIER * model.axes[axis].sigma;
            let d_lo = (fit.support.lo[axis] - truth.lo[axis]).abs();
            let d_hi = (fit.support.hi[axis] - truth.hi[axis]).abs();
            assert!(
                d_lo < 0.01 * scale && d_hi < 0.01 * scale,
                "axis {axis}: endpoint gaps {d_lo}, {d_hi} exceed 1% of {scale}"
            );
        }
        assert!(box_contains_box(&fit.support, &truth));
    }

    #[test]
    fn coverage_failure_rate_within_budget() {
        // 2000 refits at n = 100, epsilon = 0.1: the guarantee allows at most
        // a 0.1 failure rate; allow binomial slack on top.
        let model = NoiseModel::default();
        let samples = sample_noise(&model, 1, 100);
        let cs = fit_confidence_support(&samples, 0.1).unwrap();
        let rate = support_failure_prob(&cs, &model, 2000, 424242);
        assert!(rate <= 0.12, "coverage failure rate {rate} above 0.12");
    }

    #[test]
    fn degenerate_equal_samples_collapse_to_point() {
        let samples = vec![Vector2::new(0.002, -0.004); 20];
        let fit = fit_confidence_support(&samples, 0.1).unwrap();
        for axis in 0..2 {
            // Summation rounding can leave a ~1e-18 residual deviation.
            assert!(fit.param_cis[axis].sigma.0.abs() < 1e-12);
            assert!(fit.param_cis[axis].sigma.1.abs() < 1e-12);
        }
        assert_relative_eq!(fit.support.halfwidth().norm(), 0.0, epsilon = 1e-12);
        assert!(fit.support.contains(&Vector2::new(0.002, -0.004)));
    }

    #[test]
    fn support_grows_as_epsilon_shrinks() {
        let model = NoiseModel::default();
        let samples = sample_noise(&model, 77, 60);
        let boxes: Vec<Box2> = [0.01, 0.1, 0.3]
            .iter()
            .map(|&eps| fit_confidence_support(&samples, eps).unwrap().support)
            .collect();
        for pair in boxes.windows(2) {
            assert!(box_contains_box(&pair[0], &pair[1]));
            assert!(pair[0].halfwidth().min() > pair[1].halfwidth().min());
        }
    }

    #[test]
    fn median_support_area_shrinks_with_batch_size() {
        let model = NoiseModel::default();
        let mut medians = Vec::new();
        for (i, n) in [20usize, 100, 500].into_iter().enumerate() {
            let mut areas: Vec<f64> = (0..200)
                .map(|rep| {
                    let samples = sample_noise(&model, (i * 1000 + rep) as u64, n);
                    let hw = fit_confidence_support(&samples, 0.1).unwrap().support.halfwidth();
                    4.0 * hw.x * hw.y
                })
                .collect();
            areas.sort_by(|a, b| a.total_cmp(b));
            medians.push(0.5 * (areas[99] + areas[100]));
        }
        assert!(medians[0] > medians[1] && medians[1] > medians[2], "medians {medians:?}");
    }

    #[test]
    fn failure_rate_tracks_epsilon_budgets() {
        let model = NoiseModel::default();
        let trials = 500;
        let slack = |eps: f64| 3.0 * (eps * (1.0 - eps) / trials as f64).sqrt() + 0.01;

        let loose = fit_confidence_support(&sample_noise(&model, 2, 20), 0.5).unwrap();
        let rate = support_failure_prob(&loose, &model, trials, 777);
        assert!(rate <= 0.5 + slack(0.5), "rate {rate}");

        let tight = fit_confidence_support(&sample_noise(&model, 3, 2000), 0.01).unwrap();
        let rate = support_failure_prob(&tight, &model, trials, 778);
        assert!(rate <= 0.01 + slack(0.01), "rate {rate}");
    }

    #[test]
    fn rejects_small_batches_and_bad_epsilon() {
        let samples = vec![Vector2::zeros(); 7];
        assert_eq!(
            fit_confidence_support(&samples, 0.1),
            Err(NoiseError::InsufficientSamples(7))
        );
        let samples = vec![Vector2::zeros(); 10];
        assert_eq!(fit_confidence_support(&samples, 0.0), Err(NoiseError::InvalidEpsilon(0.0)));
        assert_eq!(fit_confidence_support(&samples, 1.0), Err(NoiseError::InvalidEpsilon(1.0)));
        assert_eq!(
            TruncNormalAxis::new(0.0, -0.1),
            Err(NoiseError::InvalidSigma(-0.1))
        );
    }

    #[test]
    fn box_containment_reduces_to_corner_checks() {
        let outer = Box2::symmetric(Vector2::new(0.02, 0.03));
        let inner = Box2::new(Vector2::new(-0.01, -0.02), Vector2::new(0.015, 0.01));
        assert!(box_contains_box(&outer, &inner));
        let poking = Box2::new(Vector2::new(-0.01, -0.02), Vector2::new(0.025, 0.01));
        assert!(!box_contains_box(&outer, &poking));
    }
}
