// SPDX-License-Identifier: MIT OR Apache-2.0

//! Classical period detectors used as comparison methods.
//!
//! Every detector works per feature, keeps only periods inside
//! [`PeriodBounds`], and aggregates features by their median.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dataset::{FeatureKind, IndividualSeries};
use crate::error::{Error, Result};
use crate::stats;

/// Inclusive range of admissible periods, in timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodBounds {
    pub min: usize,
    pub max: usize,
}

impl Default for PeriodBounds {
    fn default() -> Self {
        PeriodBounds { min: 5, max: 50 }
    }
}

impl PeriodBounds {
    pub fn contains(&self, period: f64) -> bool {
        period >= self.min as f64 && period <= self.max as f64
    }

    fn validate(&self) -> Result<()> {
        if self.min == 0 || self.min > self.max {
            return Err(Error::param(format!(
                "invalid period bounds [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodEstimate {
    /// Candidate period per feature; `None` where nothing was detected.
    pub per_feature: Vec<Option<f64>>,
    /// Median over detected features; `None` means undetected.
    pub period: Option<f64>,
    pub bounds: PeriodBounds,
}

impl PeriodEstimate {
    fn from_features(per_feature: Vec<Option<f64>>, bounds: PeriodBounds) -> Self {
        let found: Vec<f64> = per_feature.iter().flatten().copied().collect();
        PeriodEstimate {
            period: stats::median(&found),
            per_feature,
            bounds,
        }
    }
}

/// Feature values with unobserved cells replaced by the observed mean, then
/// centered. `None` when the feature has no observations.
fn centered_imputed(series: &IndividualSeries, k: usize) -> Option<Vec<f64>> {
    let col = series.feature(k);
    let obs: Vec<f64> = col.iter().flatten().copied().collect();
    let m = stats::mean(&obs)?;
    Some(col.iter().map(|v| v.map_or(0.0, |x| x - m)).collect())
}

/// Period of the largest-amplitude DFT bin whose period `T/k` lies in bounds.
pub fn fourier_period(series: &IndividualSeries, bounds: PeriodBounds) -> Result<PeriodEstimate> {
    bounds.validate()?;
    let t = series.len();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(t.max(1));
    let per_feature = (0..series.n_features())
        .map(|k| {
            let x = centered_imputed(series, k)?;
            let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
            if scale == 0.0 {
                return None;
            }
            let mut buf: Vec<Complex<f64>> =
                x.iter().map(|&v| Complex::new(v / scale, 0.0)).collect();
            fft.process(&mut buf);
            let mut best: Option<(f64, f64)> = None;
            for (bin, c) in buf.iter().enumerate().take(t / 2 + 1).skip(1) {
                let period = t as f64 / bin as f64;
                if !bounds.contains(period) {
                    continue;
                }
                let amp = c.norm();
                if best.is_none_or(|(_, a)| amp > a) {
                    best = Some((period, amp));
                }
            }
            best.filter(|&(_, a)| a > 1e-9 * t as f64).map(|(p, _)| p)
        })
        .collect();
    Ok(PeriodEstimate::from_features(per_feature, bounds))
}

/// Lag in bounds maximizing the sample autocorrelation. The lagged product
/// is averaged over pairs where both cells are observed and then damped by
/// `(T − lag) / T` as in the usual biased estimator, so a missingness
/// pattern cannot favor lags that happen to keep more pairs.
pub fn autocorrelation_period(
    series: &IndividualSeries,
    bounds: PeriodBounds,
) -> Result<PeriodEstimate> {
    bounds.validate()?;
    let t = series.len();
    let per_feature = (0..series.n_features())
        .map(|k| {
            let col = series.feature(k);
            let obs: Vec<f64> = col.iter().flatten().copied().collect();
            let m = stats::mean(&obs)?;
            let denom: f64 = obs.iter().map(|x| (x - m) * (x - m)).sum();
            if denom <= 1e-12 * obs.len() as f64 * (1.0 + m * m) {
                return None;
            }
            let var = denom / obs.len() as f64;
            let mut best: Option<(usize, f64)> = None;
            for lag in bounds.min..=bounds.max.min(t.saturating_sub(1)) {
                let mut pairs = 0usize;
                let mut num = 0.0;
                for i in 0..t - lag {
                    if let (Some(a), Some(b)) = (col[i], col[i + lag]) {
                        num += (a - m) * (b - m);
                        pairs += 1;
                    }
                }
                if pairs < 2 {
                    continue;
                }
                let r = num / pairs as f64 * (t - lag) as f64 / t as f64 / var;
                if best.is_none_or(|(_, b)| r > b) {
                    best = Some((lag, r));
                }
            }
            best.map(|(lag, _)| lag as f64)
        })
        .collect();
    Ok(PeriodEstimate::from_features(per_feature, bounds))
}

/// One candidate period tested by [`partial_periodicity_period`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodTest {
    pub period: usize,
    /// Inter-event gaps inside `[period − δ, period + δ]`.
    pub count: usize,
    pub expected: f64,
    pub chi2: f64,
    pub significant: bool,
}

/// Probability that a geometric gap with per-step event rate `rho` lies in
/// `[lo, hi]` (gaps are at least 1).
fn geometric_window(rho: f64, lo: usize, hi: usize) -> f64 {
    let lo = lo.max(1);
    if hi < lo {
        return 0.0;
    }
    let q = 1.0 - rho;
    q.powi(lo as i32 - 1) - q.powi(hi as i32)
}

/// χ² scan of one binary feature. Events are the observed 1-cells. Under
/// the null, events follow a memoryless process at the empirical rate, so
/// adjacent gaps are geometric. A candidate is significant when its
/// in-tolerance gap count exceeds expectation and the one-degree χ²
/// statistic, with Yates' continuity correction since gap counts are small,
/// clears the Bonferroni-corrected threshold.
pub fn periodicity_scan(
    series: &IndividualSeries,
    k: usize,
    delta: usize,
    alpha: f64,
    bounds: PeriodBounds,
) -> Result<Vec<PeriodTest>> {
    bounds.validate()?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param("alpha must lie in (0, 1)"));
    }
    let events: Vec<usize> = (0..series.len())
        .filter(|&t| series.value(t, k) == Some(1.0))
        .collect();
    if events.len() < 2 {
        return Ok(Vec::new());
    }
    let gaps: Vec<usize> = events.windows(2).map(|w| w[1] - w[0]).collect();
    let n = gaps.len() as f64;
    let rho = events.len() as f64 / series.len() as f64;
    let n_candidates = (bounds.max - bounds.min + 1) as f64;
    let critical = ChiSquared::new(1.0)
        .expect("one degree of freedom")
        .inverse_cdf(1.0 - alpha / n_candidates);
    Ok((bounds.min..=bounds.max)
        .map(|p| {
            let lo = p.saturating_sub(delta);
            let hi = p + delta;
            let count = gaps.iter().filter(|&&g| g >= lo && g <= hi).count();
            let prob = geometric_window(rho, lo, hi);
            let expected = n * prob;
            let var = expected * (1.0 - prob);
            let chi2 = if var > 0.0 {
                ((count as f64 - expected).abs() - 0.5).max(0.0).powi(2) / var
            } else {
                0.0
            };
            PeriodTest {
                period: p,
                count,
                expected,
                chi2,
                significant: var > 0.0 && count as f64 > expected && chi2 > critical,
            }
        })
        .collect())
}

/// Median significant period per feature, then median across features.
/// This is a reimplementation of the partial-periodicity χ² test; features
/// without events are skipped.
pub fn partial_periodicity_period(
    series: &IndividualSeries,
    kind: FeatureKind,
    delta: usize,
    alpha: f64,
    bounds: PeriodBounds,
) -> Result<PeriodEstimate> {
    if kind != FeatureKind::Binary {
        return Err(Error::WrongKind {
            expected: FeatureKind::Binary,
            found: kind,
        });
    }
    let per_feature = (0..series.n_features())
        .map(|k| {
            let sig: Vec<f64> = periodicity_scan(series, k, delta, alpha, bounds)?
                .into_iter()
                .filter(|r| r.significant)
                .map(|r| r.period as f64)
                .collect();
            Ok(stats::median(&sig))
        })
        .collect::<Result<_>>()?;
    Ok(PeriodEstimate::from_features(per_feature, bounds))
}
