// SPDX-License-Identifier: MIT OR Apache-2.0

//! Simulation trials scoring cycle-length estimators against ground truth.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{cycle_lengths, feature_trajectories, variability_vector};
use crate::baselines::{
    autocorrelation_period, fourier_period, partial_periodicity_period, PeriodBounds,
    PeriodEstimate,
};
use crate::dataset::FeatureKind;
use crate::error::{Error, Result};
use crate::model::{CyhmmModel, DurationKind};
use crate::simulation::{SimulatedDataset, SimulationConfig};
use crate::stats;
use crate::training::{em_fit, FitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Cyhmm {
        family: DurationKind,
    },
    Fourier,
    Autocorrelation,
    /// Binary data only; skipped on continuous trials.
    PartialPeriodicity {
        delta: usize,
    },
    /// Returns the truth; a sanity row for the table.
    Oracle,
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Cyhmm {
                family: DurationKind::Poisson,
            } => "cyhmm".into(),
            Method::Cyhmm {
                family: DurationKind::Geometric,
            } => "cyhmm_geometric".into(),
            Method::Fourier => "fourier".into(),
            Method::Autocorrelation => "autocorrelation".into(),
            Method::PartialPeriodicity { delta } => format!("partial_periodicity_d{delta}"),
            Method::Oracle => "oracle".into(),
        }
    }

    pub fn applies_to(&self, kind: FeatureKind) -> bool {
        !matches!(self, Method::PartialPeriodicity { .. }) || kind == FeatureKind::Binary
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        if let Some(d) = s.strip_prefix("partial_periodicity_d") {
            let delta = d
                .parse()
                .map_err(|_| Error::param(format!("bad tolerance in method {s:?}")))?;
            return Ok(Method::PartialPeriodicity { delta });
        }
        match s.as_str() {
            "cyhmm" => Ok(Method::Cyhmm {
                family: DurationKind::Poisson,
            }),
            "cyhmm_geometric" => Ok(Method::Cyhmm {
                family: DurationKind::Geometric,
            }),
            "fourier" => Ok(Method::Fourier),
            "autocorrelation" => Ok(Method::Autocorrelation),
            "partial_periodicity" => Ok(Method::PartialPeriodicity { delta: 2 }),
            "oracle" => Ok(Method::Oracle),
            other => Err(Error::param(format!("unknown method {other:?}"))),
        }
    }
}

/// Ranges that trial configurations are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkGrid {
    /// Template for every field not varied by the grid.
    pub base: SimulationConfig,
    pub t_max_choices: Vec<usize>,
    pub sigma_noise: (f64, f64),
    pub p_missing: (f64, f64),
    pub sigma_between: (f64, f64),
    pub sigma_within: (f64, f64),
}

impl Default for BenchmarkGrid {
    fn default() -> Self {
        BenchmarkGrid {
            base: SimulationConfig {
                n_individuals: 100,
                cycle_length: 30.0,
                n_features: 10,
                value_scale: 50.0,
                value_amplitude: (0.5, 1.0),
                value_offset: (1.0, 2.0),
                ..SimulationConfig::default()
            },
            t_max_choices: vec![90, 180],
            sigma_noise: (5.0, 50.0),
            p_missing: (0.0, 0.9),
            sigma_between: (1.0, 10.0),
            sigma_within: (1.0, 10.0),
        }
    }
}

impl BenchmarkGrid {
    /// `n` trial configurations of one kind. Trial `i` gets simulation seed
    /// `seed + i`; grid draws come from a separate stream.
    pub fn sample(&self, kind: FeatureKind, n: usize, seed: u64) -> Result<Vec<SimulationConfig>> {
        if self.t_max_choices.is_empty() {
            return Err(Error::param("benchmark grid needs at least one t_max"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(match kind {
            FeatureKind::Binary => 1,
            FeatureKind::Continuous => 2,
        });
        let mut draw = |(lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        let mut configs = Vec::with_capacity(n);
        for i in 0..n {
            let cfg = SimulationConfig {
                kind,
                seed: seed.wrapping_add(i as u64),
                sigma_noise: draw(self.sigma_noise),
                p_missing: draw(self.p_missing),
                sigma_between: draw(self.sigma_between),
                sigma_within: draw(self.sigma_within),
                t_max: self.t_max_choices[i % self.t_max_choices.len()],
                ..self.base.clone()
            };
            cfg.validate()?;
            configs.push(cfg);
        }
        Ok(configs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkOptions {
    pub fit: FitConfig,
    pub bounds: PeriodBounds,
    /// Significance level of the partial-periodicity test.
    pub alpha: f64,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        BenchmarkOptions {
            fit: FitConfig {
                n_states: 4,
                init_grid: vec![15.0, 30.0, 45.0],
                ..FitConfig::default()
            },
            bounds: PeriodBounds::default(),
            alpha: 0.01,
        }
    }
}

/// Per-individual estimates of one method; `None` means undetected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEstimates {
    pub method: Method,
    pub estimates: Vec<Option<f64>>,
}

/// What a CyHMM fit learned on one trial beyond its per-individual lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyhmmTrialInfo {
    pub family: DurationKind,
    pub expected_cycle_length: f64,
    pub population_mode: Option<usize>,
    pub iterations: usize,
    /// Pearson correlation of inferred and true feature variability.
    pub variability_correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub kind: FeatureKind,
    pub ids: Vec<String>,
    /// Realized mean length of the cycles overlapping each window.
    pub truth: Vec<f64>,
    /// Drawn average cycle length of each individual.
    pub mean_length: Vec<usize>,
    pub estimates: Vec<MethodEstimates>,
    pub cyhmm: Vec<CyhmmTrialInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub method: String,
    pub n_individuals: usize,
    pub n_undetected: usize,
    pub mean_error: Option<f64>,
    pub median_error: Option<f64>,
    /// Pearson correlation of detected estimates with truth.
    pub pearson_r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub trials: Vec<TrialResult>,
    pub table: Vec<ErrorRow>,
}

/// Pearson correlation of the model's variability vector with the one
/// computed from the simulation's per-cycle-day means.
pub fn variability_correlation(model: &CyhmmModel, sim: &SimulatedDataset) -> Result<Option<f64>> {
    let bins = sim.truth_trajectories.len();
    let horizon = (model.expected_cycle_length().round() as usize)
        .max(bins)
        .max(1);
    let inferred = feature_trajectories(model, horizon)?.delta;
    let truth = variability_vector(&sim.truth_trajectories, bins);
    let (a, b): (Vec<f64>, Vec<f64>) = inferred
        .iter()
        .zip(&truth)
        .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .unzip();
    Ok(stats::pearson(&a, &b))
}

fn baseline_estimates(
    sim: &SimulatedDataset,
    f: impl Fn(&crate::IndividualSeries) -> Result<PeriodEstimate> + Sync,
) -> Result<Vec<Option<f64>>> {
    sim.dataset
        .series
        .par_iter()
        .map(|s| Ok(f(s)?.period))
        .collect()
}

/// Runs every applicable method on one simulated dataset.
pub fn run_trial(
    sim: &SimulatedDataset,
    methods: &[Method],
    options: &BenchmarkOptions,
) -> Result<TrialResult> {
    let ds = &sim.dataset;
    let truth: Vec<f64> = sim.truth.iter().map(|t| t.realized_mean_length()).collect();
    let mut estimates = Vec::new();
    let mut cyhmm = Vec::new();
    for &method in methods.iter().filter(|m| m.applies_to(ds.kind)) {
        let b = options.bounds;
        let est = match method {
            Method::Cyhmm { family } => {
                let cfg = FitConfig {
                    duration_family: family,
                    ..options.fit.clone()
                };
                let fit = em_fit(&cfg, ds)?;
                let report = cycle_lengths(&fit.model, ds)?;
                cyhmm.push(CyhmmTrialInfo {
                    family,
                    expected_cycle_length: fit.model.expected_cycle_length(),
                    population_mode: report.population_mode,
                    iterations: fit.loglik_trace.len(),
                    variability_correlation: variability_correlation(&fit.model, sim)?,
                });
                report.per_individual.iter().map(|c| c.mean).collect()
            }
            Method::Fourier => baseline_estimates(sim, |s| fourier_period(s, b))?,
            Method::Autocorrelation => baseline_estimates(sim, |s| autocorrelation_period(s, b))?,
            Method::PartialPeriodicity { delta } => baseline_estimates(sim, |s| {
                partial_periodicity_period(s, ds.kind, delta, options.alpha, b)
            })?,
            Method::Oracle => truth.iter().map(|&t| Some(t)).collect(),
        };
        estimates.push(MethodEstimates {
            method,
            estimates: est,
        });
    }
    Ok(TrialResult {
        kind: ds.kind,
        ids: ds.series.iter().map(|s| s.id.clone()).collect(),
        truth,
        mean_length: sim.truth.iter().map(|t| t.mean_length).collect(),
        estimates,
        cyhmm,
    })
}

/// Error table pooled over individuals of the given trials. Methods appear
/// in first-seen order.
pub fn error_table<'a>(trials: impl IntoIterator<Item = &'a TrialResult>) -> Vec<ErrorRow> {
    let mut pooled: Vec<(Method, Vec<f64>, Vec<f64>, usize)> = Vec::new();
    for trial in trials {
        for me in &trial.estimates {
            let idx = match pooled.iter().position(|p| p.0 == me.method) {
                Some(i) => i,
                None => {
                    pooled.push((me.method, Vec::new(), Vec::new(), 0));
                    pooled.len() - 1
                }
            };
            let entry = &mut pooled[idx];
            for (est, &truth) in me.estimates.iter().zip(&trial.truth) {
                match est {
                    Some(e) => {
                        entry.1.push(*e);
                        entry.2.push(truth);
                    }
                    None => entry.3 += 1,
                }
            }
        }
    }
    pooled
        .into_iter()
        .map(|(method, est, truth, undetected)| {
            let errors: Vec<f64> = est.iter().zip(&truth).map(|(e, t)| (e - t).abs()).collect();
            ErrorRow {
                method: method.name(),
                n_individuals: est.len() + undetected,
                n_undetected: undetected,
                mean_error: stats::mean(&errors),
                median_error: stats::median(&errors),
                pearson_r: stats::pearson(&est, &truth),
            }
        })
        .collect()
}

/// Runs all methods on every dataset and pools the results.
pub fn benchmark(
    datasets: &[SimulatedDataset],
    methods: &[Method],
    options: &BenchmarkOptions,
) -> Result<BenchmarkReport> {
    if methods.is_empty() {
        return Err(Error::param("benchmark needs at least one method"));
    }
    let mut trials = Vec::with_capacity(datasets.len());
    for (i, sim) in datasets.iter().enumerate() {
        let started = std::time::Instant::now();
        trials.push(run_trial(sim, methods, options)?);
        log::info!(
            "trial {}/{} done in {:.1?}",
            i + 1,
            datasets.len(),
            started.elapsed()
        );
    }
    let table = error_table(&trials);
    Ok(BenchmarkReport { trials, table })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.4}"))
}

pub fn write_error_table_csv<W: Write>(table: &[ErrorRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "method",
        "n_individuals",
        "n_undetected",
        "mean_error",
        "median_error",
        "pearson_r",
    ])?;
    for r in table {
        w.write_record([
            r.method.clone(),
            r.n_individuals.to_string(),
            r.n_undetected.to_string(),
            opt(r.mean_error),
            opt(r.median_error),
            opt(r.pearson_r),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<error table csv>", e))?;
    Ok(())
}

/// One row per trial, individual and method.
pub fn write_estimates_csv<W: Write>(trials: &[TrialResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["trial", "id", "method", "estimate", "truth"])?;
    for (i, trial) in trials.iter().enumerate() {
        for me in &trial.estimates {
            for ((id, est), truth) in trial.ids.iter().zip(&me.estimates).zip(&trial.truth) {
                w.write_record([
                    i.to_string(),
                    id.clone(),
                    me.method.name(),
                    opt(*est),
                    format!("{truth:.4}"),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<estimates csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::simulate;

    #[test]
    fn oracle_row_is_perfect() {
        let cfg = SimulationConfig {
            n_individuals: 20,
            t_max: 90,
            ..SimulationConfig::default()
        };
        let sim = simulate(&cfg).unwrap();
        let methods = [Method::Oracle, Method::Autocorrelation, Method::Fourier];
        let report = benchmark(&[sim], &methods, &BenchmarkOptions::default()).unwrap();
        assert_eq!(report.table.len(), 3);
        let oracle = &report.table[0];
        assert_eq!(oracle.method, "oracle");
        assert_eq!(oracle.mean_error, Some(0.0));
        assert!((oracle.pearson_r.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(oracle.n_undetected, 0);
        let mut buf = Vec::new();
        write_error_table_csv(&report.table, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().all(|l| l.split(',').count() == 6));
    }

    #[test]
    fn partial_periodicity_skipped_on_continuous() {
        let sim = simulate(&SimulationConfig {
            n_individuals: 5,
            ..SimulationConfig::default()
        })
        .unwrap();
        let t = run_trial(
            &sim,
            &[Method::PartialPeriodicity { delta: 2 }, Method::Oracle],
            &BenchmarkOptions::default(),
        )
        .unwrap();
        assert_eq!(t.estimates.len(), 1);
    }

    #[test]
    fn empty_method_list_rejected() {
        assert!(benchmark(&[], &[], &BenchmarkOptions::default()).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in [
            Method::Cyhmm {
                family: DurationKind::Poisson,
            },
            Method::Cyhmm {
                family: DurationKind::Geometric,
            },
            Method::Fourier,
            Method::Autocorrelation,
            Method::PartialPeriodicity { delta: 5 },
            Method::Oracle,
        ] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }

    #[test]
    fn grid_draws_stay_in_ranges() {
        let grid = BenchmarkGrid::default();
        let configs = grid.sample(FeatureKind::Binary, 30, 9).unwrap();
        for (i, c) in configs.iter().enumerate() {
            assert!([90, 180].contains(&c.t_max));
            assert!((5.0..50.0).contains(&c.sigma_noise));
            assert!((0.0..0.9).contains(&c.p_missing));
            assert!(
                (1.0..10.0).contains(&c.sigma_between) && (1.0..10.0).contains(&c.sigma_within)
            );
            assert_eq!(c.seed, 9 + i as u64);
            assert_eq!(c.kind, FeatureKind::Binary);
        }
        assert_eq!(configs, grid.sample(FeatureKind::Binary, 30, 9).unwrap());
    }
}
