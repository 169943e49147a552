// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ground-truth generator for cyclic populations.
//!
//! Simulation runs in two stages. First every individual gets a latent cycle
//! position: an average cycle length `L_i ~ N(L, σ_b²)`, a uniformly drawn
//! starting day, and per-cycle lengths `~ N(L_i, σ_w²)`. Then feature values
//! and missingness are drawn as sinusoids of the position `φ = day / length`.
//!
//! Sinusoid coefficients are drawn once per feature for the population and
//! jittered per individual. Every individual draws from its own RNG stream,
//! so the output does not depend on how the work is scheduled.

use std::f64::consts::TAU;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{apply_binary_missing_rule, FeatureKind, IndividualSeries, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::model::{CyhmmModel, EmissionParams};

/// Cycle lengths below this are redrawn.
pub const MIN_CYCLE_LENGTH: usize = 5;

const POPULATION_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_individuals: usize,
    /// Length of every series.
    pub t_max: usize,
    /// Shortest series length as a fraction of `t_max`; lengths are drawn
    /// uniformly between the two.
    pub min_length_fraction: f64,
    /// Population mean cycle length `L`.
    pub cycle_length: f64,
    /// Between-individual std of average cycle length.
    pub sigma_between: f64,
    /// Within-individual std of successive cycle lengths.
    pub sigma_within: f64,
    /// Observation noise std (continuous features).
    pub sigma_noise: f64,
    /// Baseline probability that a cell (continuous) or a row (binary) is missing.
    pub p_missing: f64,
    pub n_features: usize,
    pub kind: FeatureKind,
    pub seed: u64,
    /// Multiplies value amplitudes and offsets of continuous features.
    pub value_scale: f64,
    pub value_amplitude: (f64, f64),
    pub value_offset: (f64, f64),
    /// Sinusoid phase range, radians.
    pub phase: (f64, f64),
    /// Amplitude of the sinusoidal swing in observation probability.
    pub obs_amplitude: (f64, f64),
    /// Binary emission baseline probability.
    pub binary_base: (f64, f64),
    /// Binary emission swing around the baseline.
    pub binary_amplitude: (f64, f64),
    /// Per-individual relative jitter of amplitudes (std of a multiplier
    /// centered at 1).
    pub amplitude_jitter: f64,
    /// Per-individual phase jitter std, radians.
    pub phase_jitter: f64,
    /// Per-individual offset jitter std, in units of `value_scale`
    /// (continuous) or probability (binary).
    pub offset_jitter: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            n_individuals: 100,
            t_max: 120,
            min_length_fraction: 1.0,
            cycle_length: 30.0,
            sigma_between: 2.0,
            sigma_within: 1.0,
            sigma_noise: 0.25,
            p_missing: 0.2,
            n_features: 5,
            kind: FeatureKind::Continuous,
            seed: 0,
            value_scale: 1.0,
            value_amplitude: (0.5, 1.0),
            value_offset: (-0.5, 0.5),
            phase: (0.0, TAU),
            obs_amplitude: (0.0, 0.2),
            binary_base: (0.2, 0.5),
            binary_amplitude: (0.1, 0.3),
            amplitude_jitter: 0.1,
            phase_jitter: 0.2,
            offset_jitter: 0.05,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_individuals == 0 || self.t_max == 0 || self.n_features == 0 {
            return Err(Error::param(
                "n_individuals, t_max and n_features must be positive",
            ));
        }
        if !(self.cycle_length > 0.0) {
            return Err(Error::param("cycle_length must be positive"));
        }
        let stds = [
            self.sigma_between,
            self.sigma_within,
            self.sigma_noise,
            self.amplitude_jitter,
            self.phase_jitter,
            self.offset_jitter,
        ];
        if stds.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::param("standard deviations must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.p_missing) {
            return Err(Error::param("p_missing must lie in [0, 1)"));
        }
        if !(self.min_length_fraction > 0.0 && self.min_length_fraction <= 1.0) {
            return Err(Error::param("min_length_fraction must lie in (0, 1]"));
        }
        let ranges = [
            self.value_amplitude,
            self.value_offset,
            self.phase,
            self.obs_amplitude,
            self.binary_base,
            self.binary_amplitude,
        ];
        if ranges.iter().any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::param("coefficient ranges must satisfy lo <= hi"));
        }
        Ok(())
    }
}

/// Latent cycle position of one individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionTrace {
    pub id: String,
    /// Drawn average cycle length `L_i`.
    pub mean_length: usize,
    pub cycle_day: Vec<usize>,
    /// Length of the cycle each timestep belongs to.
    pub cycle_length: Vec<usize>,
    pub phi: Vec<f64>,
    /// Lengths of every cycle overlapping the observed window, in order.
    pub cycles: Vec<usize>,
}

impl PositionTrace {
    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    /// Mean length of the cycles this individual actually went through.
    pub fn realized_mean_length(&self) -> f64 {
        self.cycles.iter().sum::<usize>() as f64 / self.cycles.len() as f64
    }
}

/// Sinusoid coefficients of one feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureCoefficients {
    pub amplitude: f64,
    pub phase: f64,
    /// Offset (continuous) or baseline probability (binary).
    pub offset: f64,
    pub obs_amplitude: f64,
    pub obs_phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedDataset {
    pub dataset: TimeSeriesDataset,
    pub truth: Vec<PositionTrace>,
    pub population: Vec<FeatureCoefficients>,
    /// `bins × K` mean observed value per cycle-day bin, where a timestep
    /// falls in bin `floor(φ · bins)` and `bins = round(L)`.
    pub truth_trajectories: Vec<Vec<f64>>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Rounded normal draw, redrawn while below the cycle-length floor.
fn draw_length(rng: &mut impl Rng, mean: f64, std: f64) -> usize {
    let normal = Normal::new(mean, std).expect("std validated non-negative");
    for _ in 0..1000 {
        let x = normal.sample(rng).round();
        if x >= MIN_CYCLE_LENGTH as f64 {
            return x as usize;
        }
    }
    MIN_CYCLE_LENGTH
}

fn positions_for(config: &SimulationConfig, i: usize) -> PositionTrace {
    let mut rng = stream_rng(config.seed, 2 * i as u64);
    let mean_length = draw_length(&mut rng, config.cycle_length, config.sigma_between);
    let min_len = ((config.t_max as f64 * config.min_length_fraction).ceil() as usize).max(1);
    let len = if min_len < config.t_max {
        rng.random_range(min_len..=config.t_max)
    } else {
        config.t_max
    };
    let mut current = draw_length(&mut rng, mean_length as f64, config.sigma_within);
    let mut day = rng.random_range(0..current);
    let mut trace = PositionTrace {
        id: format!("ind{i:05}"),
        mean_length,
        cycle_day: Vec::with_capacity(len),
        cycle_length: Vec::with_capacity(len),
        phi: Vec::with_capacity(len),
        cycles: vec![current],
    };
    for t in 0..len {
        if t > 0 {
            day += 1;
            if day == current {
                day = 0;
                current = draw_length(&mut rng, mean_length as f64, config.sigma_within);
                trace.cycles.push(current);
            }
        }
        trace.cycle_day.push(day);
        trace.cycle_length.push(current);
        trace.phi.push(day as f64 / current as f64);
    }
    trace
}

/// Draws latent cycle positions for every individual.
pub fn simulate_positions(config: &SimulationConfig) -> Result<Vec<PositionTrace>> {
    config.validate()?;
    Ok((0..config.n_individuals)
        .into_par_iter()
        .map(|i| positions_for(config, i))
        .collect())
}

/// Population-level coefficients, one set per feature.
pub fn population_coefficients(config: &SimulationConfig) -> Vec<FeatureCoefficients> {
    let mut rng = stream_rng(config.seed, POPULATION_STREAM);
    (0..config.n_features)
        .map(|_| {
            let (amplitude, offset) = match config.kind {
                FeatureKind::Continuous => (
                    uniform(&mut rng, config.value_amplitude) * config.value_scale,
                    uniform(&mut rng, config.value_offset) * config.value_scale,
                ),
                FeatureKind::Binary => (
                    uniform(&mut rng, config.binary_amplitude),
                    uniform(&mut rng, config.binary_base),
                ),
            };
            FeatureCoefficients {
                amplitude,
                phase: uniform(&mut rng, config.phase),
                offset,
                obs_amplitude: uniform(&mut rng, config.obs_amplitude),
                obs_phase: uniform(&mut rng, config.phase),
            }
        })
        .collect()
}

fn jittered(
    config: &SimulationConfig,
    population: &[FeatureCoefficients],
    rng: &mut impl Rng,
) -> Vec<FeatureCoefficients> {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let offset_unit = match config.kind {
        FeatureKind::Continuous => config.value_scale,
        FeatureKind::Binary => 1.0,
    };
    population
        .iter()
        .map(|c| {
            let mut z = || std_normal.sample(rng);
            FeatureCoefficients {
                amplitude: c.amplitude * (1.0 + config.amplitude_jitter * z()).max(0.0),
                phase: c.phase + config.phase_jitter * z(),
                offset: c.offset + config.offset_jitter * offset_unit * z(),
                obs_amplitude: c.obs_amplitude * (1.0 + config.amplitude_jitter * z()).max(0.0),
                obs_phase: c.obs_phase + config.phase_jitter * z(),
            }
        })
        .collect()
}

fn observe(
    config: &SimulationConfig,
    population: &[FeatureCoefficients],
    trace: &PositionTrace,
    i: usize,
) -> Result<IndividualSeries> {
    let mut rng = stream_rng(config.seed, 2 * i as u64 + 1);
    let coefs = jittered(config, population, &mut rng);
    let noise = Normal::new(0.0, config.sigma_noise).expect("validated");
    let k = config.n_features;
    let mut rows = Vec::with_capacity(trace.len());
    for &phi in &trace.phi {
        let angle = TAU * phi;
        let mut row = vec![None; k];
        match config.kind {
            FeatureKind::Continuous => {
                for (cell, c) in row.iter_mut().zip(&coefs) {
                    let p_obs = (1.0 - config.p_missing
                        + c.obs_amplitude * (angle + c.obs_phase).sin())
                    .clamp(0.01, 1.0);
                    if rng.random_bool(p_obs) {
                        let v = c.offset
                            + c.amplitude * (angle + c.phase).sin()
                            + noise.sample(&mut rng);
                        *cell = Some(v);
                    }
                }
            }
            FeatureKind::Binary => {
                // One shared draw decides whether anything was logged; its
                // swing follows the first feature's observation sinusoid.
                let c0 = &coefs[0];
                let p_obs = (1.0 - config.p_missing
                    + c0.obs_amplitude * (angle + c0.obs_phase).sin())
                .clamp(0.01, 1.0);
                if rng.random_bool(p_obs) {
                    for (cell, c) in row.iter_mut().zip(&coefs) {
                        let p =
                            (c.offset + c.amplitude * (angle + c.phase).sin()).clamp(0.01, 0.99);
                        *cell = Some(if rng.random_bool(p) { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        rows.push(row);
    }
    let mut s = IndividualSeries::from_rows(trace.id.clone(), &rows)?;
    s.start = 0;
    Ok(s)
}

/// Mean observed value per cycle-day bin across the whole population.
pub fn truth_trajectories(
    ds: &TimeSeriesDataset,
    truth: &[PositionTrace],
    bins: usize,
) -> Vec<Vec<f64>> {
    let k = ds.n_features();
    let mut sum = vec![vec![0.0; k]; bins];
    let mut count = vec![vec![0usize; k]; bins];
    for (s, tr) in ds.series.iter().zip(truth) {
        for t in 0..s.len() {
            let b = ((tr.phi[t] * bins as f64).floor() as usize).min(bins - 1);
            for f in 0..k {
                if let Some(v) = s.value(t, f) {
                    sum[b][f] += v;
                    count[b][f] += 1;
                }
            }
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(srow, crow)| {
            srow.iter()
                .zip(crow)
                .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
                .collect()
        })
        .collect()
}

/// Draws observations given precomputed positions.
pub fn simulate_observations(
    config: &SimulationConfig,
    positions: Vec<PositionTrace>,
) -> Result<SimulatedDataset> {
    config.validate()?;
    let population = population_coefficients(config);
    let series: Vec<IndividualSeries> = positions
        .par_iter()
        .enumerate()
        .map(|(i, tr)| observe(config, &population, tr, i))
        .collect::<Result<_>>()?;
    let names = (0..config.n_features)
        .map(|k| format!("feature_{k}"))
        .collect();
    let mut dataset = TimeSeriesDataset::new(series, names, config.kind)?;
    if config.kind == FeatureKind::Binary {
        dataset = apply_binary_missing_rule(dataset)?;
    }
    let bins = config.cycle_length.round().max(1.0) as usize;
    let truth_trajectories = truth_trajectories(&dataset, &positions, bins);
    Ok(SimulatedDataset {
        dataset,
        truth: positions,
        population,
        truth_trajectories,
    })
}

/// Both simulation stages.
pub fn simulate(config: &SimulationConfig) -> Result<SimulatedDataset> {
    let positions = simulate_positions(config)?;
    simulate_observations(config, positions)
}

/// Concatenates independently simulated populations. Ids are prefixed with
/// the group index; the second value holds each individual's group.
pub fn simulate_groups(configs: &[SimulationConfig]) -> Result<(SimulatedDataset, Vec<usize>)> {
    let mut parts = Vec::with_capacity(configs.len());
    for c in configs {
        parts.push(simulate(c)?);
    }
    let first = parts.first().ok_or_else(|| Error::param("no groups"))?;
    let (names, kind) = (first.dataset.feature_names.clone(), first.dataset.kind);
    let mut series = Vec::new();
    let mut truth = Vec::new();
    let mut labels = Vec::new();
    for (g, part) in parts.iter().enumerate() {
        for (s, tr) in part.dataset.series.iter().zip(&part.truth) {
            let mut s = s.clone();
            let mut tr = tr.clone();
            s.id = format!("g{g}_{}", s.id);
            tr.id = s.id.clone();
            series.push(s);
            truth.push(tr);
            labels.push(g);
        }
    }
    let dataset = TimeSeriesDataset::new(series, names, kind)?;
    let bins = configs[0].cycle_length.round().max(1.0) as usize;
    let truth_trajectories = truth_trajectories(&dataset, &truth, bins);
    Ok((
        SimulatedDataset {
            dataset,
            truth,
            population: first.population.clone(),
            truth_trajectories,
        },
        labels,
    ))
}

/// Draws one series from a CyHMM and returns it with its substate path.
pub fn sample_from_model(
    model: &CyhmmModel,
    len: usize,
    id: impl Into<String>,
    seed: u64,
    stream: u64,
) -> (IndividualSeries, Vec<(usize, usize)>) {
    let mut rng = stream_rng(seed, stream);
    let j_count = model.n_states();
    let pmfs: Vec<Vec<f64>> = (0..j_count).map(|j| model.duration_pmf(j)).collect();
    let draw = |rng: &mut ChaCha8Rng, pmf: &[f64]| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (d, p) in pmf.iter().enumerate() {
            acc += p;
            if u < acc {
                return d;
            }
        }
        pmf.len() - 1
    };
    let mut j = rng.random_range(0..j_count);
    let mut d = draw(&mut rng, &pmfs[j]);
    let k = model.n_features();
    let mut path = Vec::with_capacity(len);
    let mut rows = Vec::with_capacity(len);
    for t in 0..len {
        if t > 0 {
            if d > 0 {
                d -= 1;
            } else {
                j = (j + 1) % j_count;
                d = draw(&mut rng, &pmfs[j]);
            }
        }
        path.push((j, d));
        let row: Vec<Option<f64>> = match model.emissions() {
            EmissionParams::Continuous { mean, std, p_obs } => (0..k)
                .map(|f| {
                    rng.random_bool(p_obs[j][f])
                        .then(|| Normal::new(mean[j][f], std[j][f]).unwrap().sample(&mut rng))
                })
                .collect(),
            EmissionParams::Binary { rate, p_obs } => {
                if rng.random_bool(p_obs[j]) {
                    (0..k)
                        .map(|f| {
                            Some(if rng.random_bool(rate[j][f]) {
                                1.0
                            } else {
                                0.0
                            })
                        })
                        .collect()
                } else {
                    vec![None; k]
                }
            }
        };
        rows.push(row);
    }
    let series = IndividualSeries::from_rows(id, &rows).expect("sampled rows are rectangular");
    (series, path)
}

/// Writes `id,t,cycle_day,cycle_length,phi`.
pub fn write_truth_csv<W: Write>(truth: &[PositionTrace], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "t", "cycle_day", "cycle_length", "phi"])?;
    for tr in truth {
        for t in 0..tr.len() {
            w.write_record([
                tr.id.clone(),
                t.to_string(),
                tr.cycle_day[t].to_string(),
                tr.cycle_length[t].to_string(),
                tr.phi[t].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<truth csv>", e))?;
    Ok(())
}

/// Writes `cycle_day,feature,mean_value`.
pub fn write_truth_trajectories_csv<W: Write>(
    trajectories: &[Vec<f64>],
    feature_names: &[String],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["cycle_day", "feature", "mean_value"])?;
    for (day, row) in trajectories.iter().enumerate() {
        for (name, v) in feature_names.iter().zip(row) {
            let v = if v.is_finite() {
                v.to_string()
            } else {
                String::new()
            };
            w.write_record([day.to_string(), name.clone(), v])?;
        }
    }
    w.flush().map_err(|e| Error::io("<trajectory csv>", e))?;
    Ok(())
}
