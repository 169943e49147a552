// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded simulation studies with fixed statistical targets.

use std::f64::consts::{FRAC_PI_2, TAU};

use cyhmm::analysis::{cycle_lengths, feature_trajectories};
use cyhmm::benchmark::{benchmark, error_table, BenchmarkGrid, BenchmarkOptions, Method};
use cyhmm::clustering::{select_cluster_count, ClusterConfig};
use cyhmm::simulation::{sample_from_model, simulate, simulate_groups, SimulationConfig};
use cyhmm::stats::median;
use cyhmm::training::{em_fit, select_state_count, FitConfig};
use cyhmm::{CyhmmModel, DurationFamily, EmissionParams, FeatureKind, TimeSeriesDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sampled(model: &CyhmmModel, n: usize, len: usize, seed: u64) -> TimeSeriesDataset {
    let series = (0..n)
        .map(|i| sample_from_model(model, len, format!("s{i}"), seed, i as u64).0)
        .collect();
    let names = (0..model.n_features()).map(|k| format!("f{k}")).collect();
    TimeSeriesDataset::new(series, names, model.kind()).unwrap()
}

fn quick(n_states: usize, cycle_length: f64, seed: u64) -> FitConfig {
    FitConfig {
        n_states,
        cycle_length,
        max_iters: 40,
        seed,
        ..FitConfig::default()
    }
}

#[test]
fn selects_four_well_separated_states() {
    let truth = CyhmmModel::new(
        DurationFamily::Poisson {
            rates: vec![5.0, 7.0, 4.0, 6.0],
        },
        25,
        EmissionParams::Continuous {
            mean: vec![
                vec![-3.0, 0.0, 3.0],
                vec![3.0, -3.0, 0.0],
                vec![0.0, 3.0, -3.0],
                vec![3.0, 3.0, 3.0],
            ],
            std: vec![vec![1.0; 3]; 4],
            p_obs: vec![vec![0.8; 3]; 4],
        },
    )
    .unwrap();
    let mut hits = 0;
    let mut picks = Vec::new();
    for seed in 0..10 {
        let ds = sampled(&truth, 40, 90, 300 + seed);
        let j = select_state_count(&ds, &[2, 4, 8], 3, &quick(4, 26.0, seed)).unwrap();
        hits += usize::from(j == 4);
        picks.push(j);
    }
    assert!(hits >= 8, "picked {picks:?}");
}

#[test]
fn pure_noise_prefers_fewer_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<Option<f64>>> {
        (0..90)
            .map(|_| {
                (0..3)
                    .map(|_| {
                        rng.random_bool(0.8)
                            .then(|| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    })
                    .collect()
            })
            .collect()
    };
    let series = (0..40)
        .map(|i| cyhmm::IndividualSeries::from_rows(format!("n{i}"), &rows(&mut rng)).unwrap())
        .collect();
    let names = (0..3).map(|k| format!("f{k}")).collect();
    let ds = TimeSeriesDataset::new(series, names, FeatureKind::Continuous).unwrap();
    let j = select_state_count(&ds, &[2, 4], 3, &quick(2, 30.0, 1)).unwrap();
    assert_eq!(j, 2);
}

fn moderate(seed: u64) -> SimulationConfig {
    SimulationConfig {
        n_individuals: 100,
        t_max: 150,
        n_features: 5,
        sigma_noise: 0.5,
        p_missing: 0.3,
        seed,
        ..SimulationConfig::default()
    }
}

#[test]
fn modal_cycle_length_near_truth() {
    let sim = simulate(&moderate(41)).unwrap();
    let fit = em_fit(&quick(4, 30.0, 0), &sim.dataset).unwrap();
    let mode = cycle_lengths(&fit.model, &sim.dataset)
        .unwrap()
        .population_mode
        .unwrap();
    assert!((mode as i64 - 30).abs() <= 2, "mode {mode}");
}

/// Cyclic order of `peaks` (positions on a circle), as feature indices,
/// rotated to start at feature `start`.
fn cyclic_order(peaks: &[f64], keep: &[usize], start: usize) -> Vec<usize> {
    let mut order = keep.to_vec();
    order.sort_by(|&a, &b| peaks[a].total_cmp(&peaks[b]));
    let at = order.iter().position(|&k| k == start).unwrap();
    order.rotate_left(at);
    order
}

fn circular_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

#[test]
fn trajectory_peaks_follow_generator_phases() {
    let cfg = SimulationConfig {
        n_features: 6,
        sigma_noise: 0.2,
        ..moderate(43)
    };
    let sim = simulate(&cfg).unwrap();
    let fit = em_fit(&quick(8, 30.0, 0), &sim.dataset).unwrap();
    let report = feature_trajectories(&fit.model, 60).unwrap();
    let len = report.cycle_length;

    // Peak of offset + a·sin(2πφ + phase) sits at φ = (π/2 − phase) / 2π.
    let truth: Vec<f64> = sim
        .population
        .iter()
        .map(|c| ((FRAC_PI_2 - c.phase) / TAU).rem_euclid(1.0))
        .collect();
    let fitted: Vec<f64> = (0..cfg.n_features)
        .map(|k| {
            let t = (0..len)
                .max_by(|&a, &b| report.values[a][k].total_cmp(&report.values[b][k]))
                .unwrap();
            t as f64 / len as f64
        })
        .collect();
    // Features whose true peaks are closer than one state's span cannot be
    // ordered by an 8-state model.
    let mut keep: Vec<usize> = Vec::new();
    for k in 0..cfg.n_features {
        if keep
            .iter()
            .all(|&o| circular_gap(truth[k], truth[o]) >= 1.0 / 8.0)
        {
            keep.push(k);
        }
    }
    assert!(keep.len() >= 3, "fixture too crowded: {truth:?}");
    assert_eq!(
        cyclic_order(&fitted, &keep, keep[0]),
        cyclic_order(&truth, &keep, keep[0])
    );
}

#[test]
fn second_cluster_gains_most() {
    let base = SimulationConfig {
        n_individuals: 50,
        t_max: 120,
        sigma_noise: 0.5,
        p_missing: 0.3,
        ..SimulationConfig::default()
    };
    let groups = [
        SimulationConfig {
            cycle_length: 20.0,
            seed: 61,
            ..base.clone()
        },
        SimulationConfig {
            cycle_length: 40.0,
            seed: 62,
            ..base
        },
    ];
    let (sim, _) = simulate_groups(&groups).unwrap();
    let config = ClusterConfig {
        fit: quick(4, 30.0, 0),
        ..ClusterConfig::default()
    };
    let rows = select_cluster_count(&sim.dataset, &[1, 2, 3, 4], 0.2, &config).unwrap();
    let ll: Vec<f64> = rows.iter().map(|r| r.train_loglik).collect();
    let (g12, g23) = (ll[1] - ll[0], ll[2] - ll[1]);
    assert!(g12 > 0.0 && g12 >= 2.0 * g23, "gains {g12} vs {g23}");
}

#[test]
fn autocorrelation_on_low_noise_continuous_benchmark() {
    let grid = BenchmarkGrid {
        // Low observation noise and little cycle-to-cycle variation.
        sigma_noise: (5.0, 5.0),
        sigma_within: (1.0, 2.0),
        p_missing: (0.0, 0.2),
        ..BenchmarkGrid::default()
    };
    let sims: Vec<_> = grid
        .sample(FeatureKind::Continuous, 5, 71)
        .unwrap()
        .iter()
        .map(|c| simulate(c).unwrap())
        .collect();
    let report = benchmark(
        &sims,
        &[Method::Autocorrelation],
        &BenchmarkOptions::default(),
    )
    .unwrap();
    let mut errors = Vec::new();
    for t in &report.trials {
        let est = &t.estimates[0].estimates;
        for (truth, e) in t.truth.iter().zip(est) {
            if let Some(e) = e {
                errors.push((e - truth).abs());
            }
        }
    }
    let med = median(&errors).unwrap();
    assert!(med <= 2.0, "median error {med}");
    assert_eq!(error_table(&report.trials)[0].method, "autocorrelation");
}
