// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cycle characterization from a fitted model.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureKind, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::inference::{viterbi, ViterbiPath};
use crate::model::{CyhmmModel, EmissionParams};
use crate::stats;

/// Name of the synthetic trajectory column for binary models.
pub const NO_FEATURES_LOGGED: &str = "no_features_logged";

/// Cycle statistics of one individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualCycles {
    pub id: String,
    /// Timesteps at which the decoded path enters the boundary state.
    pub entries: Vec<usize>,
    /// Differences between consecutive entries.
    pub gaps: Vec<usize>,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub mode: Option<usize>,
}

impl IndividualCycles {
    fn new(id: String, entries: Vec<usize>) -> Self {
        let gaps: Vec<usize> = entries.windows(2).map(|w| w[1] - w[0]).collect();
        let as_f64: Vec<f64> = gaps.iter().map(|&g| g as f64).collect();
        let median = stats::median(&as_f64);
        IndividualCycles {
            id,
            mean: stats::mean(&as_f64),
            median,
            mode: median.and_then(|m| stats::mode_near(&gaps, m)),
            entries,
            gaps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleLengthReport {
    /// State whose entries mark cycle starts.
    pub boundary_state: usize,
    pub per_individual: Vec<IndividualCycles>,
    /// Count of individuals per modal cycle length.
    pub histogram: BTreeMap<usize, usize>,
    pub population_mode: Option<usize>,
}

/// Timesteps `t > 0` at which `path` enters `state` from the preceding
/// state's last substate.
pub fn state_entries(path: &ViterbiPath, state: usize) -> Vec<usize> {
    path.path
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0].1 == 0 && w[1].0 == state)
        .map(|(t, _)| t + 1)
        .collect()
}

/// Per-individual cycle lengths measured as return times to `boundary_state`
/// along each individual's Viterbi path.
pub fn cycle_lengths_at(
    model: &CyhmmModel,
    ds: &TimeSeriesDataset,
    boundary_state: usize,
) -> Result<CycleLengthReport> {
    if boundary_state >= model.n_states() {
        return Err(Error::param(format!(
            "boundary state {boundary_state} out of range for {} states",
            model.n_states()
        )));
    }
    if model.kind() != ds.kind {
        return Err(Error::WrongKind {
            expected: model.kind(),
            found: ds.kind,
        });
    }
    let per_individual: Vec<IndividualCycles> = ds
        .series
        .par_iter()
        .map(|s| {
            let path = viterbi(model, s)?;
            Ok(IndividualCycles::new(
                s.id.clone(),
                state_entries(&path, boundary_state),
            ))
        })
        .collect::<Result<_>>()?;
    let modes: Vec<usize> = per_individual.iter().filter_map(|c| c.mode).collect();
    let center = stats::median(&modes.iter().map(|&m| m as f64).collect::<Vec<_>>());
    let mut histogram = BTreeMap::new();
    for &m in &modes {
        *histogram.entry(m).or_insert(0) += 1;
    }
    Ok(CycleLengthReport {
        boundary_state,
        per_individual,
        histogram,
        population_mode: center.and_then(|c| stats::mode_near(&modes, c)),
    })
}

/// Cycle lengths with the first state as the cycle boundary.
pub fn cycle_lengths(model: &CyhmmModel, ds: &TimeSeriesDataset) -> Result<CycleLengthReport> {
    cycle_lengths_at(model, ds, 0)
}

/// Expected feature values along one predicted cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub horizon: usize,
    /// `horizon × K` expected value conditional on the feature being observed.
    pub values: Vec<Vec<f64>>,
    /// Binary models: probability that nothing is logged at each step.
    pub no_features_logged: Option<Vec<f64>>,
    /// `horizon × J` state occupancy.
    pub state_probs: Vec<Vec<f64>>,
    /// Averaging horizon for variability: `min(horizon, round(cycle length))`.
    pub cycle_length: usize,
    /// Variability per feature; `None` where the trajectory mean is ~0.
    pub delta: Vec<Option<f64>>,
}

/// Propagates the chain from the most likely entry substate of the first
/// state and records expected feature values at every step.
pub fn feature_trajectories(model: &CyhmmModel, horizon: usize) -> Result<TrajectoryReport> {
    if horizon == 0 {
        return Err(Error::param("trajectory horizon must be at least 1"));
    }
    let topo = model.topology();
    let (j_count, k) = (model.n_states(), model.n_features());
    let width = model.d_max() + 1;
    let start_d = model
        .duration_pmf(0)
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (d, &p)| {
            if p > best.1 {
                (d, p)
            } else {
                best
            }
        })
        .0;
    let mut dist = vec![0.0; model.n_substates()];
    dist[model.substate(0, start_d)] = 1.0;

    let mut values = Vec::with_capacity(horizon);
    let mut state_probs = Vec::with_capacity(horizon);
    let mut no_log = match model.emissions() {
        EmissionParams::Binary { .. } => Some(Vec::with_capacity(horizon)),
        EmissionParams::Continuous { .. } => None,
    };
    for _ in 0..horizon {
        let occ: Vec<f64> = (0..j_count)
            .map(|j| dist[j * width..(j + 1) * width].iter().sum())
            .collect();
        let row: Vec<f64> = (0..k)
            .map(|f| {
                occ.iter()
                    .enumerate()
                    .map(|(j, p)| p * model.emissions().expected_value(j, f))
                    .sum()
            })
            .collect();
        if let (Some(nl), EmissionParams::Binary { p_obs, .. }) =
            (no_log.as_mut(), model.emissions())
        {
            nl.push(occ.iter().zip(p_obs).map(|(p, po)| p * (1.0 - po)).sum());
        }
        values.push(row);
        state_probs.push(occ);
        dist = topo.propagate(&dist);
    }
    let cycle_length = (model.expected_cycle_length().round() as usize).clamp(1, horizon);
    let delta = variability_vector(&values, cycle_length);
    Ok(TrajectoryReport {
        horizon,
        values,
        no_features_logged: no_log,
        state_probs,
        cycle_length,
        delta,
    })
}

/// `Δ_k = (1/L) Σ_{t<L} |(V_tk − μ_k) / μ_k|` with `μ_k` the mean of the
/// first `L` rows. `None` for features whose mean is below 1e-12 in
/// magnitude.
pub fn variability_vector(values: &[Vec<f64>], cycle_length: usize) -> Vec<Option<f64>> {
    let k = values.first().map_or(0, Vec::len);
    let rows = &values[..cycle_length.min(values.len())];
    let l = rows.len() as f64;
    (0..k)
        .map(|f| {
            let mu = rows.iter().map(|r| r[f]).sum::<f64>() / l;
            if mu.abs() < 1e-12 {
                None
            } else {
                Some(rows.iter().map(|r| ((r[f] - mu) / mu).abs()).sum::<f64>() / l)
            }
        })
        .collect()
}

/// Features ranked by decreasing variability; ties keep feature order.
/// Features with an undefined variability are left out with a warning.
pub fn feature_variability(report: &TrajectoryReport) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = Vec::with_capacity(report.delta.len());
    for (f, d) in report.delta.iter().enumerate() {
        match d {
            Some(d) => ranked.push((f, *d)),
            None => {
                log::warn!("feature {f} has a near-zero trajectory mean; variability undefined")
            }
        }
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked
}

/// Writes the trajectories as tidy `t,feature,expected_value` rows.
pub fn write_trajectories_csv<W: Write>(
    report: &TrajectoryReport,
    feature_names: &[String],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "feature", "expected_value"])?;
    for (t, row) in report.values.iter().enumerate() {
        for (name, v) in feature_names.iter().zip(row) {
            w.write_record([t.to_string(), name.clone(), v.to_string()])?;
        }
        if let Some(nl) = &report.no_features_logged {
            w.write_record([
                t.to_string(),
                NO_FEATURES_LOGGED.to_owned(),
                nl[t].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<trajectory csv>", e))?;
    Ok(())
}

/// Writes `rank,feature,delta` rows.
pub fn write_variability_csv<W: Write>(
    ranked: &[(usize, f64)],
    feature_names: &[String],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["rank", "feature", "delta"])?;
    for (rank, (f, d)) in ranked.iter().enumerate() {
        w.write_record([
            (rank + 1).to_string(),
            feature_names[*f].clone(),
            d.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<variability csv>", e))?;
    Ok(())
}

/// Kind-specific sanity: binary expectations must stay probabilities.
pub fn check_trajectory_domain(report: &TrajectoryReport, kind: FeatureKind) -> bool {
    kind == FeatureKind::Continuous
        || report
            .values
            .iter()
            .flatten()
            .all(|v| (-1e-12..=1.0 + 1e-12).contains(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::IndividualSeries;
    use crate::model::DurationFamily;

    fn binary_model(rates: Vec<f64>, emit: Vec<Vec<f64>>, d_max: usize) -> CyhmmModel {
        let j = rates.len();
        CyhmmModel::new(
            DurationFamily::Poisson { rates },
            d_max,
            EmissionParams::Binary {
                rate: emit,
                p_obs: vec![0.9; j],
            },
        )
        .unwrap()
    }

    #[test]
    fn forced_gaps_of_seven() {
        // Tight emissions pin the decoded path to the 3-on/4-off pattern.
        let model = CyhmmModel::new(
            DurationFamily::Poisson {
                rates: vec![2.0, 3.0],
            },
            3,
            EmissionParams::Continuous {
                mean: vec![vec![0.0], vec![10.0]],
                std: vec![vec![0.1], vec![0.1]],
                p_obs: vec![vec![1.0], vec![1.0]],
            },
        )
        .unwrap();
        let mut rows = Vec::new();
        for _ in 0..5 {
            rows.extend(std::iter::repeat_n(vec![Some(0.0)], 3));
            rows.extend(std::iter::repeat_n(vec![Some(10.0)], 4));
        }
        let ds = TimeSeriesDataset::new(
            vec![IndividualSeries::from_rows("a", &rows).unwrap()],
            vec!["x".into()],
            FeatureKind::Continuous,
        )
        .unwrap();
        let report = cycle_lengths(&model, &ds).unwrap();
        let ind = &report.per_individual[0];
        assert_eq!(ind.entries, vec![7, 14, 21, 28]);
        assert!(ind.gaps.iter().all(|&g| g == 7));
        assert_eq!(ind.mode, Some(7));
        assert_eq!(report.population_mode, Some(7));
        assert_eq!(report.histogram.get(&7), Some(&1));
    }

    #[test]
    fn short_series_has_no_gaps() {
        let model = binary_model(vec![5.0, 5.0], vec![vec![0.1], vec![0.9]], 15);
        let rows = vec![vec![Some(0.0)]; 6];
        let ds = TimeSeriesDataset::new(
            vec![IndividualSeries::from_rows("a", &rows).unwrap()],
            vec!["x".into()],
            FeatureKind::Binary,
        )
        .unwrap();
        let report = cycle_lengths(&model, &ds).unwrap();
        assert!(report.per_individual[0].gaps.is_empty());
        assert!(report.histogram.is_empty());
        assert_eq!(report.population_mode, None);
    }

    #[test]
    fn single_state_trajectory_is_constant() {
        let model = binary_model(vec![4.0], vec![vec![0.3, 0.7]], 12);
        let report = feature_trajectories(&model, 40).unwrap();
        for row in &report.values {
            assert!((row[0] - 0.3).abs() < 1e-12 && (row[1] - 0.7).abs() < 1e-12);
        }
        assert_eq!(report.delta, vec![Some(0.0), Some(0.0)]);
        let nl = report.no_features_logged.as_ref().unwrap();
        assert!(nl.iter().all(|v| (v - 0.1).abs() < 1e-12));
    }

    #[test]
    fn two_state_trajectory_oscillates() {
        let model = binary_model(vec![3.0, 5.0], vec![vec![1.0], vec![0.0]], 20);
        let report = feature_trajectories(&model, 60).unwrap();
        let v: Vec<f64> = report.values.iter().map(|r| r[0]).collect();
        assert!(v[0] > 0.99);
        // Expected cycle length λ1 + λ2 + 2 = 10: the next peak near t = 10.
        let trough = (0..10).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert!(v[trough] < 0.2);
        let peak = (7..14).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert!((9..=12).contains(&peak), "peak at {peak}");
        assert!(check_trajectory_domain(&report, FeatureKind::Binary));
        for probs in &report.state_probs {
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(probs.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn variability_arithmetic() {
        let values = vec![vec![1.0, 4.0, 0.0], vec![3.0, 4.0, 0.0]];
        let delta = variability_vector(&values, 2);
        assert_eq!(delta, vec![Some(0.5), Some(0.0), None]);
    }

    #[test]
    fn ranking_sorted_and_skips_undefined() {
        let report = TrajectoryReport {
            horizon: 1,
            values: vec![vec![0.0; 4]],
            no_features_logged: None,
            state_probs: vec![vec![1.0]],
            cycle_length: 1,
            delta: vec![Some(0.2), None, Some(0.5), Some(0.2)],
        };
        assert_eq!(
            feature_variability(&report),
            vec![(2, 0.5), (0, 0.2), (3, 0.2)]
        );
    }

    #[test]
    fn variability_is_scale_invariant() {
        let model = CyhmmModel::new(
            DurationFamily::Poisson {
                rates: vec![3.0, 6.0, 2.0],
            },
            20,
            EmissionParams::Continuous {
                mean: vec![vec![1.0, -3.0], vec![2.0, -1.0], vec![4.0, -2.0]],
                std: vec![vec![1.0; 2]; 3],
                p_obs: vec![vec![0.5; 2]; 3],
            },
        )
        .unwrap();
        let report = feature_trajectories(&model, 30).unwrap();
        let scaled: Vec<Vec<f64>> = report
            .values
            .iter()
            .map(|r| vec![r[0] * 7.5, r[1] * 0.01])
            .collect();
        let a = variability_vector(&report.values, report.cycle_length);
        let b = variability_vector(&scaled, report.cycle_length);
        for (x, y) in a.iter().zip(&b) {
            assert!((x.unwrap() - y.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_horizon_rejected() {
        let model = binary_model(vec![1.0], vec![vec![0.5]], 3);
        assert!(feature_trajectories(&model, 0).is_err());
    }
}
