// SPDX-License-Identifier: MIT OR Apache-2.0

//! EM fitting over a population of series.
//!
//! The E-step runs forward-backward on every series in parallel and returns
//! one sufficient-statistic bundle per series. Bundles are reduced in
//! individual order so results do not depend on the thread count.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureKind, IndividualSeries, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::inference::{forward_backward_from_emissions, loglik};
use crate::model::{
    poisson_quantile, CyhmmModel, DurationFamily, DurationKind, EmissionParams, LAMBDA_FLOOR,
    P_FLOOR,
};

/// Fraction of Poisson mass that `d_max` must cover.
pub const DURATION_MASS: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Number of latent states `J`.
    pub n_states: usize,
    /// Hypothesized cycle length, used when `init_grid` is empty.
    pub cycle_length: f64,
    /// Cycle lengths to initialize from; the best final fit wins.
    pub init_grid: Vec<f64>,
    pub max_iters: usize,
    /// Stop when the relative change of total log-likelihood drops below this.
    pub rel_tol: f64,
    pub seed: u64,
    pub duration_family: DurationKind,
    /// Fixed truncation point. When unset it is derived from the largest
    /// initial rate, see [`FitConfig::resolve_d_max`].
    pub d_max: Option<usize>,
    /// Multiplier on the largest initial rate before taking the Poisson
    /// quantile, leaving room for durations to grow during EM.
    pub d_max_headroom: f64,
    /// Random emission starts tried per hypothesized cycle length. Each runs
    /// `restart_iters` EM iterations and only the best is run to convergence.
    pub restarts: usize,
    pub restart_iters: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            n_states: 4,
            cycle_length: 30.0,
            init_grid: Vec::new(),
            max_iters: 100,
            rel_tol: 1e-5,
            seed: 0,
            duration_family: DurationKind::Poisson,
            d_max: None,
            d_max_headroom: 2.0,
            restarts: 4,
            restart_iters: 10,
        }
    }
}

impl FitConfig {
    /// The cycle lengths EM will start from.
    pub fn init_lengths(&self) -> Vec<f64> {
        if self.init_grid.is_empty() {
            vec![self.cycle_length]
        } else {
            self.init_grid.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 {
            return Err(Error::param("n_states must be at least 1"));
        }
        if self.max_iters == 0 {
            return Err(Error::param("max_iters must be at least 1"));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::param("rel_tol must be positive"));
        }
        for l0 in self.init_lengths() {
            if !(l0 >= self.n_states as f64) {
                return Err(Error::param(format!(
                    "hypothesized cycle length {l0} is shorter than the state count {}",
                    self.n_states
                )));
            }
        }
        if !(self.d_max_headroom >= 1.0) {
            return Err(Error::param("d_max_headroom must be at least 1"));
        }
        if self.restarts == 0 {
            return Err(Error::param("restarts must be at least 1"));
        }
        Ok(())
    }

    /// Initial per-state rate for a hypothesized cycle length.
    pub fn initial_rate(&self, l0: f64) -> f64 {
        (l0 / self.n_states as f64 - 1.0).max(LAMBDA_FLOOR)
    }

    /// Truncation point shared by every initialization in the grid.
    pub fn resolve_d_max(&self) -> usize {
        if let Some(d) = self.d_max {
            return d;
        }
        let grid = self.init_lengths();
        let l_max = grid.iter().copied().fold(0.0, f64::max);
        let rate = self.initial_rate(l_max) * self.d_max_headroom;
        let cap = (4.0 * l_max).round().max(1.0) as usize;
        poisson_quantile(rate, DURATION_MASS).clamp(1, cap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: CyhmmModel,
    /// Total log-likelihood before each M-step; the last entry belongs to
    /// `model`.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub chosen_init: f64,
    /// Final total log-likelihood for every initialization tried.
    pub init_logliks: Vec<(f64, f64)>,
}

impl FitResult {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace is never empty")
    }
}

/// Per-feature lower bound on fitted standard deviations.
#[derive(Debug, Clone)]
pub struct SigmaFloor(pub Vec<f64>);

impl SigmaFloor {
    pub fn from_dataset(ds: &TimeSeriesDataset) -> Self {
        SigmaFloor(
            ds.feature_moments()
                .into_iter()
                .map(|(_, sd)| if sd > 0.0 { 1e-3 * sd } else { 1e-6 })
                .collect(),
        )
    }
}

/// Half-width, in global standard deviations, of the uniform draw around each
/// feature mean that seeds per-state emissions.
pub const INIT_SPREAD: f64 = 2.0;

/// Builds the starting model for hypothesized cycle length `l0`.
pub fn initialize(config: &FitConfig, ds: &TimeSeriesDataset, l0: f64) -> Result<CyhmmModel> {
    config.validate()?;
    if !(l0 >= config.n_states as f64) {
        return Err(Error::param(format!(
            "hypothesized cycle length {l0} is shorter than the state count {}",
            config.n_states
        )));
    }
    let j_count = config.n_states;
    let k = ds.n_features();
    let rate = config.initial_rate(l0);
    let durations = DurationFamily::with_mean(config.duration_family, &vec![rate; j_count]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let moments = ds.feature_moments();

    let emissions = match ds.kind {
        FeatureKind::Continuous => {
            let floor = SigmaFloor::from_dataset(ds);
            let mut observed = vec![0usize; k];
            let mut total = 0usize;
            for s in &ds.series {
                total += s.len();
                for t in 0..s.len() {
                    for (f, o) in observed.iter_mut().enumerate() {
                        *o += usize::from(s.is_observed(t, f));
                    }
                }
            }
            let p_obs: Vec<f64> = observed
                .iter()
                .map(|&o| (o as f64 / total as f64).clamp(P_FLOOR, 1.0 - P_FLOOR))
                .collect();
            let mut mean = vec![vec![0.0; k]; j_count];
            for row in mean.iter_mut() {
                for (f, m) in row.iter_mut().enumerate() {
                    let (mu, sd) = moments[f];
                    *m = mu + rng.random_range(-INIT_SPREAD..=INIT_SPREAD) * sd;
                }
            }
            let std = vec![
                moments
                    .iter()
                    .zip(&floor.0)
                    .map(|(&(_, sd), &fl)| sd.max(fl))
                    .collect::<Vec<_>>();
                j_count
            ];
            EmissionParams::Continuous {
                mean,
                std,
                p_obs: vec![p_obs; j_count],
            }
        }
        FeatureKind::Binary => {
            let mut logged = 0usize;
            let mut total = 0usize;
            for s in &ds.series {
                total += s.len();
                logged += (0..s.len()).filter(|&t| s.any_observed(t)).count();
            }
            let p_obs = (logged as f64 / total as f64).clamp(P_FLOOR, 1.0 - P_FLOOR);
            let mut rate = vec![vec![0.0; k]; j_count];
            for row in rate.iter_mut() {
                for (f, r) in row.iter_mut().enumerate() {
                    let base = moments[f].0;
                    let sd = (base * (1.0 - base)).sqrt();
                    *r = (base + rng.random_range(-INIT_SPREAD..=INIT_SPREAD) * sd)
                        .clamp(P_FLOOR, 1.0 - P_FLOOR);
                }
            }
            EmissionParams::Binary {
                rate,
                p_obs: vec![p_obs; j_count],
            }
        }
    };
    CyhmmModel::new(durations, config.resolve_d_max(), emissions)
}

/// Sufficient statistics of one or more series.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub loglik: f64,
    /// `J × (d_max+1)` expected entry counts.
    pub entries: Vec<f64>,
    /// Σ_t p_j(t) over all timesteps, per state.
    pub weight: Vec<f64>,
    /// Continuous: Σ p_j(t)·[observed] per `(j, k)`.
    /// Binary: Σ p_j(t)·[row logged] per `j` (stored at `k = 0`).
    pub weight_obs: Vec<f64>,
    /// Σ p_j(t)·x_tk over observed cells, per `(j, k)`.
    pub sum: Vec<f64>,
    /// Σ p_j(t)·x_tk² over observed cells (continuous only).
    pub sum_sq: Vec<f64>,
}

impl SufficientStats {
    fn zeros(model: &CyhmmModel) -> Self {
        let (j, k) = (model.n_states(), model.n_features());
        SufficientStats {
            loglik: 0.0,
            entries: vec![0.0; model.n_substates()],
            weight: vec![0.0; j],
            weight_obs: vec![0.0; j * k],
            sum: vec![0.0; j * k],
            sum_sq: vec![0.0; j * k],
        }
    }

    fn add(&mut self, other: &SufficientStats) {
        self.loglik += other.loglik;
        let pairs = [
            (&mut self.entries, &other.entries),
            (&mut self.weight, &other.weight),
            (&mut self.weight_obs, &other.weight_obs),
            (&mut self.sum, &other.sum),
            (&mut self.sum_sq, &other.sum_sq),
        ];
        for (a, b) in pairs {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// E-step for a single series.
pub fn series_statistics(model: &CyhmmModel, series: &IndividualSeries) -> Result<SufficientStats> {
    let emis = model.emission_matrix(series)?;
    let post = forward_backward_from_emissions(model, &emis)?;
    let (j_count, k) = (model.n_states(), model.n_features());
    let mut st = SufficientStats::zeros(model);
    st.loglik = post.loglik;
    st.entries.copy_from_slice(&post.entry_counts);
    let binary = model.kind() == FeatureKind::Binary;
    for t in 0..series.len() {
        let (values, observed) = series.row(t);
        let logged = observed.iter().any(|&o| o);
        for j in 0..j_count {
            let w = post.marginal(t, j);
            st.weight[j] += w;
            if binary {
                if logged {
                    st.weight_obs[j * k] += w;
                    for f in 0..k {
                        st.sum[j * k + f] += w * values[f];
                    }
                }
            } else {
                for f in 0..k {
                    if observed[f] {
                        let x = values[f];
                        st.weight_obs[j * k + f] += w;
                        st.sum[j * k + f] += w * x;
                        st.sum_sq[j * k + f] += w * x * x;
                    }
                }
            }
        }
    }
    Ok(st)
}

/// Parallel E-step with an ordered reduction.
pub fn expectation(model: &CyhmmModel, ds: &TimeSeriesDataset) -> Result<SufficientStats> {
    let bundles: Vec<SufficientStats> = ds
        .series
        .par_iter()
        .map(|s| series_statistics(model, s))
        .collect::<Result<_>>()?;
    let mut total = SufficientStats::zeros(model);
    for b in &bundles {
        total.add(b);
    }
    Ok(total)
}

fn truncated_poisson_mean(rate: f64, d_max: usize) -> f64 {
    let fam = DurationFamily::Poisson { rates: vec![rate] };
    crate::model::duration_pmf(&fam, 0, d_max)
        .iter()
        .enumerate()
        .map(|(d, p)| d as f64 * p)
        .sum()
}

fn truncated_geometric_mean(q: f64, d_max: usize) -> f64 {
    let fam = DurationFamily::Geometric {
        probs: vec![1.0 - q],
    };
    crate::model::duration_pmf(&fam, 0, d_max)
        .iter()
        .enumerate()
        .map(|(d, p)| d as f64 * p)
        .sum()
}

/// Solves `mean(x) = target` for an increasing `mean` on `[lo, hi]`.
fn bisect(
    mean: impl Fn(f64) -> f64,
    target: f64,
    mut lo: f64,
    mut hi: f64,
    log_scale: bool,
) -> f64 {
    for _ in 0..200 {
        let mid = if log_scale {
            (lo * hi).sqrt()
        } else {
            0.5 * (lo + hi)
        };
        if mean(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Duration M-step for one state from its expected entry counts.
///
/// The target is the count-weighted mean remaining duration. The parameter
/// is the maximum-likelihood value for the distribution truncated at
/// `d_max`, which matches the weighted mean and coincides with
/// `λ = Σ C_d·d / Σ C_d` (Poisson) or `p = 1 / (1 + mean)` (geometric)
/// whenever truncation mass is negligible.
pub fn duration_update(kind: DurationKind, counts: &[f64], previous: f64) -> f64 {
    let d_max = counts.len() - 1;
    let total: f64 = counts.iter().sum();
    if !(total > 1e-300) {
        return previous;
    }
    let target = counts
        .iter()
        .enumerate()
        .map(|(d, c)| d as f64 * c)
        .sum::<f64>()
        / total;
    match kind {
        DurationKind::Poisson => {
            if d_max == 0 {
                return previous;
            }
            let hi_rate = 1e3 * (d_max as f64 + 1.0);
            if target >= truncated_poisson_mean(hi_rate, d_max) {
                return hi_rate;
            }
            if target <= truncated_poisson_mean(LAMBDA_FLOOR, d_max) {
                return LAMBDA_FLOOR;
            }
            bisect(
                |r| truncated_poisson_mean(r, d_max),
                target,
                LAMBDA_FLOOR,
                hi_rate,
                true,
            )
        }
        DurationKind::Geometric => {
            if d_max == 0 {
                return previous;
            }
            let (q_lo, q_hi) = (P_FLOOR, 1.0 - P_FLOOR);
            let q = if target <= truncated_geometric_mean(q_lo, d_max) {
                q_lo
            } else if target >= truncated_geometric_mean(q_hi, d_max) {
                q_hi
            } else {
                bisect(
                    |q| truncated_geometric_mean(q, d_max),
                    target,
                    q_lo,
                    q_hi,
                    false,
                )
            };
            (1.0 - q).clamp(P_FLOOR, 1.0 - P_FLOOR)
        }
    }
}

/// M-step: new model from accumulated statistics.
pub fn maximization(
    model: &CyhmmModel,
    stats: &SufficientStats,
    floor: &SigmaFloor,
) -> Result<CyhmmModel> {
    let (j_count, k) = (model.n_states(), model.n_features());
    let width = model.d_max() + 1;
    let kind = model.durations().kind();
    let previous: Vec<f64> = match model.durations() {
        DurationFamily::Poisson { rates } => rates.clone(),
        DurationFamily::Geometric { probs } => probs.clone(),
    };
    let params: Vec<f64> = (0..j_count)
        .map(|j| {
            duration_update(
                kind,
                &stats.entries[j * width..(j + 1) * width],
                previous[j],
            )
        })
        .collect();
    let durations = match kind {
        DurationKind::Poisson => DurationFamily::Poisson { rates: params },
        DurationKind::Geometric => DurationFamily::Geometric { probs: params },
    };
    let clamp = |p: f64| p.clamp(P_FLOOR, 1.0 - P_FLOOR);
    const TINY: f64 = 1e-300;

    let emissions = match model.emissions() {
        EmissionParams::Continuous { mean, std, p_obs } => {
            let (mut mean, mut std, mut p_obs) = (mean.clone(), std.clone(), p_obs.clone());
            for j in 0..j_count {
                for f in 0..k {
                    let i = j * k + f;
                    if stats.weight[j] > TINY {
                        p_obs[j][f] = clamp(stats.weight_obs[i] / stats.weight[j]);
                    }
                    let w = stats.weight_obs[i];
                    if w > TINY {
                        let mu = stats.sum[i] / w;
                        let var = (stats.sum_sq[i] / w - mu * mu).max(0.0);
                        mean[j][f] = mu;
                        std[j][f] = var.sqrt().max(floor.0[f]);
                    }
                }
            }
            EmissionParams::Continuous { mean, std, p_obs }
        }
        EmissionParams::Binary { rate, p_obs } => {
            let (mut rate, mut p_obs) = (rate.clone(), p_obs.clone());
            for j in 0..j_count {
                if stats.weight[j] > TINY {
                    p_obs[j] = clamp(stats.weight_obs[j * k] / stats.weight[j]);
                }
                let w = stats.weight_obs[j * k];
                if w > TINY {
                    for f in 0..k {
                        rate[j][f] = clamp(stats.sum[j * k + f] / w);
                    }
                }
            }
            EmissionParams::Binary { rate, p_obs }
        }
    };
    CyhmmModel::new(durations, model.d_max(), emissions)
}

fn check_compatible(model: &CyhmmModel, ds: &TimeSeriesDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if model.kind() != ds.kind {
        return Err(Error::WrongKind {
            expected: model.kind(),
            found: ds.kind,
        });
    }
    if model.n_features() != ds.n_features() {
        return Err(Error::DimensionMismatch {
            expected: model.n_features(),
            found: ds.n_features(),
        });
    }
    Ok(())
}

/// Runs EM from `start` until convergence or `max_iters` M-steps.
pub fn em_fit_from(
    start: CyhmmModel,
    ds: &TimeSeriesDataset,
    max_iters: usize,
    rel_tol: f64,
) -> Result<FitResult> {
    check_compatible(&start, ds)?;
    let floor = SigmaFloor::from_dataset(ds);
    let mut model = start;
    let mut trace = Vec::with_capacity(max_iters + 1);
    let mut converged = false;
    let started = Instant::now();
    for iteration in 0..=max_iters {
        let stats = expectation(&model, ds)?;
        if stats.loglik.is_nan() {
            return Err(Error::NanLoglik { iteration });
        }
        log::debug!(
            "EM iteration {iteration}: loglik {:.6} ({:.2?} elapsed)",
            stats.loglik,
            started.elapsed()
        );
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if ((stats.loglik - prev) / prev.abs().max(1e-300)).abs() < rel_tol {
                converged = true;
            }
        }
        trace.push(stats.loglik);
        if converged || iteration == max_iters {
            break;
        }
        model = maximization(&model, &stats, &floor)?;
    }
    Ok(FitResult {
        model,
        converged,
        chosen_init: f64::NAN,
        init_logliks: Vec::new(),
        loglik_trace: trace,
    })
}

/// EM from one hypothesized cycle length. With several restarts, each random
/// start gets a short run and the best one continues; its trace is kept whole.
fn fit_one_length(
    config: &FitConfig,
    ds: &TimeSeriesDataset,
    l0: f64,
    index: u64,
) -> Result<FitResult> {
    let start_for = |r: usize| {
        let cfg = FitConfig {
            seed: config
                .seed
                .wrapping_add(index)
                .wrapping_add((r as u64) << 32),
            ..config.clone()
        };
        initialize(&cfg, ds, l0)
    };
    if config.restarts == 1 || config.restart_iters >= config.max_iters {
        return em_fit_from(start_for(0)?, ds, config.max_iters, config.rel_tol);
    }
    let mut best: Option<FitResult> = None;
    for r in 0..config.restarts {
        let short = em_fit_from(start_for(r)?, ds, config.restart_iters, config.rel_tol)?;
        log::debug!(
            "L0={l0} start {r}: loglik {:.4} after screening",
            short.final_loglik()
        );
        if best
            .as_ref()
            .is_none_or(|b| short.final_loglik() > b.final_loglik())
        {
            best = Some(short);
        }
    }
    let mut fit = best.expect("at least one restart");
    if fit.converged {
        return Ok(fit);
    }
    let used = fit.loglik_trace.len() - 1;
    let rest = em_fit_from(fit.model, ds, config.max_iters - used, config.rel_tol)?;
    fit.loglik_trace.extend_from_slice(&rest.loglik_trace[1..]);
    fit.model = rest.model;
    fit.converged = rest.converged;
    Ok(fit)
}

/// Fits a CyHMM to the dataset, trying every initialization in the config's
/// grid and keeping the best final log-likelihood.
pub fn em_fit(config: &FitConfig, ds: &TimeSeriesDataset) -> Result<FitResult> {
    config.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut best: Option<FitResult> = None;
    let mut init_logliks = Vec::new();
    for (i, l0) in config.init_lengths().into_iter().enumerate() {
        let mut fit = fit_one_length(config, ds, l0, i as u64)?;
        fit.chosen_init = l0;
        log::info!(
            "init L0={l0}: final loglik {:.4} after {} iterations (cycle length {:.2})",
            fit.final_loglik(),
            fit.loglik_trace.len(),
            fit.model.expected_cycle_length()
        );
        init_logliks.push((l0, fit.final_loglik()));
        if best
            .as_ref()
            .is_none_or(|b| fit.final_loglik() > b.final_loglik())
        {
            best = Some(fit);
        }
    }
    let mut best = best.expect("init grid is never empty");
    best.init_logliks = init_logliks;
    Ok(best)
}

/// Total log-likelihood of every series under `model`, computed in parallel.
pub fn dataset_loglik(model: &CyhmmModel, ds: &TimeSeriesDataset) -> Result<Vec<f64>> {
    ds.series.par_iter().map(|s| loglik(model, s)).collect()
}

/// Held-out score of one candidate state count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateCountScore {
    pub n_states: usize,
    /// Held-out log-likelihood per observed cell, pooled over folds.
    pub heldout_per_cell: f64,
}

/// Assigns individuals to `folds` groups after a seeded shuffle.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

/// Cross-validated scores for each candidate state count, splitting by
/// individual.
pub fn state_count_scores(
    ds: &TimeSeriesDataset,
    candidates: &[usize],
    folds: usize,
    base: &FitConfig,
) -> Result<Vec<StateCountScore>> {
    if folds < 2 {
        return Err(Error::param("cross-validation needs at least 2 folds"));
    }
    if ds.len() < folds {
        return Err(Error::TooFewIndividuals {
            needed: folds,
            found: ds.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::param("no candidate state counts"));
    }
    let fold = fold_assignment(ds.len(), folds, base.seed);
    let mut scores = Vec::with_capacity(candidates.len());
    for &j in candidates {
        let cfg = FitConfig {
            n_states: j,
            ..base.clone()
        };
        let (mut ll, mut cells) = (0.0, 0usize);
        for f in 0..folds {
            let train: Vec<usize> = (0..ds.len()).filter(|&i| fold[i] != f).collect();
            let test: Vec<usize> = (0..ds.len()).filter(|&i| fold[i] == f).collect();
            let fit = em_fit(&cfg, &ds.subset(&train)?)?;
            let test_ds = ds.subset(&test)?;
            ll += dataset_loglik(&fit.model, &test_ds)?.iter().sum::<f64>();
            cells += test_ds.observed_cells();
        }
        let score = ll / cells.max(1) as f64;
        log::info!("J={j}: held-out loglik per observed cell {score:.6}");
        scores.push(StateCountScore {
            n_states: j,
            heldout_per_cell: score,
        });
    }
    Ok(scores)
}

/// Candidate state count with the best held-out log-likelihood per observed
/// cell. Ties go to the smaller count.
pub fn select_state_count(
    ds: &TimeSeriesDataset,
    candidates: &[usize],
    folds: usize,
    base: &FitConfig,
) -> Result<usize> {
    let mut scores = state_count_scores(ds, candidates, folds, base)?;
    scores.sort_by_key(|s| s.n_states);
    let mut best = &scores[0];
    for s in &scores[1..] {
        if s.heldout_per_cell > best.heldout_per_cell {
            best = s;
        }
    }
    Ok(best.n_states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::sample_from_model;

    fn two_state_truth() -> CyhmmModel {
        CyhmmModel::new(
            DurationFamily::Poisson {
                rates: vec![4.0, 9.0],
            },
            30,
            EmissionParams::Continuous {
                mean: vec![vec![-2.0, 1.0], vec![2.0, -1.0]],
                std: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
                p_obs: vec![vec![0.9, 0.8], vec![0.7, 0.9]],
            },
        )
        .unwrap()
    }

    fn sampled(model: &CyhmmModel, n: usize, len: usize, seed: u64) -> TimeSeriesDataset {
        let series = (0..n)
            .map(|i| sample_from_model(model, len, format!("s{i}"), seed, i as u64).0)
            .collect();
        let names = (0..model.n_features()).map(|k| format!("f{k}")).collect();
        TimeSeriesDataset::new(series, names, model.kind()).unwrap()
    }

    #[test]
    fn initial_rate_from_cycle_length() {
        let cfg = FitConfig {
            n_states: 4,
            ..FitConfig::default()
        };
        assert_eq!(cfg.initial_rate(28.0), 6.0);
        let ds = sampled(&two_state_truth(), 3, 20, 1);
        assert!(initialize(&cfg, &ds, 3.0).is_err());
    }

    #[test]
    fn initialization_is_deterministic_and_clamped() {
        let truth = CyhmmModel::new(
            DurationFamily::Poisson {
                rates: vec![3.0, 3.0],
            },
            10,
            EmissionParams::Binary {
                rate: vec![vec![0.3, 0.3], vec![0.3, 0.3]],
                p_obs: vec![1.0, 1.0],
            },
        )
        .unwrap();
        let ds = sampled(&truth, 50, 40, 2);
        let cfg = FitConfig {
            n_states: 3,
            cycle_length: 12.0,
            seed: 42,
            ..FitConfig::default()
        };
        let a = initialize(&cfg, &ds, 12.0).unwrap();
        let b = initialize(&cfg, &ds, 12.0).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let EmissionParams::Binary { rate, .. } = a.emissions() else {
            panic!()
        };
        let empirical = ds.feature_moments()[0].0;
        let half_width = INIT_SPREAD * (empirical * (1.0 - empirical)).sqrt() + 1e-12;
        for r in rate.iter().flatten() {
            assert!((P_FLOOR..=1.0 - P_FLOOR).contains(r));
        }
        for row in rate {
            assert!((row[0] - empirical).abs() <= half_width);
        }
        match a.durations() {
            DurationFamily::Poisson { rates } => assert!(rates.iter().all(|&r| r == 3.0)),
            _ => panic!(),
        }
    }

    #[test]
    fn poisson_update_formula() {
        let mut counts = vec![0.0; 31];
        counts[1] = 2.0;
        counts[3] = 2.0;
        let rate = duration_update(DurationKind::Poisson, &counts, 1.0);
        assert!((rate - 2.0).abs() < 1e-9, "{rate}");
        // Truncation at 30 keeps (2/3)^31 ≈ 4e-6 of geometric mass out.
        let p = duration_update(DurationKind::Geometric, &counts, 0.5);
        assert!((p - 1.0 / 3.0).abs() < 1e-4, "{p}");
    }

    #[test]
    fn duration_update_keeps_previous_without_mass() {
        assert_eq!(duration_update(DurationKind::Poisson, &[0.0; 5], 3.3), 3.3);
        assert_eq!(
            duration_update(DurationKind::Poisson, &[1.0, 0.0, 0.0], 3.3),
            LAMBDA_FLOOR
        );
    }

    #[test]
    fn recovers_generating_model() {
        let truth = two_state_truth();
        let ds = sampled(&truth, 200, 100, 17);
        let cfg = FitConfig {
            n_states: 2,
            cycle_length: 15.0,
            d_max: Some(30),
            seed: 3,
            ..FitConfig::default()
        };
        let fit = em_fit(&cfg, &ds).unwrap();
        let DurationFamily::Poisson { rates } = fit.model.durations() else {
            panic!()
        };
        let EmissionParams::Continuous { mean, .. } = fit.model.emissions() else {
            panic!()
        };
        // States may be recovered in either cyclic rotation; with J=2 that is
        // a swap.
        let swap = mean[0][0] > 0.0;
        let idx = |j: usize| if swap { 1 - j } else { j };
        let true_rates = [4.0, 9.0];
        let true_means = [[-2.0, 1.0], [2.0, -1.0]];
        let moments = ds.feature_moments();
        for j in 0..2 {
            let r = rates[idx(j)];
            assert!((r - true_rates[j]).abs() / true_rates[j] < 0.1, "rate {r}");
            for k in 0..2 {
                let err = (mean[idx(j)][k] - true_means[j][k]).abs();
                assert!(err < 0.1 * moments[k].1, "mean error {err}");
            }
        }
        let trace = &fit.loglik_trace;
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-6 * w[0].abs());
        }
    }

    #[test]
    fn permutation_of_individuals_is_harmless() {
        let truth = two_state_truth();
        let ds = sampled(&truth, 30, 40, 5);
        let mut rev = ds.clone();
        rev.series.reverse();
        let cfg = FitConfig {
            n_states: 2,
            cycle_length: 14.0,
            max_iters: 10,
            ..FitConfig::default()
        };
        let a = em_fit(&cfg, &ds).unwrap().model;
        let b = em_fit(&cfg, &rev).unwrap().model;
        let (
            EmissionParams::Continuous { mean: ma, .. },
            EmissionParams::Continuous { mean: mb, .. },
        ) = (a.emissions(), b.emissions())
        else {
            panic!()
        };
        for (x, y) in ma.iter().flatten().zip(mb.iter().flatten()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn restarts_keep_one_unbroken_trace() {
        let ds = sampled(&two_state_truth(), 30, 60, 8);
        let cfg = FitConfig {
            n_states: 2,
            cycle_length: 14.0,
            max_iters: 30,
            rel_tol: 1e-12,
            restarts: 3,
            restart_iters: 5,
            ..FitConfig::default()
        };
        let fit = em_fit(&cfg, &ds).unwrap();
        // Screening iterations count toward the budget.
        assert!(fit.loglik_trace.len() <= 31);
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-6 * w[0].abs());
        }
        let total: f64 = dataset_loglik(&fit.model, &ds).unwrap().iter().sum();
        assert!((total - fit.final_loglik()).abs() < 1e-6 * total.abs());
        assert!(em_fit(&FitConfig { restarts: 0, ..cfg }, &ds).is_err());
    }

    #[test]
    fn select_singleton() {
        let ds = sampled(&two_state_truth(), 6, 30, 1);
        let cfg = FitConfig {
            n_states: 2,
            cycle_length: 14.0,
            max_iters: 3,
            ..FitConfig::default()
        };
        assert_eq!(select_state_count(&ds, &[2], 2, &cfg).unwrap(), 2);
        assert!(matches!(
            select_state_count(&ds, &[2], 7, &cfg),
            Err(Error::TooFewIndividuals { .. })
        ));
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        let cfg = FitConfig::default();
        let bad = FitConfig {
            max_iters: 0,
            ..cfg.clone()
        };
        assert!(bad.validate().is_err());
        let bin = CyhmmModel::new(
            DurationFamily::Poisson { rates: vec![1.0] },
            3,
            EmissionParams::Binary {
                rate: vec![vec![0.5, 0.5]],
                p_obs: vec![0.5],
            },
        )
        .unwrap();
        let ds = sampled(&two_state_truth(), 2, 10, 1);
        assert!(matches!(
            em_fit_from(bin, &ds, 5, 1e-5),
            Err(Error::WrongKind { .. })
        ));
    }
}
