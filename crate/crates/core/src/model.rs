// SPDX-License-Identifier: MIT OR Apache-2.0

//! CyHMM parameterization and the expanded substate chain.
//!
//! Substate `(j, d)` means "in state `j` with `d` steps remaining". It moves
//! to `(j, d-1)` with probability one while `d > 0`; from `(j, 0)` it jumps to
//! `(j+1 mod J, d')` with probability `f_{j+1}(d')`. Entering at `(j, d)`
//! therefore stays `d + 1` steps in state `j`.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::dataset::FeatureKind;
use crate::error::{Error, Result};
use crate::stats::log_sum_exp;

/// Clamp applied to every fitted probability.
pub const P_FLOOR: f64 = 1e-4;
/// Smallest Poisson rate a fit may produce.
pub const LAMBDA_FLOOR: f64 = 1e-2;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationKind {
    Poisson,
    Geometric,
}

impl std::str::FromStr for DurationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "poisson" => Ok(DurationKind::Poisson),
            "geometric" => Ok(DurationKind::Geometric),
            other => Err(Error::param(format!("unknown duration family {other:?}"))),
        }
    }
}

/// Per-state duration distributions over the remaining time `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DurationFamily {
    /// `d ~ Poisson(rates[j])`.
    Poisson { rates: Vec<f64> },
    /// `P(d) ∝ probs[j] · (1 - probs[j])^d`.
    Geometric { probs: Vec<f64> },
}

impl DurationFamily {
    pub fn kind(&self) -> DurationKind {
        match self {
            DurationFamily::Poisson { .. } => DurationKind::Poisson,
            DurationFamily::Geometric { .. } => DurationKind::Geometric,
        }
    }

    pub fn n_states(&self) -> usize {
        match self {
            DurationFamily::Poisson { rates } => rates.len(),
            DurationFamily::Geometric { probs } => probs.len(),
        }
    }

    /// Distribution for every state with the given untruncated mean.
    pub fn with_mean(kind: DurationKind, means: &[f64]) -> Self {
        match kind {
            DurationKind::Poisson => DurationFamily::Poisson {
                rates: means.iter().map(|&m| m.max(LAMBDA_FLOOR)).collect(),
            },
            DurationKind::Geometric => DurationFamily::Geometric {
                probs: means
                    .iter()
                    .map(|&m| (1.0 / (1.0 + m.max(0.0))).clamp(P_FLOOR, 1.0 - P_FLOOR))
                    .collect(),
            },
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DurationFamily::Poisson { rates } => {
                if let Some(r) = rates.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
                    return Err(Error::param(format!("Poisson rate {r} must be positive")));
                }
            }
            DurationFamily::Geometric { probs } => {
                if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
                    return Err(Error::param(format!(
                        "geometric probability {p} outside (0, 1)"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Untruncated log-weights for `d = 0..=d_max` of state `j`.
    fn raw_log_weights(&self, j: usize, d_max: usize) -> Vec<f64> {
        match self {
            DurationFamily::Poisson { rates } => {
                let ln_rate = rates[j].ln();
                (0..=d_max)
                    .map(|d| d as f64 * ln_rate - rates[j] - ln_gamma(d as f64 + 1.0))
                    .collect()
            }
            DurationFamily::Geometric { probs } => {
                let (lp, lq) = (probs[j].ln(), (1.0 - probs[j]).ln());
                (0..=d_max).map(|d| lp + d as f64 * lq).collect()
            }
        }
    }
}

/// Truncated, renormalized log-pmf over `0..=d_max`.
pub fn duration_log_pmf(family: &DurationFamily, j: usize, d_max: usize) -> Vec<f64> {
    let mut w = family.raw_log_weights(j, d_max);
    let z = log_sum_exp(&w);
    for x in &mut w {
        *x -= z;
    }
    w
}

/// Truncated, renormalized pmf over `0..=d_max`.
pub fn duration_pmf(family: &DurationFamily, j: usize, d_max: usize) -> Vec<f64> {
    duration_log_pmf(family, j, d_max)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Smallest `d` whose Poisson(`rate`) CDF reaches `mass`.
pub fn poisson_quantile(rate: f64, mass: f64) -> usize {
    let mut log_p = -rate;
    let mut cdf = log_p.exp();
    let mut d = 0usize;
    while cdf < mass && d < 100_000 {
        d += 1;
        log_p += rate.ln() - (d as f64).ln();
        cdf += log_p.exp();
    }
    d
}

/// Per-state, per-feature emission parameters, indexed `[state][feature]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmissionParams {
    /// Each cell is missing with probability `1 - p_obs[j][k]`, otherwise
    /// `N(mean[j][k], std[j][k]^2)`.
    Continuous {
        mean: Vec<Vec<f64>>,
        std: Vec<Vec<f64>>,
        p_obs: Vec<Vec<f64>>,
    },
    /// The whole row is missing with probability `1 - p_obs[j]`; otherwise
    /// each feature is `Bernoulli(rate[j][k])`.
    Binary {
        rate: Vec<Vec<f64>>,
        p_obs: Vec<f64>,
    },
}

impl EmissionParams {
    pub fn kind(&self) -> FeatureKind {
        match self {
            EmissionParams::Continuous { .. } => FeatureKind::Continuous,
            EmissionParams::Binary { .. } => FeatureKind::Binary,
        }
    }

    fn shape(&self) -> (usize, usize) {
        match self {
            EmissionParams::Continuous { mean, .. } => {
                (mean.len(), mean.first().map_or(0, Vec::len))
            }
            EmissionParams::Binary { rate, .. } => (rate.len(), rate.first().map_or(0, Vec::len)),
        }
    }

    fn validate(&self, j: usize, k: usize) -> Result<()> {
        let check_matrix = |name: &str, m: &Vec<Vec<f64>>| -> Result<()> {
            if m.len() != j || m.iter().any(|r| r.len() != k) {
                return Err(Error::param(format!("{name} must be {j}x{k}")));
            }
            Ok(())
        };
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        match self {
            EmissionParams::Continuous { mean, std, p_obs } => {
                check_matrix("mean", mean)?;
                check_matrix("std", std)?;
                check_matrix("p_obs", p_obs)?;
                if mean.iter().flatten().any(|m| !m.is_finite()) {
                    return Err(Error::param("non-finite emission mean"));
                }
                if std.iter().flatten().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(Error::param("emission std must be positive"));
                }
                if p_obs.iter().flatten().any(|&p| !prob(p)) {
                    return Err(Error::param("p_obs outside [0, 1]"));
                }
            }
            EmissionParams::Binary { rate, p_obs } => {
                check_matrix("rate", rate)?;
                if p_obs.len() != j {
                    return Err(Error::param(format!("p_obs must have {j} entries")));
                }
                if rate.iter().flatten().chain(p_obs).any(|&p| !prob(p)) {
                    return Err(Error::param("emission probability outside [0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// Expected value of feature `k` in state `j`, given that it is observed.
    pub fn expected_value(&self, j: usize, k: usize) -> f64 {
        match self {
            EmissionParams::Continuous { mean, .. } => mean[j][k],
            EmissionParams::Binary { rate, .. } => rate[j][k],
        }
    }
}

/// Log-domain constants derived from the emission parameters.
#[derive(Debug, Clone)]
enum EmissionCache {
    Continuous {
        /// `[j][k]`: log p_obs, log(1 - p_obs), -ln σ - ½ ln 2π, 1/σ².
        log_obs: Vec<Vec<f64>>,
        log_miss: Vec<Vec<f64>>,
        log_norm: Vec<Vec<f64>>,
        inv_var: Vec<Vec<f64>>,
    },
    Binary {
        log_obs: Vec<f64>,
        log_miss: Vec<f64>,
        log_rate: Vec<Vec<f64>>,
        log_one_minus: Vec<Vec<f64>>,
    },
}

impl EmissionCache {
    fn build(params: &EmissionParams) -> Self {
        let ln = |p: &f64| p.ln();
        let ln1m = |p: &f64| (1.0 - p).ln();
        match params {
            EmissionParams::Continuous { std, p_obs, .. } => EmissionCache::Continuous {
                log_obs: p_obs.iter().map(|r| r.iter().map(ln).collect()).collect(),
                log_miss: p_obs.iter().map(|r| r.iter().map(ln1m).collect()).collect(),
                log_norm: std
                    .iter()
                    .map(|r| r.iter().map(|s| -s.ln() - HALF_LN_2PI).collect())
                    .collect(),
                inv_var: std
                    .iter()
                    .map(|r| r.iter().map(|s| 1.0 / (s * s)).collect())
                    .collect(),
            },
            EmissionParams::Binary { rate, p_obs } => EmissionCache::Binary {
                log_obs: p_obs.iter().map(ln).collect(),
                log_miss: p_obs.iter().map(ln1m).collect(),
                log_rate: rate.iter().map(|r| r.iter().map(ln).collect()).collect(),
                log_one_minus: rate.iter().map(|r| r.iter().map(ln1m).collect()).collect(),
            },
        }
    }
}

/// Serialized form of a [`CyhmmModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDocument {
    n_states: usize,
    n_features: usize,
    kind: FeatureKind,
    d_max: usize,
    durations: DurationFamily,
    emissions: EmissionParams,
}

/// A cyclic explicit-duration HMM. Immutable once built; use the `with_*`
/// methods to derive updated models.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ModelDocument", into = "ModelDocument")]
pub struct CyhmmModel {
    n_states: usize,
    n_features: usize,
    d_max: usize,
    durations: DurationFamily,
    emissions: EmissionParams,
    log_pmf: Vec<Vec<f64>>,
    cache: EmissionCache,
}

impl PartialEq for CyhmmModel {
    fn eq(&self, other: &Self) -> bool {
        self.n_states == other.n_states
            && self.n_features == other.n_features
            && self.d_max == other.d_max
            && self.durations == other.durations
            && self.emissions == other.emissions
    }
}

impl TryFrom<ModelDocument> for CyhmmModel {
    type Error = Error;

    fn try_from(doc: ModelDocument) -> Result<Self> {
        if doc.kind != doc.emissions.kind() {
            return Err(Error::param(
                "model kind does not match its emission parameters",
            ));
        }
        let model = CyhmmModel::new(doc.durations, doc.d_max, doc.emissions)?;
        if model.n_states != doc.n_states || model.n_features != doc.n_features {
            return Err(Error::param("declared dimensions do not match parameters"));
        }
        Ok(model)
    }
}

impl From<CyhmmModel> for ModelDocument {
    fn from(m: CyhmmModel) -> Self {
        ModelDocument {
            n_states: m.n_states,
            n_features: m.n_features,
            kind: m.emissions.kind(),
            d_max: m.d_max,
            durations: m.durations,
            emissions: m.emissions,
        }
    }
}

impl CyhmmModel {
    pub fn new(durations: DurationFamily, d_max: usize, emissions: EmissionParams) -> Result<Self> {
        let j = durations.n_states();
        if j == 0 {
            return Err(Error::param("a model needs at least one state"));
        }
        let (ej, k) = emissions.shape();
        if ej != j {
            return Err(Error::param(format!(
                "{j} duration distributions but {ej} emission states"
            )));
        }
        if k == 0 {
            return Err(Error::param("a model needs at least one feature"));
        }
        durations.validate()?;
        emissions.validate(j, k)?;
        let log_pmf = (0..j)
            .map(|s| duration_log_pmf(&durations, s, d_max))
            .collect();
        let cache = EmissionCache::build(&emissions);
        Ok(CyhmmModel {
            n_states: j,
            n_features: k,
            d_max,
            durations,
            emissions,
            log_pmf,
            cache,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    /// Number of expanded substates, `J · (d_max + 1)`.
    pub fn n_substates(&self) -> usize {
        self.n_states * (self.d_max + 1)
    }

    pub fn kind(&self) -> FeatureKind {
        self.emissions.kind()
    }

    pub fn durations(&self) -> &DurationFamily {
        &self.durations
    }

    pub fn emissions(&self) -> &EmissionParams {
        &self.emissions
    }

    pub fn with_durations(&self, durations: DurationFamily) -> Result<Self> {
        CyhmmModel::new(durations, self.d_max, self.emissions.clone())
    }

    pub fn with_emissions(&self, emissions: EmissionParams) -> Result<Self> {
        CyhmmModel::new(self.durations.clone(), self.d_max, emissions)
    }

    /// `f_j(d)` for `d = 0..=d_max`.
    pub fn duration_pmf(&self, j: usize) -> Vec<f64> {
        self.log_pmf[j].iter().map(|x| x.exp()).collect()
    }

    pub fn duration_log_pmf(&self, j: usize) -> &[f64] {
        &self.log_pmf[j]
    }

    /// Mean stay in state `j`, i.e. `E[d] + 1` under the truncated pmf.
    pub fn expected_stay(&self, j: usize) -> f64 {
        1.0 + self.log_pmf[j]
            .iter()
            .enumerate()
            .map(|(d, lp)| d as f64 * lp.exp())
            .sum::<f64>()
    }

    /// Expected length of one full cycle, `Σ_j (E[d_j] + 1)`.
    pub fn expected_cycle_length(&self) -> f64 {
        (0..self.n_states).map(|j| self.expected_stay(j)).sum()
    }

    /// Flat substate index of `(j, d)`.
    #[inline]
    pub fn substate(&self, j: usize, d: usize) -> usize {
        j * (self.d_max + 1) + d
    }

    /// Inverse of [`substate`](Self::substate).
    #[inline]
    pub fn substate_pair(&self, s: usize) -> (usize, usize) {
        (s / (self.d_max + 1), s % (self.d_max + 1))
    }

    /// Log of the initial distribution `π(j, d) = f_j(d) / J`.
    pub fn initial_log_prob(&self, j: usize, d: usize) -> f64 {
        self.log_pmf[j][d] - (self.n_states as f64).ln()
    }

    /// Log-probability of one observation row under state `j`.
    pub fn emission_logprob(&self, j: usize, values: &[f64], observed: &[bool]) -> Result<f64> {
        if values.len() != self.n_features || observed.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                found: values.len().min(observed.len()),
            });
        }
        self.row_logprob(j, values, observed)
            .ok_or(Error::PartiallyMissingBinaryRow { t: 0 })
    }

    /// Emission log-probabilities for every timestep and state, row-major
    /// `T × J`.
    pub fn emission_matrix(&self, series: &crate::IndividualSeries) -> Result<Vec<f64>> {
        if series.n_features() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                found: series.n_features(),
            });
        }
        let j_count = self.n_states;
        let mut out = vec![0.0; series.len() * j_count];
        for t in 0..series.len() {
            let (values, observed) = series.row(t);
            for j in 0..j_count {
                out[t * j_count + j] = self
                    .row_logprob(j, values, observed)
                    .ok_or(Error::PartiallyMissingBinaryRow { t })?;
            }
        }
        Ok(out)
    }

    /// `None` for a partially missing binary row.
    fn row_logprob(&self, j: usize, values: &[f64], observed: &[bool]) -> Option<f64> {
        match &self.cache {
            EmissionCache::Continuous {
                log_obs,
                log_miss,
                log_norm,
                inv_var,
            } => {
                let EmissionParams::Continuous { mean, .. } = &self.emissions else {
                    unreachable!()
                };
                let mut lp = 0.0;
                for k in 0..self.n_features {
                    if observed[k] {
                        let z = values[k] - mean[j][k];
                        lp += log_obs[j][k] + log_norm[j][k] - 0.5 * z * z * inv_var[j][k];
                    } else {
                        lp += log_miss[j][k];
                    }
                }
                Some(lp)
            }
            EmissionCache::Binary {
                log_obs,
                log_miss,
                log_rate,
                log_one_minus,
            } => {
                let n_obs = observed.iter().filter(|&&o| o).count();
                if n_obs == 0 {
                    return Some(log_miss[j]);
                }
                if n_obs != self.n_features {
                    return None;
                }
                let mut lp = log_obs[j];
                for k in 0..self.n_features {
                    lp += if values[k] >= 0.5 {
                        log_rate[j][k]
                    } else {
                        log_one_minus[j][k]
                    };
                }
                Some(lp)
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The explicit substate transition structure.
    pub fn topology(&self) -> Topology {
        build_expanded_topology(self)
    }
}

/// Sparse successor lists of the expanded chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub n_states: usize,
    pub d_max: usize,
    /// `successors[s]` lists `(target, probability)` with nonzero probability.
    pub successors: Vec<Vec<(usize, f64)>>,
    pub initial: Vec<f64>,
}

impl Topology {
    pub fn n_substates(&self) -> usize {
        self.successors.len()
    }

    pub fn n_transitions(&self) -> usize {
        self.successors.iter().map(Vec::len).sum()
    }

    /// One step of `p ← p · A`.
    pub fn propagate(&self, dist: &[f64]) -> Vec<f64> {
        let mut next = vec![0.0; dist.len()];
        for (s, succ) in self.successors.iter().enumerate() {
            if dist[s] == 0.0 {
                continue;
            }
            for &(to, p) in succ {
                next[to] += dist[s] * p;
            }
        }
        next
    }

    /// Every substate reaches every other along nonzero transitions.
    pub fn is_strongly_connected(&self) -> bool {
        let n = self.n_substates();
        let mut reverse = vec![Vec::new(); n];
        for (s, succ) in self.successors.iter().enumerate() {
            for &(to, _) in succ {
                reverse[to].push(s);
            }
        }
        let reach_all = |adj: &dyn Fn(usize) -> Vec<usize>| {
            let mut seen = vec![false; n];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(s) = stack.pop() {
                for to in adj(s) {
                    if !seen[to] {
                        seen[to] = true;
                        stack.push(to);
                    }
                }
            }
            seen.into_iter().all(|x| x)
        };
        n > 0
            && reach_all(&|s| self.successors[s].iter().map(|&(t, _)| t).collect())
            && reach_all(&|s| reverse[s].clone())
    }
}

/// Builds the substate successor lists. Substates whose duration probability
/// underflows to zero are still listed as fan-out targets, so the edge count
/// is always `J·d_max + J·(d_max+1)`.
pub fn build_expanded_topology(model: &CyhmmModel) -> Topology {
    let j_count = model.n_states();
    let width = model.d_max() + 1;
    let pmfs: Vec<Vec<f64>> = (0..j_count).map(|j| model.duration_pmf(j)).collect();
    let mut successors = Vec::with_capacity(j_count * width);
    for j in 0..j_count {
        for d in 0..width {
            if d > 0 {
                successors.push(vec![(j * width + d - 1, 1.0)]);
            } else {
                let next = (j + 1) % j_count;
                successors.push(
                    (0..width)
                        .map(|d2| (next * width + d2, pmfs[next][d2]))
                        .collect(),
                );
            }
        }
    }
    let initial = (0..j_count)
        .flat_map(|j| pmfs[j].iter().map(move |p| p / j_count as f64))
        .collect();
    Topology {
        n_states: j_count,
        d_max: model.d_max(),
        successors,
        initial,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn poisson_model(rates: Vec<f64>, d_max: usize, k: usize) -> CyhmmModel {
        let j = rates.len();
        CyhmmModel::new(
            DurationFamily::Poisson { rates },
            d_max,
            EmissionParams::Continuous {
                mean: (0..j).map(|s| vec![s as f64; k]).collect(),
                std: vec![vec![1.0; k]; j],
                p_obs: vec![vec![0.5; k]; j],
            },
        )
        .unwrap()
    }

    #[test]
    fn poisson_pmf_closed_form() {
        let fam = DurationFamily::Poisson { rates: vec![2.0] };
        let f = duration_pmf(&fam, 0, 60);
        assert!((f[0] - (-2.0f64).exp()).abs() < 1e-12);
        assert!((f[1] - 2.0 * (-2.0f64).exp()).abs() < 1e-12);
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truncation_to_single_atom() {
        let fam = DurationFamily::Poisson { rates: vec![1.0] };
        assert_eq!(duration_pmf(&fam, 0, 0), vec![1.0]);
    }

    #[test]
    fn geometric_truncation() {
        let fam = DurationFamily::Geometric { probs: vec![0.5] };
        let f = duration_pmf(&fam, 0, 2);
        for (got, want) in f.iter().zip([4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn quantile_covers_mass() {
        let d = poisson_quantile(6.0, 0.999);
        let fam = DurationFamily::Poisson { rates: vec![6.0] };
        let raw: f64 = fam.raw_log_weights(0, d).iter().map(|x| x.exp()).sum();
        let raw_prev: f64 = fam.raw_log_weights(0, d - 1).iter().map(|x| x.exp()).sum();
        assert!(raw >= 0.999 && raw_prev < 0.999);
    }

    #[test]
    fn continuous_all_missing() {
        let m = poisson_model(vec![2.0, 3.0], 5, 3);
        let lp = m.emission_logprob(0, &[0.0; 3], &[false; 3]).unwrap();
        assert!((lp - 3.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn continuous_mode_density() {
        let m = CyhmmModel::new(
            DurationFamily::Poisson { rates: vec![1.0] },
            3,
            EmissionParams::Continuous {
                mean: vec![vec![2.5]],
                std: vec![vec![1.0]],
                p_obs: vec![vec![1.0]],
            },
        )
        .unwrap();
        let lp = m.emission_logprob(0, &[2.5], &[true]).unwrap();
        let want = (1.0 / (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((lp - want).abs() < 1e-12);
    }

    #[test]
    fn binary_logged_anything() {
        let m = CyhmmModel::new(
            DurationFamily::Poisson { rates: vec![1.0] },
            3,
            EmissionParams::Binary {
                rate: vec![vec![0.3, 0.6]],
                p_obs: vec![0.8],
            },
        )
        .unwrap();
        let lp = m.emission_logprob(0, &[0.0, 0.0], &[false, false]).unwrap();
        assert!((lp - 0.2f64.ln()).abs() < 1e-12);
        let lp = m.emission_logprob(0, &[1.0, 0.0], &[true, true]).unwrap();
        assert!((lp - (0.8f64.ln() + 0.3f64.ln() + 0.4f64.ln())).abs() < 1e-12);
        assert!(matches!(
            m.emission_logprob(0, &[1.0, 0.0], &[true, false]),
            Err(Error::PartiallyMissingBinaryRow { .. })
        ));
    }

    #[test]
    fn figure_one_topology() {
        let m = poisson_model(vec![2.0; 4], 2, 1);
        let topo = m.topology();
        assert_eq!(topo.n_substates(), 12);
        assert_eq!(topo.n_transitions(), 4 * 2 + 4 * 3);
        // (j=1, d=2) counts down to (1, 1).
        assert_eq!(
            topo.successors[m.substate(1, 2)],
            vec![(m.substate(1, 1), 1.0)]
        );
        // (j=3, d=0) fans out into state 0.
        let fan: Vec<usize> = topo.successors[m.substate(3, 0)]
            .iter()
            .map(|x| x.0)
            .collect();
        assert_eq!(fan, vec![0, 1, 2]);
        assert!(topo.is_strongly_connected());
    }

    #[test]
    fn single_state_cycles_to_itself() {
        let m = poisson_model(vec![3.0], 4, 1);
        let topo = m.topology();
        let fan: Vec<usize> = topo.successors[0].iter().map(|x| x.0).collect();
        assert_eq!(fan, (0..5).collect::<Vec<_>>());
        assert!(topo.is_strongly_connected());
    }

    #[test]
    fn two_states_zero_duration_alternate() {
        let m = poisson_model(vec![1.0, 1.0], 0, 1);
        let topo = m.topology();
        assert_eq!(topo.successors, vec![vec![(1, 1.0)], vec![(0, 1.0)]]);
        assert_eq!(topo.initial, vec![0.5, 0.5]);
    }

    #[test]
    fn rows_and_initial_sum_to_one() {
        let m = poisson_model(vec![0.7, 5.0, 12.0], 20, 1);
        let topo = m.topology();
        for succ in &topo.successors {
            let s: f64 = succ.iter().map(|x| x.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((topo.initial.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_stay_monte_carlo() {
        // Stay length is d + 1 for an entry at (j, d); simulate entries by
        // walking the chain and measuring stays.
        let rate = 4.0;
        let m = poisson_model(vec![rate], 40, 1);
        let topo = m.topology();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = 0usize;
        let (mut stays, mut current, mut total) = (0usize, 0usize, 0usize);
        while stays < 100_000 {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut next = topo.successors[s].last().unwrap().0;
            for &(to, p) in &topo.successors[s] {
                acc += p;
                if u < acc {
                    next = to;
                    break;
                }
            }
            current += 1;
            if m.substate_pair(s).1 == 0 {
                total += current;
                stays += 1;
                current = 0;
            }
            s = next;
        }
        let mean = total as f64 / stays as f64;
        assert!(
            (mean - (rate + 1.0)).abs() / (rate + 1.0) < 0.02,
            "mean stay {mean}"
        );
    }

    #[test]
    fn json_round_trip() {
        let m = poisson_model(vec![2.0, 3.5], 7, 2);
        let text = m.to_json().unwrap();
        let back = CyhmmModel::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json().unwrap(), text);
        let bad = text.replace("\"n_states\": 2", "\"n_states\": 3");
        assert!(CyhmmModel::from_json(&bad).is_err());
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(CyhmmModel::new(
            DurationFamily::Poisson { rates: vec![0.0] },
            3,
            EmissionParams::Binary {
                rate: vec![vec![0.5]],
                p_obs: vec![0.5]
            }
        )
        .is_err());
        assert!(CyhmmModel::new(
            DurationFamily::Geometric { probs: vec![1.0] },
            3,
            EmissionParams::Binary {
                rate: vec![vec![0.5]],
                p_obs: vec![0.5]
            }
        )
        .is_err());
        assert!(CyhmmModel::new(
            DurationFamily::Poisson {
                rates: vec![1.0, 2.0]
            },
            3,
            EmissionParams::Binary {
                rate: vec![vec![0.5]],
                p_obs: vec![0.5]
            }
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn emission_exchangeable_under_feature_permutation(
            seed in 0u64..1000,
            k in 2usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let j = 3;
            let mut mean = vec![vec![0.0; k]; j];
            let mut std = vec![vec![0.0; k]; j];
            let mut p_obs = vec![vec![0.0; k]; j];
            for s in 0..j {
                for f in 0..k {
                    mean[s][f] = rng.random_range(-3.0..3.0);
                    std[s][f] = rng.random_range(0.2..2.0);
                    p_obs[s][f] = rng.random_range(0.05..0.95);
                }
            }
            let values: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let observed: Vec<bool> = (0..k).map(|_| rng.random_bool(0.6)).collect();
            let perm: Vec<usize> = (0..k).rev().collect();
            let apply = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                m.iter().map(|r| perm.iter().map(|&p| r[p]).collect()).collect()
            };
            let durations = DurationFamily::Poisson { rates: vec![1.0; j] };
            let a = CyhmmModel::new(
                durations.clone(),
                4,
                EmissionParams::Continuous { mean: mean.clone(), std: std.clone(), p_obs: p_obs.clone() },
            ).unwrap();
            let b = CyhmmModel::new(
                durations,
                4,
                EmissionParams::Continuous { mean: apply(&mean), std: apply(&std), p_obs: apply(&p_obs) },
            ).unwrap();
            let pv: Vec<f64> = perm.iter().map(|&p| values[p]).collect();
            let po: Vec<bool> = perm.iter().map(|&p| observed[p]).collect();
            for s in 0..j {
                let x = a.emission_logprob(s, &values, &observed).unwrap();
                let y = b.emission_logprob(s, &pv, &po).unwrap();
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
