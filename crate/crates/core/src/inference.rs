// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exact inference over the expanded substate chain.
//!
//! Every substate `(j, d)` has at most two predecessors: the countdown
//! predecessor `(j, d+1)` and the fan-out predecessor `(j-1, 0)`. The
//! recursions below use that structure directly, so one forward or backward
//! sweep costs `O(T · J · (d_max + 1))`. Everything is kept in log space.

use serde::{Deserialize, Serialize};

use crate::dataset::IndividualSeries;
use crate::error::{Error, Result};
use crate::model::CyhmmModel;
use crate::stats::{log_add, log_sum_exp};

/// Posterior quantities for one series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub n_states: usize,
    /// Row-major `T × J`: `P(state j at t | data)`.
    pub state_marginals: Vec<f64>,
    /// Row-major `J × (d_max+1)`: expected number of entries into `(j, d)`,
    /// counting the initial draw at `t = 0` as an entry.
    pub entry_counts: Vec<f64>,
    pub loglik: f64,
}

impl PosteriorSummary {
    pub fn len(&self) -> usize {
        self.state_marginals.len() / self.n_states
    }

    pub fn is_empty(&self) -> bool {
        self.state_marginals.is_empty()
    }

    pub fn marginal(&self, t: usize, j: usize) -> f64 {
        self.state_marginals[t * self.n_states + j]
    }

    pub fn marginal_row(&self, t: usize) -> &[f64] {
        &self.state_marginals[t * self.n_states..(t + 1) * self.n_states]
    }

    pub fn entry_count(&self, j: usize, d: usize) -> f64 {
        let width = self.entry_counts.len() / self.n_states;
        self.entry_counts[j * width + d]
    }
}

/// Most likely substate path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViterbiPath {
    /// `(state, remaining duration)` per timestep.
    pub path: Vec<(usize, usize)>,
    pub logprob: f64,
}

impl ViterbiPath {
    pub fn states(&self) -> Vec<usize> {
        self.path.iter().map(|&(j, _)| j).collect()
    }
}

fn check_loglik(ll: f64) -> Result<f64> {
    if ll.is_nan() {
        Err(Error::param("log-likelihood is NaN"))
    } else if ll == f64::NEG_INFINITY {
        Err(Error::param("series has zero probability under the model"))
    } else {
        Ok(ll)
    }
}

/// Forward log-messages, row-major `T × S`.
fn forward_pass(model: &CyhmmModel, log_emis: &[f64], len: usize) -> Vec<f64> {
    let j_count = model.n_states();
    let width = model.d_max() + 1;
    let s_count = j_count * width;
    let mut alpha = vec![f64::NEG_INFINITY; len * s_count];
    for j in 0..j_count {
        let e = log_emis[j];
        for d in 0..width {
            alpha[j * width + d] = model.initial_log_prob(j, d) + e;
        }
    }
    for t in 1..len {
        let (prev, cur) = alpha.split_at_mut(t * s_count);
        let prev = &prev[(t - 1) * s_count..];
        let cur = &mut cur[..s_count];
        for j in 0..j_count {
            let e = log_emis[t * j_count + j];
            let from_prev_state = prev[((j + j_count - 1) % j_count) * width];
            let log_pmf = model.duration_log_pmf(j);
            let base = j * width;
            for d in 0..width {
                let countdown = if d + 1 < width {
                    prev[base + d + 1]
                } else {
                    f64::NEG_INFINITY
                };
                cur[base + d] = log_add(countdown, from_prev_state + log_pmf[d]) + e;
            }
        }
    }
    alpha
}

/// Backward log-messages, row-major `T × S`.
fn backward_pass(model: &CyhmmModel, log_emis: &[f64], len: usize) -> Vec<f64> {
    let j_count = model.n_states();
    let width = model.d_max() + 1;
    let s_count = j_count * width;
    let mut beta = vec![0.0; len * s_count];
    let mut scratch = vec![0.0; width];
    for t in (0..len.saturating_sub(1)).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_count);
        let cur = &mut cur[t * s_count..];
        let next = &next[..s_count];
        for j in 0..j_count {
            let base = j * width;
            let e = log_emis[(t + 1) * j_count + j];
            for d in 1..width {
                cur[base + d] = e + next[base + d - 1];
            }
            let nj = (j + 1) % j_count;
            let ne = log_emis[(t + 1) * j_count + nj];
            let log_pmf = model.duration_log_pmf(nj);
            for (d2, slot) in scratch.iter_mut().enumerate() {
                *slot = log_pmf[d2] + ne + next[nj * width + d2];
            }
            cur[base] = log_sum_exp(&scratch);
        }
    }
    beta
}

/// Forward-backward from a precomputed `T × J` emission log-probability
/// matrix.
pub fn forward_backward_from_emissions(
    model: &CyhmmModel,
    log_emis: &[f64],
) -> Result<PosteriorSummary> {
    let j_count = model.n_states();
    if log_emis.is_empty() || log_emis.len() % j_count != 0 {
        return Err(Error::DimensionMismatch {
            expected: j_count,
            found: log_emis.len(),
        });
    }
    let len = log_emis.len() / j_count;
    let width = model.d_max() + 1;
    let s_count = j_count * width;

    let alpha = forward_pass(model, log_emis, len);
    let beta = backward_pass(model, log_emis, len);
    let ll = check_loglik(log_sum_exp(&alpha[(len - 1) * s_count..]))?;

    let mut state_marginals = vec![0.0; len * j_count];
    for t in 0..len {
        let row = &mut state_marginals[t * j_count..(t + 1) * j_count];
        for (j, slot) in row.iter_mut().enumerate() {
            let mut p = 0.0;
            for d in 0..width {
                let s = t * s_count + j * width + d;
                p += (alpha[s] + beta[s] - ll).exp();
            }
            *slot = p;
        }
        // Renormalize away accumulated rounding.
        let z: f64 = row.iter().sum();
        if z > 0.0 {
            row.iter_mut().for_each(|p| *p /= z);
        }
    }

    let mut entry_counts = vec![0.0; s_count];
    for (s, c) in entry_counts.iter_mut().enumerate() {
        *c = (alpha[s] + beta[s] - ll).exp();
    }
    for t in 1..len {
        for j in 0..j_count {
            let prev = alpha[(t - 1) * s_count + ((j + j_count - 1) % j_count) * width];
            if prev == f64::NEG_INFINITY {
                continue;
            }
            let e = log_emis[t * j_count + j];
            let log_pmf = model.duration_log_pmf(j);
            for d in 0..width {
                let lp = prev + log_pmf[d] + e + beta[t * s_count + j * width + d] - ll;
                entry_counts[j * width + d] += lp.exp();
            }
        }
    }

    Ok(PosteriorSummary {
        n_states: j_count,
        state_marginals,
        entry_counts,
        loglik: ll,
    })
}

/// Exact state posteriors, expected entry counts and log-likelihood.
pub fn forward_backward(model: &CyhmmModel, series: &IndividualSeries) -> Result<PosteriorSummary> {
    let emis = model.emission_matrix(series)?;
    forward_backward_from_emissions(model, &emis)
}

/// Log-likelihood from a precomputed emission matrix (forward pass only).
pub fn loglik_from_emissions(model: &CyhmmModel, log_emis: &[f64]) -> Result<f64> {
    let j_count = model.n_states();
    if log_emis.is_empty() || log_emis.len() % j_count != 0 {
        return Err(Error::DimensionMismatch {
            expected: j_count,
            found: log_emis.len(),
        });
    }
    let len = log_emis.len() / j_count;
    let width = model.d_max() + 1;
    let s_count = j_count * width;
    // Two rolling rows are enough when only the total is needed.
    let mut prev = vec![f64::NEG_INFINITY; s_count];
    let mut cur = vec![f64::NEG_INFINITY; s_count];
    for j in 0..j_count {
        for d in 0..width {
            prev[j * width + d] = model.initial_log_prob(j, d) + log_emis[j];
        }
    }
    for t in 1..len {
        for j in 0..j_count {
            let e = log_emis[t * j_count + j];
            let from_prev_state = prev[((j + j_count - 1) % j_count) * width];
            let log_pmf = model.duration_log_pmf(j);
            let base = j * width;
            for d in 0..width {
                let countdown = if d + 1 < width {
                    prev[base + d + 1]
                } else {
                    f64::NEG_INFINITY
                };
                cur[base + d] = log_add(countdown, from_prev_state + log_pmf[d]) + e;
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    check_loglik(log_sum_exp(&prev))
}

/// `log P(series | model)`.
pub fn loglik(model: &CyhmmModel, series: &IndividualSeries) -> Result<f64> {
    let emis = model.emission_matrix(series)?;
    loglik_from_emissions(model, &emis)
}

/// Viterbi decoding from a precomputed emission matrix.
///
/// Ties prefer the lower state index, then the lower remaining duration.
pub fn viterbi_from_emissions(model: &CyhmmModel, log_emis: &[f64]) -> Result<ViterbiPath> {
    let j_count = model.n_states();
    if log_emis.is_empty() || log_emis.len() % j_count != 0 {
        return Err(Error::DimensionMismatch {
            expected: j_count,
            found: log_emis.len(),
        });
    }
    let len = log_emis.len() / j_count;
    let width = model.d_max() + 1;
    let s_count = j_count * width;

    let mut prev = vec![f64::NEG_INFINITY; s_count];
    let mut cur = vec![f64::NEG_INFINITY; s_count];
    // from_fan[t][s]: true if the best predecessor of s at t is (j-1, 0).
    let mut from_fan = vec![false; len * s_count];
    for j in 0..j_count {
        for d in 0..width {
            prev[j * width + d] = model.initial_log_prob(j, d) + log_emis[j];
        }
    }
    for t in 1..len {
        for j in 0..j_count {
            let e = log_emis[t * j_count + j];
            let pj = (j + j_count - 1) % j_count;
            let fan_src = prev[pj * width];
            let log_pmf = model.duration_log_pmf(j);
            let base = j * width;
            for d in 0..width {
                let fan = fan_src + log_pmf[d];
                let countdown = if d + 1 < width {
                    prev[base + d + 1]
                } else {
                    f64::NEG_INFINITY
                };
                // Countdown source is (j, d+1); fan source is (pj, 0).
                let take_fan = if fan == countdown {
                    (pj, 0) < (j, d + 1)
                } else {
                    fan > countdown
                };
                from_fan[t * s_count + base + d] = take_fan;
                cur[base + d] = if take_fan { fan } else { countdown } + e;
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }

    let mut best = 0usize;
    for s in 1..s_count {
        if prev[s] > prev[best] {
            best = s;
        }
    }
    let logprob = check_loglik(prev[best])?;
    let mut path = vec![(0usize, 0usize); len];
    let mut s = best;
    for t in (0..len).rev() {
        let (j, d) = model.substate_pair(s);
        path[t] = (j, d);
        if t > 0 {
            s = if from_fan[t * s_count + s] {
                ((j + j_count - 1) % j_count) * width
            } else {
                s + 1
            };
        }
    }
    Ok(ViterbiPath { path, logprob })
}

/// Most likely substate path for one series.
pub fn viterbi(model: &CyhmmModel, series: &IndividualSeries) -> Result<ViterbiPath> {
    let emis = model.emission_matrix(series)?;
    viterbi_from_emissions(model, &emis)
}
