// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hard-assignment clustering of individuals over per-cluster CyHMMs.
//!
//! Initial labels come from k-means on z-scored log-likelihoods under a set
//! of single-individual seed models. Clusters are indexed from 0.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::model::CyhmmModel;
use crate::training::{dataset_loglik, em_fit, em_fit_from, FitConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub n_clusters: usize,
    /// Number of seed models; defaults to `max(3C, 10)` capped at `N`.
    pub n_seed_models: Option<usize>,
    /// Divide each log-likelihood by the series length before z-scoring.
    pub per_timestep: bool,
    pub max_outer_iters: usize,
    /// EM iterations for warm-started refits after the first outer pass.
    pub warm_iters: usize,
    pub kmeans_restarts: usize,
    pub fit: FitConfig,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            n_clusters: 2,
            n_seed_models: None,
            per_timestep: false,
            max_outer_iters: 20,
            warm_iters: 15,
            kmeans_restarts: 10,
            fit: FitConfig::default(),
        }
    }
}

impl ClusterConfig {
    pub fn seed_models(&self, n: usize) -> usize {
        self.n_seed_models
            .unwrap_or((3 * self.n_clusters).max(10))
            .min(n)
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.n_clusters == 0 {
            return Err(Error::param("n_clusters must be at least 1"));
        }
        if n < self.n_clusters {
            return Err(Error::TooFewIndividuals {
                needed: self.n_clusters,
                found: n,
            });
        }
        if self.seed_models(n) < self.n_clusters {
            return Err(Error::param(
                "need at least as many seed models as clusters",
            ));
        }
        if self.max_outer_iters == 0 || self.warm_iters == 0 || self.kmeans_restarts == 0 {
            return Err(Error::param("iteration counts must be positive"));
        }
        self.fit.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub ids: Vec<String>,
    pub assignment: Vec<usize>,
    pub models: Vec<CyhmmModel>,
    /// Total log-likelihood of individuals under their assigned models,
    /// after each outer iteration's refit.
    pub total_loglik_trace: Vec<f64>,
    pub n_clusters: usize,
    pub converged: bool,
}

impl ClusterAssignment {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(c, ctr)| (c, sq_dist(point, ctr)))
        .fold(
            (0, f64::INFINITY),
            |best, cur| if cur.1 < best.1 { cur } else { best },
        )
}

fn kmeans_once(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> (Vec<usize>, f64) {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[next].clone());
    }
    let dim = points[0].len();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let c = nearest(p, &centroids).0;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&labels) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Reseed an empty centroid at the worst-fit point.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centroids[labels[a]])
                            .total_cmp(&sq_dist(&points[b], &centroids[labels[b]]))
                    })
                    .unwrap();
                centroids[c] = points[far].clone();
            }
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum();
    (labels, inertia)
}

/// Seeded k-means++ with restarts, keeping the lowest inertia.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || points.len() < k {
        return Err(Error::param(format!(
            "cannot form {k} clusters from {} points",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..restarts.max(1) {
        let run = kmeans_once(points, k, &mut rng);
        if best.as_ref().is_none_or(|b| run.1 < b.1) {
            best = Some(run);
        }
    }
    Ok(best.unwrap().0)
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let (ka, kb) = (
        a.iter().max().map_or(0, |m| m + 1),
        b.iter().max().map_or(0, |m| m + 1),
    );
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&x| c2(x)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

fn zscore_rows(matrix: &mut [Vec<f64>]) {
    for row in matrix {
        let n = row.len() as f64;
        let m = row.iter().sum::<f64>() / n;
        let sd = (row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
        for x in row.iter_mut() {
            *x = if sd > 0.0 { (*x - m) / sd } else { 0.0 };
        }
    }
}

/// `N × S` matrix of each individual's log-likelihood under each seed model.
pub fn seed_loglik_matrix(ds: &TimeSeriesDataset, config: &ClusterConfig) -> Result<Vec<Vec<f64>>> {
    config.validate(ds.len())?;
    let s = config.seed_models(ds.len());
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.fit.seed));
    let seed_models: Vec<CyhmmModel> = order[..s]
        .par_iter()
        .map(|&i| Ok(em_fit(&config.fit, &ds.subset(&[i])?)?.model))
        .collect::<Result<_>>()?;
    let columns: Vec<Vec<f64>> = seed_models
        .iter()
        .map(|m| dataset_loglik(m, ds))
        .collect::<Result<_>>()?;
    Ok((0..ds.len())
        .map(|i| {
            let t = ds.series[i].len() as f64;
            columns
                .iter()
                .map(|col| {
                    if config.per_timestep {
                        col[i] / t
                    } else {
                        col[i]
                    }
                })
                .collect()
        })
        .collect())
}

/// Initial labels from k-means on z-scored seed-model log-likelihoods.
pub fn init_clusters(ds: &TimeSeriesDataset, config: &ClusterConfig) -> Result<Vec<usize>> {
    config.validate(ds.len())?;
    if config.n_clusters == 1 {
        return Ok(vec![0; ds.len()]);
    }
    let mut matrix = seed_loglik_matrix(ds, config)?;
    zscore_rows(&mut matrix);
    kmeans(
        &matrix,
        config.n_clusters,
        config.kmeans_restarts,
        config.fit.seed,
    )
}

/// `N × C` log-likelihood of every individual under every model.
fn loglik_matrix(models: &[CyhmmModel], ds: &TimeSeriesDataset) -> Result<Vec<Vec<f64>>> {
    let cols: Vec<Vec<f64>> = models
        .iter()
        .map(|m| dataset_loglik(m, ds))
        .collect::<Result<_>>()?;
    Ok((0..ds.len())
        .map(|i| cols.iter().map(|c| c[i]).collect())
        .collect())
}

fn argmax_labels(ll: &[Vec<f64>]) -> Vec<usize> {
    ll.iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |b, (c, &v)| if v > b.1 { (c, v) } else { b },
                )
                .0
        })
        .collect()
}

/// Moves the worst-fitting individual of a multi-member cluster into each
/// empty cluster.
fn repair_empty(labels: &mut [usize], c: usize, own_ll: &[f64]) {
    loop {
        let mut sizes = vec![0usize; c];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let worst = (0..labels.len())
            .filter(|&i| sizes[labels[i]] > 1)
            .min_by(|&a, &b| own_ll[a].total_cmp(&own_ll[b]))
            .expect("N >= C guarantees a donor");
        log::warn!("cluster {empty} emptied; moving individual {worst} into it");
        labels[worst] = empty;
    }
}

fn members(labels: &[usize], c: usize) -> Vec<usize> {
    (0..labels.len()).filter(|&i| labels[i] == c).collect()
}

/// Hard-assignment EM starting from `labels`.
pub fn cluster_em_from(
    ds: &TimeSeriesDataset,
    mut labels: Vec<usize>,
    config: &ClusterConfig,
) -> Result<ClusterAssignment> {
    config.validate(ds.len())?;
    let c = config.n_clusters;
    if labels.len() != ds.len() || labels.iter().any(|&l| l >= c) {
        return Err(Error::param(
            "initial labels do not match the dataset or cluster count",
        ));
    }
    repair_empty(&mut labels, c, &vec![0.0; ds.len()]);
    let mut models: Vec<CyhmmModel> = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    for outer in 0..config.max_outer_iters {
        models = (0..c)
            .into_par_iter()
            .map(|k| {
                let sub = ds.subset(&members(&labels, k))?;
                let fit = if outer == 0 {
                    em_fit(&config.fit, &sub)?
                } else {
                    em_fit_from(
                        models[k].clone(),
                        &sub,
                        config.warm_iters,
                        config.fit.rel_tol,
                    )?
                };
                Ok(fit.model)
            })
            .collect::<Result<_>>()?;
        let ll = loglik_matrix(&models, ds)?;
        let total: f64 = ll.iter().zip(&labels).map(|(row, &l)| row[l]).sum();
        log::info!("outer iteration {outer}: total loglik {total:.4}");
        trace.push(total);
        let mut next = argmax_labels(&ll);
        if next == labels {
            converged = true;
            break;
        }
        let own: Vec<f64> = ll.iter().zip(&next).map(|(row, &l)| row[l]).collect();
        repair_empty(&mut next, c, &own);
        labels = next;
    }
    Ok(ClusterAssignment {
        ids: ds.series.iter().map(|s| s.id.clone()).collect(),
        assignment: labels,
        models,
        total_loglik_trace: trace,
        n_clusters: c,
        converged,
    })
}

/// Likelihood-initialized hard-assignment EM.
pub fn cluster_em(ds: &TimeSeriesDataset, config: &ClusterConfig) -> Result<ClusterAssignment> {
    let labels = init_clusters(ds, config)?;
    cluster_em_from(ds, labels, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCountRow {
    pub n_clusters: usize,
    pub train_loglik: f64,
    /// Held-out individuals scored under their best cluster model.
    pub heldout_loglik: f64,
}

/// Train and held-out log-likelihood per candidate cluster count, using a
/// seeded split of individuals with `holdout_fraction` held out. Picking
/// the count is left to the caller.
pub fn select_cluster_count(
    ds: &TimeSeriesDataset,
    candidates: &[usize],
    holdout_fraction: f64,
    config: &ClusterConfig,
) -> Result<Vec<ClusterCountRow>> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::param("holdout_fraction must lie in (0, 1)"));
    }
    if let Some(&c) = candidates.iter().find(|&&c| c > ds.len()) {
        return Err(Error::TooFewIndividuals {
            needed: c,
            found: ds.len(),
        });
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.fit.seed ^ 0x5eed));
    let n_test = ((ds.len() as f64 * holdout_fraction).round() as usize).clamp(1, ds.len() - 1);
    let (mut test, mut train) = (order[..n_test].to_vec(), order[n_test..].to_vec());
    test.sort_unstable();
    train.sort_unstable();
    let (train_ds, test_ds) = (ds.subset(&train)?, ds.subset(&test)?);
    candidates
        .iter()
        .map(|&c| {
            let cfg = ClusterConfig {
                n_clusters: c,
                ..config.clone()
            };
            let fit = cluster_em(&train_ds, &cfg)?;
            let ll = loglik_matrix(&fit.models, &test_ds)?;
            let heldout = ll
                .iter()
                .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .sum();
            Ok(ClusterCountRow {
                n_clusters: c,
                train_loglik: *fit.total_loglik_trace.last().unwrap(),
                heldout_loglik: heldout,
            })
        })
        .collect()
}

/// Per-cluster feature means and missing-cell fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub n_individuals: usize,
    pub feature_means: Vec<Option<f64>>,
    pub missing_fraction: f64,
}

pub fn cluster_summary(
    ds: &TimeSeriesDataset,
    assignment: &ClusterAssignment,
) -> Vec<ClusterSummary> {
    let k = ds.n_features();
    (0..assignment.n_clusters)
        .map(|c| {
            let idx = members(&assignment.assignment, c);
            let (mut sum, mut cnt) = (vec![0.0; k], vec![0usize; k]);
            let mut cells = 0usize;
            for &i in &idx {
                let s = &ds.series[i];
                cells += s.len() * k;
                for t in 0..s.len() {
                    for f in 0..k {
                        if let Some(v) = s.value(t, f) {
                            sum[f] += v;
                            cnt[f] += 1;
                        }
                    }
                }
            }
            let observed: usize = cnt.iter().sum();
            ClusterSummary {
                cluster: c,
                n_individuals: idx.len(),
                feature_means: sum
                    .iter()
                    .zip(&cnt)
                    .map(|(s, &n)| (n > 0).then(|| s / n as f64))
                    .collect(),
                missing_fraction: if cells > 0 {
                    1.0 - observed as f64 / cells as f64
                } else {
                    0.0
                },
            }
        })
        .collect()
}

pub fn write_assignment_csv<W: Write>(assignment: &ClusterAssignment, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "cluster"])?;
    for (id, c) in assignment.ids.iter().zip(&assignment.assignment) {
        w.write_record([id.as_str(), &c.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<assignment csv>", e))?;
    Ok(())
}

pub fn write_cluster_count_csv<W: Write>(rows: &[ClusterCountRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["n_clusters", "train_loglik", "heldout_loglik"])?;
    for r in rows {
        w.write_record([
            r.n_clusters.to_string(),
            r.train_loglik.to_string(),
            r.heldout_loglik.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<cluster count csv>", e))?;
    Ok(())
}

/// Rows are clusters; columns are `cluster,n_individuals,missing_fraction`
/// followed by one mean per feature.
pub fn write_summary_csv<W: Write>(
    summary: &[ClusterSummary],
    feature_names: &[String],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "cluster".to_owned(),
        "n_individuals".to_owned(),
        "missing_fraction".to_owned(),
    ];
    header.extend(feature_names.iter().cloned());
    w.write_record(&header)?;
    for s in summary {
        let mut rec = vec![
            s.cluster.to_string(),
            s.n_individuals.to_string(),
            format!("{:.4}", s.missing_fraction),
        ];
        rec.extend(
            s.feature_means
                .iter()
                .map(|m| m.map_or_else(String::new, |v| format!("{v:.4}"))),
        );
        w.write_record(&rec)?;
    }
    w.flush()
        .map_err(|e| Error::io("<cluster summary csv>", e))?;
    Ok(())
}
