// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON run configuration. Every section is optional and filled from
//! defaults; command-line flags are applied on top.

use std::path::Path;

use anyhow::{Context, Result};
use cyhmm::benchmark::{BenchmarkGrid, BenchmarkOptions};
use cyhmm::clustering::ClusterConfig;
use cyhmm::simulation::SimulationConfig;
use cyhmm::training::FitConfig;
use cyhmm::FeatureKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides every section's seed when set.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub output_dir: Option<String>,
    pub simulation: SimulationConfig,
    pub preprocess: Preprocess,
    pub fit: FitConfig,
    pub analysis: Analysis,
    pub cluster: ClusterConfig,
    pub cluster_selection: ClusterSelection,
    pub selection: StateSelection,
    pub benchmark: Benchmark,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Preprocess {
    pub kind: FeatureKind,
    /// Centered moving-average window; continuous data only.
    pub detrend_window: Option<usize>,
    /// Drop individuals logging on fewer than this fraction of timesteps.
    pub min_active_fraction: Option<f64>,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            kind: FeatureKind::Continuous,
            detrend_window: None,
            min_active_fraction: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Analysis {
    /// Trajectory length; defaults to the model's expected cycle length.
    pub horizon: Option<usize>,
    pub boundary_state: usize,
}

impl Default for Analysis {
    fn default() -> Self {
        Analysis {
            horizon: None,
            boundary_state: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSelection {
    /// Candidate cluster counts; empty skips the diagnostics table.
    pub candidates: Vec<usize>,
    pub holdout_fraction: f64,
}

impl Default for ClusterSelection {
    fn default() -> Self {
        ClusterSelection {
            candidates: Vec::new(),
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StateSelection {
    pub candidates: Vec<usize>,
    pub folds: usize,
}

impl Default for StateSelection {
    fn default() -> Self {
        StateSelection {
            candidates: vec![2, 4, 8],
            folds: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Benchmark {
    pub grid: BenchmarkGrid,
    pub options: BenchmarkOptions,
    pub binary_trials: usize,
    pub continuous_trials: usize,
    pub methods: Vec<String>,
}

impl Default for Benchmark {
    fn default() -> Self {
        Benchmark {
            grid: BenchmarkGrid::default(),
            options: BenchmarkOptions::default(),
            binary_trials: 20,
            continuous_trials: 20,
            methods: [
                "cyhmm",
                "autocorrelation",
                "fourier",
                "partial_periodicity_d2",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("config {} does not match the schema", path.display()))
    }

    /// Pushes the top-level seed into every section.
    pub fn propagate_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.simulation.seed = seed;
            self.fit.seed = seed;
            self.cluster.fit.seed = seed;
            self.benchmark.options.fit.seed = seed;
        }
    }
}
