// SPDX-License-Identifier: MIT OR Apache-2.0

//! `cyhmm` command-line pipeline.

mod config;
mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cyhmm::analysis::{
    cycle_lengths_at, feature_trajectories, feature_variability, write_trajectories_csv,
    write_variability_csv,
};
use cyhmm::benchmark::{benchmark, write_error_table_csv, write_estimates_csv, Method};
use cyhmm::clustering::{
    cluster_em, cluster_summary, select_cluster_count, write_assignment_csv,
    write_cluster_count_csv, write_summary_csv,
};
use cyhmm::dataset::{apply_binary_missing_rule, detrend, filter_active, load_csv, write_csv};
use cyhmm::model::DurationKind;
use cyhmm::simulation::{simulate, write_truth_csv, write_truth_trajectories_csv};
use cyhmm::training::{em_fit, state_count_scores};
use cyhmm::{CyhmmModel, FeatureKind, TimeSeriesDataset};
use serde::Serialize;

use config::RunConfig;
use output::{digests, Manifest, OutputDir};

#[derive(Parser)]
#[command(
    name = "cyhmm",
    version,
    about = "Cyclic hidden Markov models for multivariate time series"
)]
struct Cli {
    /// JSON run configuration; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving every artifact.
    #[arg(short, long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true, env = "CYHMM_THREADS")]
    threads: Option<usize>,
    /// Repeat for more logging.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Simulate(SimulateArgs),
    /// Fit a model to a CSV dataset.
    Fit(FitArgs),
    /// Cycle lengths, trajectories and variability from a fitted model.
    Analyze(AnalyzeArgs),
    /// Hard-assignment clustering over per-cluster models.
    Cluster(ClusterArgs),
    /// Compare cycle-length estimators on simulated trials.
    Benchmark(BenchmarkArgs),
    /// Subtract a centered moving average from continuous data.
    Detrend(DetrendArgs),
    /// Cross-validated comparison of state counts.
    SelectStates(SelectArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Dataset CSV (`id,t,<features...>`).
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long)]
    kind: Option<FeatureKind>,
    #[arg(long)]
    detrend_window: Option<usize>,
    #[arg(long)]
    min_active_fraction: Option<f64>,
}

#[derive(Args)]
struct FitFlags {
    #[arg(long)]
    n_states: Option<usize>,
    #[arg(long)]
    cycle_length: Option<f64>,
    /// Comma-separated cycle lengths to initialize from.
    #[arg(long, value_delimiter = ',')]
    init_grid: Option<Vec<f64>>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    rel_tol: Option<f64>,
    #[arg(long)]
    duration_family: Option<DurationKind>,
    #[arg(long)]
    d_max: Option<usize>,
}

impl FitFlags {
    fn apply(&self, fit: &mut cyhmm::training::FitConfig) {
        if let Some(v) = self.n_states {
            fit.n_states = v;
        }
        if let Some(v) = self.cycle_length {
            fit.cycle_length = v;
        }
        if let Some(v) = &self.init_grid {
            fit.init_grid = v.clone();
        }
        if let Some(v) = self.max_iters {
            fit.max_iters = v;
        }
        if let Some(v) = self.rel_tol {
            fit.rel_tol = v;
        }
        if let Some(v) = self.duration_family {
            fit.duration_family = v;
        }
        if self.d_max.is_some() {
            fit.d_max = self.d_max;
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    n_individuals: Option<usize>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    n_features: Option<usize>,
    #[arg(long)]
    kind: Option<FeatureKind>,
    #[arg(long)]
    cycle_length: Option<f64>,
    #[arg(long)]
    sigma_between: Option<f64>,
    #[arg(long)]
    sigma_within: Option<f64>,
    #[arg(long)]
    sigma_noise: Option<f64>,
    #[arg(long)]
    p_missing: Option<f64>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Fitted model JSON.
    #[arg(short, long)]
    model: PathBuf,
    #[arg(long)]
    horizon: Option<usize>,
    /// State whose entries mark cycle boundaries.
    #[arg(long)]
    boundary_state: Option<usize>,
}

#[derive(Args)]
struct ClusterArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    fit: FitFlags,
    #[arg(short = 'c', long)]
    n_clusters: Option<usize>,
    #[arg(long)]
    n_seed_models: Option<usize>,
    /// Divide log-likelihoods by series length before z-scoring.
    #[arg(long)]
    per_timestep: bool,
    /// Also report train/held-out log-likelihood for these cluster counts.
    #[arg(long, value_delimiter = ',')]
    candidates: Option<Vec<usize>>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    binary_trials: Option<usize>,
    #[arg(long)]
    continuous_trials: Option<usize>,
    #[arg(long)]
    n_individuals: Option<usize>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Args)]
struct DetrendArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    fit: FitFlags,
    #[arg(long, value_delimiter = ',')]
    candidates: Option<Vec<usize>>,
    #[arg(long)]
    folds: Option<usize>,
}

struct Run {
    out: OutputDir,
    inputs: Vec<PathBuf>,
    threads: usize,
}

impl Run {
    fn finish<C: Serialize>(mut self, command: &str, config: &C) -> Result<()> {
        let inputs: Vec<&Path> = self.inputs.iter().map(PathBuf::as_path).collect();
        let mut outputs = self.out.written().to_vec();
        outputs.push("run_manifest.json".into());
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            threads: self.threads,
            config,
            inputs: digests(&inputs)?,
            outputs,
        };
        self.out.write_json("run_manifest.json", &manifest)?;
        Ok(())
    }
}

fn apply_input(cfg: &mut RunConfig, input: &InputArgs) {
    if let Some(k) = input.kind {
        cfg.preprocess.kind = k;
    }
    if input.detrend_window.is_some() {
        cfg.preprocess.detrend_window = input.detrend_window;
    }
    if input.min_active_fraction.is_some() {
        cfg.preprocess.min_active_fraction = input.min_active_fraction;
    }
}

/// Loads a dataset and applies the configured preprocessing. Binary data
/// always goes through the logged-anything rule.
fn load_dataset(path: &Path, cfg: &RunConfig, kind: FeatureKind) -> Result<TimeSeriesDataset> {
    let mut ds = load_csv(path, kind).with_context(|| format!("loading {}", path.display()))?;
    if kind == FeatureKind::Binary {
        ds = apply_binary_missing_rule(ds)?;
    }
    if let Some(f) = cfg.preprocess.min_active_fraction {
        ds = filter_active(&ds, f)?;
    }
    if let Some(w) = cfg.preprocess.detrend_window {
        ds = detrend(&ds, w)?;
    }
    log::info!(
        "loaded {} individuals, {} features, {} observed cells",
        ds.len(),
        ds.n_features(),
        ds.observed_cells()
    );
    Ok(ds)
}

fn csv_to_string(f: impl FnOnce(&mut Vec<u8>) -> cyhmm::Result<()>) -> Result<String> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(String::from_utf8(buf)?)
}

fn cmd_simulate(mut cfg: RunConfig, args: &SimulateArgs, mut run: Run) -> Result<()> {
    let s = &mut cfg.simulation;
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = args.$f { s.$f = v; } )* };
    }
    set!(
        n_individuals,
        t_max,
        n_features,
        kind,
        cycle_length,
        sigma_between,
        sigma_within,
        sigma_noise,
        p_missing
    );
    let sim = simulate(&cfg.simulation)?;
    run.out
        .write_text("data.csv", &csv_to_string(|b| write_csv(&sim.dataset, b))?)?;
    run.out.write_text(
        "truth.csv",
        &csv_to_string(|b| write_truth_csv(&sim.truth, b))?,
    )?;
    run.out.write_text(
        "truth_trajectories.csv",
        &csv_to_string(|b| {
            write_truth_trajectories_csv(&sim.truth_trajectories, &sim.dataset.feature_names, b)
        })?,
    )?;
    run.finish("simulate", &cfg)
}

fn cmd_fit(mut cfg: RunConfig, args: &FitArgs, mut run: Run) -> Result<()> {
    apply_input(&mut cfg, &args.input);
    args.fit.apply(&mut cfg.fit);
    let ds = load_dataset(&args.input.input, &cfg, cfg.preprocess.kind)?;
    run.inputs.push(args.input.input.clone());
    let started = Instant::now();
    let fit = em_fit(&cfg.fit, &ds)?;
    log::info!(
        "fit finished in {:.1?}: loglik {:.4}, expected cycle length {:.2}",
        started.elapsed(),
        fit.final_loglik(),
        fit.model.expected_cycle_length()
    );
    run.out.write_text("model.json", &fit.model.to_json()?)?;
    let mut trace = String::from("iteration,loglik\n");
    for (i, ll) in fit.loglik_trace.iter().enumerate() {
        trace.push_str(&format!("{i},{ll}\n"));
    }
    run.out.write_text("loglik_trace.csv", &trace)?;
    run.out.write_json(
        "fit_summary.json",
        &serde_json::json!({
            "final_loglik": fit.final_loglik(),
            "iterations": fit.loglik_trace.len(),
            "converged": fit.converged,
            "chosen_init": fit.chosen_init,
            "init_logliks": fit.init_logliks,
            "expected_cycle_length": fit.model.expected_cycle_length(),
        }),
    )?;
    run.finish("fit", &cfg)
}

fn cmd_analyze(mut cfg: RunConfig, args: &AnalyzeArgs, mut run: Run) -> Result<()> {
    apply_input(&mut cfg, &args.input);
    if args.horizon.is_some() {
        cfg.analysis.horizon = args.horizon;
    }
    if let Some(b) = args.boundary_state {
        cfg.analysis.boundary_state = b;
    }
    let text = std::fs::read_to_string(&args.model)
        .with_context(|| format!("reading {}", args.model.display()))?;
    let model = CyhmmModel::from_json(&text)?;
    let ds = load_dataset(&args.input.input, &cfg, model.kind())?;
    run.inputs.push(args.model.clone());
    run.inputs.push(args.input.input.clone());

    let cycles = cycle_lengths_at(&model, &ds, cfg.analysis.boundary_state)?;
    run.out.write_json("cycle_lengths.json", &cycles)?;
    let mut per = String::from("id,n_gaps,mean,median,mode\n");
    let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
    for c in &cycles.per_individual {
        per.push_str(&format!(
            "{},{},{},{},{}\n",
            c.id,
            c.gaps.len(),
            fmt(c.mean),
            fmt(c.median),
            fmt(c.mode.map(|m| m as f64))
        ));
    }
    run.out.write_text("cycle_lengths.csv", &per)?;

    let horizon = cfg
        .analysis
        .horizon
        .unwrap_or_else(|| (model.expected_cycle_length().round() as usize).max(1));
    let traj = feature_trajectories(&model, horizon)?;
    run.out.write_json("trajectories.json", &traj)?;
    run.out.write_text(
        "trajectories.csv",
        &csv_to_string(|b| write_trajectories_csv(&traj, &ds.feature_names, b))?,
    )?;
    let ranked = feature_variability(&traj);
    run.out.write_text(
        "variability.csv",
        &csv_to_string(|b| write_variability_csv(&ranked, &ds.feature_names, b))?,
    )?;
    run.finish("analyze", &cfg)
}

fn cmd_cluster(mut cfg: RunConfig, args: &ClusterArgs, mut run: Run) -> Result<()> {
    apply_input(&mut cfg, &args.input);
    args.fit.apply(&mut cfg.cluster.fit);
    if let Some(c) = args.n_clusters {
        cfg.cluster.n_clusters = c;
    }
    if args.n_seed_models.is_some() {
        cfg.cluster.n_seed_models = args.n_seed_models;
    }
    if args.per_timestep {
        cfg.cluster.per_timestep = true;
    }
    if let Some(c) = &args.candidates {
        cfg.cluster_selection.candidates = c.clone();
    }
    let ds = load_dataset(&args.input.input, &cfg, cfg.preprocess.kind)?;
    run.inputs.push(args.input.input.clone());

    let result = cluster_em(&ds, &cfg.cluster)?;
    log::info!("cluster sizes {:?}", result.cluster_sizes());
    run.out.write_text(
        "assignment.csv",
        &csv_to_string(|b| write_assignment_csv(&result, b))?,
    )?;
    for (c, m) in result.models.iter().enumerate() {
        run.out
            .write_text(&format!("cluster_{c}_model.json"), &m.to_json()?)?;
    }
    let summary = cluster_summary(&ds, &result);
    run.out.write_text(
        "cluster_summary.csv",
        &csv_to_string(|b| write_summary_csv(&summary, &ds.feature_names, b))?,
    )?;
    let mut trace = String::from("outer_iteration,total_loglik\n");
    for (i, ll) in result.total_loglik_trace.iter().enumerate() {
        trace.push_str(&format!("{i},{ll}\n"));
    }
    run.out.write_text("cluster_trace.csv", &trace)?;
    if !cfg.cluster_selection.candidates.is_empty() {
        let rows = select_cluster_count(
            &ds,
            &cfg.cluster_selection.candidates,
            cfg.cluster_selection.holdout_fraction,
            &cfg.cluster,
        )?;
        run.out.write_text(
            "cluster_counts.csv",
            &csv_to_string(|b| write_cluster_count_csv(&rows, b))?,
        )?;
    }
    run.finish("cluster", &cfg)
}

fn cmd_benchmark(mut cfg: RunConfig, args: &BenchmarkArgs, mut run: Run) -> Result<()> {
    let b = &mut cfg.benchmark;
    if let Some(n) = args.binary_trials {
        b.binary_trials = n;
    }
    if let Some(n) = args.continuous_trials {
        b.continuous_trials = n;
    }
    if let Some(n) = args.n_individuals {
        b.grid.base.n_individuals = n;
    }
    if let Some(m) = &args.methods {
        b.methods = m.clone();
    }
    args.fit.apply(&mut b.options.fit);
    let methods: Vec<Method> = b
        .methods
        .iter()
        .map(|m| m.parse())
        .collect::<cyhmm::Result<_>>()?;
    let seed = cfg.seed.unwrap_or(b.grid.base.seed);
    let mut report_trials = Vec::new();
    let mut tables = serde_json::Map::new();
    for (kind, n) in [
        (FeatureKind::Binary, b.binary_trials),
        (FeatureKind::Continuous, b.continuous_trials),
    ] {
        if n == 0 {
            continue;
        }
        let configs = b.grid.sample(kind, n, seed)?;
        let mut sims = Vec::with_capacity(n);
        for c in &configs {
            sims.push(simulate(c)?);
        }
        let report = benchmark(&sims, &methods, &b.options)?;
        let name = format!("{kind:?}").to_lowercase();
        run.out.write_text(
            &format!("error_table_{name}.csv"),
            &csv_to_string(|w| write_error_table_csv(&report.table, w))?,
        )?;
        tables.insert(name, serde_json::to_value(&report.table)?);
        report_trials.extend(report.trials);
    }
    if report_trials.is_empty() {
        bail!("no trials requested");
    }
    let pooled = cyhmm::benchmark::error_table(&report_trials);
    tables.insert("all".into(), serde_json::to_value(&pooled)?);
    run.out.write_text(
        "error_table.csv",
        &csv_to_string(|w| write_error_table_csv(&pooled, w))?,
    )?;
    run.out.write_json("error_table.json", &tables)?;
    run.out.write_text(
        "estimates.csv",
        &csv_to_string(|w| write_estimates_csv(&report_trials, w))?,
    )?;
    run.out.write_json("trials.json", &report_trials)?;
    run.finish("benchmark", &cfg)
}

fn cmd_detrend(mut cfg: RunConfig, args: &DetrendArgs, mut run: Run) -> Result<()> {
    if args.window.is_some() {
        cfg.preprocess.detrend_window = args.window;
    }
    let Some(window) = cfg.preprocess.detrend_window else {
        bail!("detrend needs --window or preprocess.detrend_window in the config");
    };
    let ds = load_csv(&args.input, FeatureKind::Continuous)?;
    run.inputs.push(args.input.clone());
    let out = detrend(&ds, window)?;
    run.out
        .write_text("detrended.csv", &csv_to_string(|b| write_csv(&out, b))?)?;
    run.finish("detrend", &cfg)
}

fn cmd_select_states(mut cfg: RunConfig, args: &SelectArgs, mut run: Run) -> Result<()> {
    apply_input(&mut cfg, &args.input);
    args.fit.apply(&mut cfg.fit);
    if let Some(c) = &args.candidates {
        cfg.selection.candidates = c.clone();
    }
    if let Some(f) = args.folds {
        cfg.selection.folds = f;
    }
    let ds = load_dataset(&args.input.input, &cfg, cfg.preprocess.kind)?;
    run.inputs.push(args.input.input.clone());
    let mut scores = state_count_scores(
        &ds,
        &cfg.selection.candidates,
        cfg.selection.folds,
        &cfg.fit,
    )?;
    scores.sort_by_key(|s| s.n_states);
    let best = scores
        .iter()
        .fold(None::<&cyhmm::training::StateCountScore>, |b, s| match b {
            Some(b) if b.heldout_per_cell >= s.heldout_per_cell => Some(b),
            _ => Some(s),
        })
        .map(|s| s.n_states);
    let mut csv = String::from("n_states,heldout_loglik_per_cell\n");
    for s in &scores {
        csv.push_str(&format!("{},{}\n", s.n_states, s.heldout_per_cell));
    }
    run.out.write_text("state_selection.csv", &csv)?;
    run.out.write_json(
        "state_selection.json",
        &serde_json::json!({ "scores": scores, "selected": best }),
    )?;
    println!("selected n_states = {}", best.unwrap_or(0));
    run.finish("select-states", &cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = Some(dir.display().to_string());
    }
    cfg.propagate_seed();
    if let Some(n) = cfg.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let threads = rayon::current_num_threads();
    let out = OutputDir::create(cfg.output_dir.clone().unwrap_or_else(|| "cyhmm_out".into()))?;
    let mut inputs = Vec::new();
    if let Some(c) = &cli.config {
        inputs.push(c.clone());
    }
    let run = Run {
        out,
        inputs,
        threads,
    };
    log::info!(
        "writing to {} with {threads} threads",
        run.out.path().display()
    );

    let started = Instant::now();
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(cfg, a, run),
        Command::Fit(a) => cmd_fit(cfg, a, run),
        Command::Analyze(a) => cmd_analyze(cfg, a, run),
        Command::Cluster(a) => cmd_cluster(cfg, a, run),
        Command::Benchmark(a) => cmd_benchmark(cfg, a, run),
        Command::Detrend(a) => cmd_detrend(cfg, a, run),
        Command::SelectStates(a) => cmd_select_states(cfg, a, run),
    }?;
    log::info!("done in {:.1?}", started.elapsed());
    Ok(())
}
