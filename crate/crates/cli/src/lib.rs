//! Experiment runner: replicated optimization campaigns on built-in or
//! tabular problems, convergence statistics and latent exports.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use lvgp::benchmarks::{load_tabular, Benchmark, NoisyObjective, TabularObjective, TabularSchema};
use lvgp::engine::{read_history, seed_stream, write_history, Campaign, CampaignConfig, HistoryRecord, Objective};
use lvgp::model::{write_latents, FittedModel, LatentRow};
use lvgp::{acquisition::AcquisitionConfig, DesignSpace, Error as LvgpError, FitConfig, MixedPoint};
use rand::seq::index;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Stream of a replicate's seed reserved for observation noise.
pub const STREAM_NOISE: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Problem {
    Branin,
    GoldsteinPrice,
    Tabular {
        path: PathBuf,
        factors: Vec<String>,
        response: String,
        #[serde(default = "comma")]
        delimiter: char,
        #[serde(default)]
        levels: std::collections::HashMap<String, Vec<String>>,
        /// Initial points are drawn only from rows with a response above this.
        #[serde(default)]
        pool_threshold: Option<f64>,
    },
}

fn comma() -> char {
    ','
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: Problem,
    pub n0: usize,
    pub iterations: usize,
    #[serde(default = "one")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of added Gaussian observation noise.
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub acquisition: AcquisitionConfig,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Concurrent replicates; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
}

fn one() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing run config")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
        if let Problem::Tabular { path: table, .. } = &mut cfg.problem {
            if table.is_relative() {
                if let Some(dir) = path.parent() {
                    let candidate = dir.join(&*table);
                    if candidate.exists() {
                        *table = candidate;
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.replicates >= 1, "replicates must be at least 1");
        ensure!(self.n0 >= 1, "n0 must be at least 1");
        ensure!(
            self.noise_sd >= 0.0 && self.noise_sd.is_finite(),
            "noise_sd must be finite and nonnegative"
        );
        ensure!(self.fit.n_starts >= 1, "fit.n_starts must be at least 1");
        Ok(())
    }
}

/// Seed of replicate `r`, a pure function of the root seed and `r`.
pub fn replicate_seed(root: u64, r: usize) -> u64 {
    seed_stream(root, 1 << 32 | r as u64).next_u64()
}

/// A problem with its data loaded.
#[derive(Debug, Clone)]
pub enum LoadedProblem {
    Analytic(Benchmark),
    Table {
        table: TabularObjective,
        pool_threshold: Option<f64>,
    },
}

impl LoadedProblem {
    pub fn load(problem: &Problem) -> Result<Self> {
        Ok(match problem {
            Problem::Branin => LoadedProblem::Analytic(Benchmark::Branin),
            Problem::GoldsteinPrice => LoadedProblem::Analytic(Benchmark::GoldsteinPrice),
            Problem::Tabular {
                path,
                factors,
                response,
                delimiter,
                levels,
                pool_threshold,
            } => {
                let schema = TabularSchema {
                    factors: factors.clone(),
                    response: response.clone(),
                    delimiter: *delimiter,
                    levels: levels.clone(),
                };
                let table =
                    load_tabular(path, &schema).with_context(|| format!("loading {}", path.display()))?;
                LoadedProblem::Table {
                    table,
                    pool_threshold: *pool_threshold,
                }
            }
        })
    }

    pub fn space(&self) -> DesignSpace {
        match self {
            LoadedProblem::Analytic(b) => b.space(),
            LoadedProblem::Table { table, .. } => table.space().clone(),
        }
    }

    /// Known optimum value: published for the analytic functions, an
    /// exhaustive scan for tables.
    pub fn optimum(&self) -> f64 {
        match self {
            LoadedProblem::Analytic(b) => b.known_minimum(),
            LoadedProblem::Table { table, .. } => table.exhaustive_oracle().1,
        }
    }

    /// Rows eligible for the initial design of a tabular problem.
    pub fn initial_pool(&self) -> Option<Vec<MixedPoint>> {
        let LoadedProblem::Table { table, pool_threshold } = self else {
            return None;
        };
        let pool = table
            .tuples()
            .iter()
            .filter(|t| pool_threshold.is_none_or(|thr| table.lookup(t).unwrap() > thr))
            .map(|t| MixedPoint::qual(t.clone()))
            .collect();
        Some(pool)
    }

    fn objective(&self) -> Box<dyn Objective + Send> {
        match self {
            LoadedProblem::Analytic(b) => Box::new(*b),
            LoadedProblem::Table { table, .. } => Box::new(table.clone()),
        }
    }
}

/// Health of every model fitted during a replicate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelChecks {
    pub fits: usize,
    pub deterministic_fits: usize,
    /// Largest `|prediction - observation|` at training points over the
    /// deterministic fits, in response units.
    pub max_interpolation_error: f64,
    /// Same, relative to the response scale of each fit.
    pub max_relative_interpolation_error: f64,
    pub min_variance: f64,
    pub probes: usize,
}

impl ModelChecks {
    fn new() -> Self {
        Self {
            min_variance: f64::INFINITY,
            ..Default::default()
        }
    }

    fn record(&mut self, model: &FittedModel, probes: &[MixedPoint]) {
        self.fits += 1;
        let deterministic = !model.layout().noisy();
        if deterministic {
            self.deterministic_fits += 1;
        }
        let scale = model.standardization().scale;
        for (p, &y) in model.data().points.iter().zip(&model.data().responses) {
            let pred = model.predict(p).expect("training point is valid");
            self.min_variance = self.min_variance.min(pred.variance);
            self.probes += 1;
            if deterministic {
                let err = (pred.mean - y).abs();
                self.max_interpolation_error = self.max_interpolation_error.max(err);
                self.max_relative_interpolation_error = self.max_relative_interpolation_error.max(err / scale);
            }
        }
        for p in probes {
            let pred = model.predict(p).expect("probe is valid");
            self.min_variance = self.min_variance.min(pred.variance);
            self.probes += 1;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub seed: u64,
    pub history: Vec<HistoryRecord>,
    pub final_incumbent: Option<f64>,
    pub best_point: Option<MixedPoint>,
    /// Whether the table's exact optimum was found (tabular problems only).
    pub success: Option<bool>,
    pub latents: Vec<LatentRow>,
    pub checks: ModelChecks,
    #[serde(skip)]
    pub final_model: Option<FittedModel>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Check every fitted model at its training points and at random probes.
    pub check_models: bool,
    /// Skip writing files.
    pub dry_run: bool,
}

fn campaign_config(cfg: &RunConfig, problem: &LoadedProblem, seed: u64) -> Result<CampaignConfig> {
    let mut fit = cfg.fit.clone();
    if cfg.noise_sd > 0.0 {
        fit.noisy = true;
    }
    let mut acquisition = cfg.acquisition.clone();
    let mut initial_points = None;
    if let LoadedProblem::Table { table, .. } = problem {
        let pool = problem.initial_pool().expect("tabular problem");
        ensure!(
            pool.len() >= cfg.n0,
            "initial pool has {} rows, fewer than n0 = {}",
            pool.len(),
            cfg.n0
        );
        let mut rng = seed_stream(seed, lvgp::engine::STREAM_DESIGN);
        let picks = index::sample(&mut rng, pool.len(), cfg.n0);
        initial_points = Some(picks.into_iter().map(|i| pool[i].clone()).collect());
        acquisition.candidates = Some(table.candidates());
    }
    Ok(CampaignConfig {
        n0: cfg.n0,
        max_iterations: cfg.iterations,
        seed,
        fit,
        acquisition,
        initial_points,
        max_evaluations: None,
    })
}

/// Runs one replicate to completion.
pub fn run_replicate(cfg: &RunConfig, problem: &LoadedProblem, r: usize, opts: RunOptions) -> Result<ReplicateOutcome> {
    let seed = replicate_seed(cfg.seed, r);
    let space = problem.space();
    let ccfg = campaign_config(cfg, problem, seed)?;
    let mut objective: Box<dyn Objective + Send> = problem.objective();
    if cfg.noise_sd > 0.0 {
        let noise_seed = seed_stream(seed, STREAM_NOISE).next_u64();
        objective = Box::new(NoisyObjective::new(objective, cfg.noise_sd, noise_seed));
    }
    let mut campaign = Campaign::new(space.clone(), ccfg)?;
    let mut checks = ModelChecks::new();
    let mut probe_rng = seed_stream(seed, STREAM_NOISE + 1);
    loop {
        let point = match campaign.ask() {
            Ok(p) => p,
            Err(LvgpError::BudgetExhausted | LvgpError::ExhaustedSpace) => break,
            Err(e) => return Err(e.into()),
        };
        if opts.check_models {
            if let Some(model) = campaign.last_model().filter(|m| m.n() == campaign.data().len()) {
                let probes = random_probes(&space, 20, &mut probe_rng);
                checks.record(model, &probes);
            }
        }
        let y = objective.evaluate(&point).unwrap_or_else(|e| {
            log::warn!("replicate {r}: evaluation failed at {point:?}: {e}");
            f64::NAN
        });
        campaign.tell(&point, y)?;
    }
    let final_model = match campaign.fit_current() {
        Ok(m) => Some(m),
        Err(e) => {
            log::warn!("replicate {r}: final fit failed: {e}");
            None
        }
    };
    if opts.check_models {
        if let Some(m) = &final_model {
            let probes = random_probes(&space, 20, &mut probe_rng);
            checks.record(m, &probes);
        }
    }
    let best = campaign.best();
    let success = match problem {
        LoadedProblem::Table { .. } => Some(best.as_ref().is_some_and(|(_, y)| *y <= problem.optimum())),
        LoadedProblem::Analytic(_) => None,
    };
    Ok(ReplicateOutcome {
        replicate: r,
        seed,
        history: campaign.history().to_vec(),
        final_incumbent: best.as_ref().map(|b| b.1),
        best_point: best.map(|b| b.0),
        success,
        latents: final_model.as_ref().map(FittedModel::export_latents).unwrap_or_default(),
        checks,
        final_model,
    })
}

fn random_probes(space: &DesignSpace, n: usize, rng: &mut impl RngCore) -> Vec<MixedPoint> {
    use rand::Rng;
    let counts = space.level_counts();
    (0..n)
        .map(|_| {
            let u: Vec<f64> = (0..space.n_quant()).map(|_| rng.random()).collect();
            let t = counts.iter().map(|&m| rng.random_range(1..=m)).collect();
            space.denormalize(&MixedPoint::new(u, t))
        })
        .collect()
}

/// Median and raw median absolute deviation of one column of values.
pub fn median_mad(values: &[f64]) -> (f64, f64) {
    let med = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    (med, median(&dev))
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    /// 1-based position in the history.
    pub evaluation: usize,
    /// 0 for the initial design.
    pub iteration: usize,
    pub median: f64,
    pub mad: f64,
    /// Replicates with at least one successful evaluation by this point.
    pub count: usize,
}

/// Per-position median and MAD of the incumbent across equally long
/// histories.
pub fn aggregate(histories: &[(String, Vec<HistoryRecord>)]) -> Result<Vec<ConvergenceRow>> {
    ensure!(!histories.is_empty(), "no histories to aggregate");
    let len = histories[0].1.len();
    let bad: Vec<String> = histories
        .iter()
        .filter(|(_, h)| h.len() != len)
        .map(|(name, h)| format!("{name} ({} rows)", h.len()))
        .collect();
    if !bad.is_empty() {
        bail!(
            "history lengths differ from {} ({len} rows): {}",
            histories[0].0,
            bad.join(", ")
        );
    }
    let mut rows = Vec::with_capacity(len);
    for i in 0..len {
        let vals: Vec<f64> = histories.iter().filter_map(|(_, h)| h[i].incumbent).collect();
        let (median, mad) = median_mad(&vals);
        rows.push(ConvergenceRow {
            evaluation: i + 1,
            iteration: histories[0].1[i].iteration,
            median,
            mad,
            count: vals.len(),
        });
    }
    Ok(rows)
}

pub fn write_convergence<W: Write>(rows: &[ConvergenceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["evaluation", "iteration", "median_incumbent", "mad_incumbent", "replicates"])?;
    for r in rows {
        w.write_record([
            r.evaluation.to_string(),
            r.iteration.to_string(),
            format!("{:?}", r.median),
            format!("{:?}", r.mad),
            r.count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history_file(path: &Path) -> Result<Vec<HistoryRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_history(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

/// Result of a full experiment.
#[derive(Debug)]
pub struct ExperimentSummary {
    pub outcomes: Vec<ReplicateOutcome>,
    pub failures: Vec<(usize, String)>,
    pub convergence: Vec<ConvergenceRow>,
    pub optimum: f64,
}

impl ExperimentSummary {
    pub fn final_incumbents(&self) -> Vec<f64> {
        self.outcomes.iter().filter_map(|o| o.final_incumbent).collect()
    }

    pub fn successes(&self) -> Option<usize> {
        let flags: Vec<bool> = self.outcomes.iter().filter_map(|o| o.success).collect();
        (!flags.is_empty()).then(|| flags.iter().filter(|&&s| s).count())
    }
}

fn replicate_file(dir: &Path, stem: &str, r: usize, ext: &str) -> PathBuf {
    dir.join(format!("{stem}_{r:03}.{ext}"))
}

/// Runs every replicate (concurrently, up to `workers`) and writes the
/// results bundle to the output directory.
pub fn run_experiment(cfg: &RunConfig, opts: RunOptions) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let problem = LoadedProblem::load(&cfg.problem)?;
    if let Some(pool) = problem.initial_pool() {
        ensure!(
            pool.len() >= cfg.n0,
            "initial pool has {} rows, fewer than n0 = {}",
            pool.len(),
            cfg.n0
        );
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build()?;
    let results: Vec<(usize, Result<ReplicateOutcome>)> = pool.install(|| {
        (0..cfg.replicates)
            .into_par_iter()
            .map(|r| (r, run_replicate(cfg, &problem, r, opts)))
            .collect()
    });

    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in results {
        match res {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                log::error!("replicate {r} failed: {e:#}");
                failures.push((r, format!("{e:#}")));
            }
        }
    }
    let named: Vec<(String, Vec<HistoryRecord>)> = outcomes
        .iter()
        .map(|o| (format!("history_{:03}.jsonl", o.replicate), o.history.clone()))
        .collect();
    let convergence = if named.is_empty() { Vec::new() } else { aggregate(&named)? };
    let summary = ExperimentSummary {
        outcomes,
        failures,
        convergence,
        optimum: problem.optimum(),
    };
    if !opts.dry_run {
        write_bundle(cfg, &problem, &summary)?;
    }
    Ok(summary)
}

fn write_bundle(cfg: &RunConfig, problem: &LoadedProblem, summary: &ExperimentSummary) -> Result<()> {
    let dir = &cfg.output;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), toml::to_string(cfg)?)?;
    for o in &summary.outcomes {
        let f = File::create(replicate_file(dir, "history", o.replicate, "jsonl"))?;
        write_history(&o.history, BufWriter::new(f))?;
        if let Some(m) = &o.final_model {
            if !o.latents.is_empty() {
                let f = File::create(replicate_file(dir, "latents", o.replicate, "csv"))?;
                write_latents(&o.latents, BufWriter::new(f), b',')?;
            }
            let f = File::create(replicate_file(dir, "model", o.replicate, "json"))?;
            serde_json::to_writer(BufWriter::new(f), &m.to_saved())?;
        }
    }
    write_convergence(&summary.convergence, BufWriter::new(File::create(dir.join("convergence.csv"))?))?;

    let space = problem.space();
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["replicate", "seed", "status", "evaluations", "failed_evaluations", "final_incumbent", "best_point", "success"])?;
    let mut rows: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for o in &summary.outcomes {
        rows.insert(
            o.replicate,
            vec![
                o.replicate.to_string(),
                o.seed.to_string(),
                "ok".into(),
                o.history.len().to_string(),
                o.history.iter().filter(|h| h.failed()).count().to_string(),
                o.final_incumbent.map(|v| format!("{v:?}")).unwrap_or_default(),
                o.best_point.as_ref().map(|p| describe(&space, p)).unwrap_or_default(),
                o.success.map(|s| s.to_string()).unwrap_or_default(),
            ],
        );
    }
    for (r, msg) in &summary.failures {
        rows.insert(
            *r,
            vec![
                r.to_string(),
                replicate_seed(cfg.seed, *r).to_string(),
                format!("failed: {msg}"),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ],
        );
    }
    for row in rows.values() {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Human-readable rendering of a point with level labels.
pub fn describe(space: &DesignSpace, p: &MixedPoint) -> String {
    let mut parts: Vec<String> = space
        .quant()
        .iter()
        .zip(&p.x)
        .map(|(q, v)| format!("{}={v}", q.name))
        .collect();
    parts.extend(
        space
            .qual()
            .iter()
            .zip(&p.t)
            .map(|(q, &l)| format!("{}={}", q.name, q.levels[l - 1])),
    );
    parts.join(" ")
}

/// Reads a saved model and returns its latent embedding.
pub fn latents_from_model(path: &Path) -> Result<Vec<LatentRow>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let saved = serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))?;
    Ok(FittedModel::from_saved(&saved)?.export_latents())
}
