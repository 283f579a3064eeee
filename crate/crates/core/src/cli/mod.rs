//! Experiment runner behind the `rdecomp` binary.
//!
//! A run directory looks like
//!
//! ```text
//! <root>/<name>/
//!   config.toml          copy of the input config
//!   summary.json         per-seed scores and the selected run
//!   seeds/seed_<k>/      log.csv, result.json
//!   best/                log.csv, result.json, decomposition.csv, metrics.json,
//!                        theorem1.csv, factor_<i>.{pgm,txt}, partition.{pgm,txt},
//!                        policy_<i>.txt
//!   induced/             curves.csv, summary.json (when enabled)
//!   INCOMPLETE           present only while running or after a failure
//! ```

pub mod artifacts;
pub mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomp::{best_run_index, evaluate_objective, optimal_tables, train, AlphaScheme, TrainResult, TrainerMode};
use crate::error::{Error, Result};
use crate::induced::{generalization_experiment, induce, PairedCurves};
use crate::mdp::{build_gridworld, simulate_trajectory, TabularMdp};
use crate::metrics::{self, TheoremOneRecord};
use crate::planner::{self, DeterministicPolicy, DEFAULT_TOLERANCE};

use artifacts::{read_json, write_json, write_text, LOG_FILE, RESULT_FILE};
pub use config::{load_config, parse_config, ConfigError, ExperimentConfig, Region};

pub const OUTPUT_ROOT_VAR: &str = "RDECOMP_OUTPUT_ROOT";
pub const WORKERS_VAR: &str = "RDECOMP_WORKERS";
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

#[derive(Debug, Parser)]
#[command(
    name = "rdecomp",
    version,
    about = "Learn and inspect reward decompositions on gridworlds"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every seed, select the best run and write all artifacts.
    Train { config: PathBuf },
    /// Re-evaluate the saved best decomposition.
    Eval { run_dir: PathBuf },
    /// Recompute metric reports for the saved best decomposition.
    Metrics { run_dir: PathBuf },
    /// Run the restricted-reward control experiment with the learned policies.
    Induced { config: PathBuf },
    /// Re-render heatmaps and policy maps.
    Viz { run_dir: PathBuf },
}

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Runtime(e) => write!(f, "run failed: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

/// Settings taken from the environment rather than the config file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Overrides {
    pub output_root: Option<PathBuf>,
    pub workers: Option<usize>,
}

impl Overrides {
    pub fn from_env() -> std::result::Result<Self, ConfigError> {
        let output_root = std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from);
        let workers = match std::env::var(WORKERS_VAR) {
            Ok(text) => match text.trim().parse::<usize>() {
                Ok(n) if n > 0 => Some(n),
                _ => {
                    return Err(ConfigError {
                        origin: WORKERS_VAR.into(),
                        line: None,
                        message: format!("expected a positive integer, got {text:?}"),
                    })
                }
            },
            Err(_) => None,
        };
        Ok(Self { output_root, workers })
    }
}

pub fn run_dir_for(config: &ExperimentConfig, config_path: &Path, overrides: &Overrides) -> PathBuf {
    let root = overrides
        .output_root
        .clone()
        .unwrap_or_else(|| PathBuf::from(&config.run.output_dir));
    let name = config.run.name.clone().unwrap_or_else(|| {
        config_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    });
    root.join(name)
}

fn base_mdp(config: &ExperimentConfig) -> Result<TabularMdp> {
    build_gridworld(&config.gridworld)?.with_discount(config.trainer.discount)
}

fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join("seeds").join(format!("seed_{seed}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub j_disentangled: f64,
    pub trivial: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: TrainerMode,
    pub n_factors: usize,
    pub alpha: AlphaScheme,
    pub seeds: Vec<SeedSummary>,
    pub best_seed: u64,
    pub best_index: usize,
}

fn prepare_run_dir(run_dir: &Path) -> Result<()> {
    if run_dir.exists() {
        if run_dir.join("config.toml").exists() {
            fs::remove_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        } else if fs::read_dir(run_dir)
            .map_err(|e| Error::io(run_dir, e))?
            .next()
            .is_some()
        {
            return Err(Error::Precondition(format!(
                "{} exists and is not a run directory",
                run_dir.display()
            )));
        }
    }
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))
}

/// Runs `body` with the incomplete marker in place; the marker is removed on
/// success and keeps the error message on failure.
fn guarded<T>(run_dir: &Path, body: impl FnOnce() -> Result<T>) -> Result<T> {
    let marker = run_dir.join(INCOMPLETE_MARKER);
    write_text(&marker, "running\n")?;
    match body() {
        Ok(value) => {
            fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
            Ok(value)
        }
        Err(e) => {
            let _ = fs::write(&marker, format!("failed: {e}\n"));
            Err(e)
        }
    }
}

fn worker_pool(config: &ExperimentConfig, overrides: &Overrides) -> Result<rayon::ThreadPool> {
    let workers = overrides.workers.unwrap_or(config.run.workers);
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Precondition(format!("worker pool: {e}")))
}

/// Trains all seeds and writes the full run directory. Returns its path.
pub fn run_training(config: &ExperimentConfig, config_path: &Path, overrides: &Overrides) -> Result<PathBuf> {
    let run_dir = run_dir_for(config, config_path, overrides);
    prepare_run_dir(&run_dir)?;
    guarded(&run_dir, || {
        write_text(&run_dir.join("config.toml"), &config.source)?;
        let mdp = base_mdp(config)?;
        let pool = worker_pool(config, overrides)?;
        let results: Vec<TrainResult> = pool.install(|| {
            config
                .run
                .seeds
                .par_iter()
                .map(|&seed| {
                    let result = train(&mdp, &config.trainer, seed)?;
                    let dir = seed_dir(&run_dir, seed);
                    artifacts::write_log_csv(&dir.join(LOG_FILE), &result.history, &mdp)?;
                    write_json(&dir.join(RESULT_FILE), &result)?;
                    Ok(result)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let best_index = best_run_index(&results)?;
        let best = &results[best_index];
        write_json(
            &run_dir.join("summary.json"),
            &RunSummary {
                mode: config.trainer.mode,
                n_factors: config.n_factors(),
                alpha: *config.alpha(),
                seeds: results
                    .iter()
                    .map(|r| SeedSummary {
                        seed: r.seed,
                        j_disentangled: r.final_score(),
                        trivial: r.diagnostics.trivial.clone(),
                    })
                    .collect(),
                best_seed: best.seed,
                best_index,
            },
        )?;
        let best_dir = run_dir.join("best");
        artifacts::write_log_csv(&best_dir.join(LOG_FILE), &best.history, &mdp)?;
        write_json(&best_dir.join(RESULT_FILE), best)?;
        write_best_artifacts(config, &mdp, best, &best_dir)?;
        if config.induced.enabled {
            write_induced(config, &mdp, &best.policies.greedy_policies(), &run_dir.join("induced"))?;
        }
        Ok(())
    })?;
    Ok(run_dir)
}

fn write_best_artifacts(config: &ExperimentConfig, mdp: &TabularMdp, best: &TrainResult, dir: &Path) -> Result<()> {
    artifacts::write_decomposition_csv(
        &dir.join(artifacts::DECOMPOSITION_FILE),
        &best.params,
        &config.gridworld,
        mdp,
    )?;
    render(config, mdp, best, dir)?;
    let (report, records) = compute_metrics(config, mdp, best)?;
    write_json(&dir.join("metrics.json"), &report)?;
    if let Some(records) = records {
        write_theorem_csv(&dir.join("theorem1.csv"), &records)?;
    }
    Ok(())
}

fn render(config: &ExperimentConfig, mdp: &TabularMdp, best: &TrainResult, dir: &Path) -> Result<()> {
    artifacts::emit_heatmaps(&best.params, &config.gridworld, mdp, dir)?;
    artifacts::emit_policy_maps(&best.policies.greedy_policies(), &config.gridworld, dir)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSaturation {
    pub state: usize,
    pub owner: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremOneSummary {
    pub checked: usize,
    pub violations: usize,
    /// Smallest `actual_tv - bound` over pairs with a positive gap.
    pub min_margin: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaOneEntry {
    pub c: f64,
    pub residual: f64,
    pub j_independent: f64,
    pub j_nontrivial: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateDependenceReport {
    pub steps: usize,
    pub behavior: String,
    pub per_policy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub mode: TrainerMode,
    pub j_disentangled: f64,
    pub j_nontrivial: f64,
    pub j_independent: f64,
    pub diagonal_values: Vec<f64>,
    pub trivial: Vec<bool>,
    pub total_value: f64,
    pub avg_saturation: Option<f64>,
    pub state_saturation: Vec<StateSaturation>,
    pub theorem1: Option<TheoremOneSummary>,
    pub lemma1: Option<Vec<LemmaOneEntry>>,
    pub state_dependence: Option<StateDependenceReport>,
    /// Per policy, the fraction of cells whose arrows lead to a cell the
    /// policy's factor owns; `None` for factors that own no rewarding cell.
    pub reachability: Option<Vec<Option<f64>>>,
}

/// Rewarding states owned (by argmax share) by each factor.
pub fn owned_states(mdp: &TabularMdp, params: &crate::decomp::DecompositionParams) -> Vec<Vec<usize>> {
    let mut owned = vec![Vec::new(); params.n_factors()];
    for (s, &r) in mdp.reward().iter().enumerate() {
        if r != 0.0 {
            owned[params.argmax_factor(s)].push(s);
        }
    }
    owned
}

pub fn compute_metrics(
    config: &ExperimentConfig,
    mdp: &TabularMdp,
    best: &TrainResult,
) -> Result<(MetricsReport, Option<Vec<TheoremOneRecord>>)> {
    let toggles = &config.metrics;
    let params = &best.params;
    let policies = best.policies.greedy_policies();
    let final_report = best.final_report();
    let mu = mdp.start_distribution();

    let mut state_saturation = Vec::new();
    let mut avg_saturation = None;
    if toggles.saturation && params.n_factors() > 1 {
        for (s, &r) in mdp.reward().iter().enumerate() {
            if r != 0.0 {
                let shares: Vec<f64> = params.shares(s).iter().map(|p| p * r).collect();
                state_saturation.push(StateSaturation {
                    state: s,
                    owner: params.argmax_factor(s),
                    score: metrics::saturation_score(&shares, r)?,
                });
            }
        }
        let visits = metrics::random_policy_visits(mdp)?;
        avg_saturation = metrics::average_saturation(mdp, params, &visits).ok();
    }

    let mut records = None;
    let mut theorem1 = None;
    if toggles.theorem1 && mdp.require_nonnegative_rewards().is_ok() {
        let optimal: Vec<DeterministicPolicy> = optimal_tables(mdp, params)?.iter().map(|q| q.greedy()).collect();
        let all = metrics::theorem1_sweep(mdp, params, &optimal)?;
        theorem1 = Some(TheoremOneSummary {
            checked: all.len(),
            violations: all.iter().filter(|r| !r.holds).count(),
            min_margin: all
                .iter()
                .filter(|r| r.gap > 0.0)
                .map(|r| r.actual_tv - r.bound)
                .reduce(f64::min),
        });
        records = Some(all);
    }

    let total_value = metrics::total_value(mdp, &policies, mu)?;
    let lemma1 = if toggles.lemma1 {
        let mut entries = Vec::new();
        for c in [1.0, 2.0] {
            let report = evaluate_objective(mdp, params, &AlphaScheme::Uniform { c }, Some(&policies))?;
            entries.push(LemmaOneEntry {
                c,
                residual: metrics::lemma1_residual(&report, c, total_value)?,
                j_independent: report.j_independent,
                j_nontrivial: report.j_nontrivial,
            });
        }
        Some(entries)
    } else {
        None
    };

    let state_dependence = if toggles.state_dependence {
        let mut per_policy = Vec::new();
        for (i, pi) in policies.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(best.seed);
            rng.set_stream(i as u64 + 1);
            let start = mdp.sample_start(&mut rng);
            let trajectory = simulate_trajectory(mdp, pi, start, toggles.state_dependence_steps, &mut rng)?;
            let states: Vec<usize> = trajectory.steps.iter().map(|t| t.state).collect();
            per_policy.push(metrics::state_dependence(pi, &states)?);
        }
        Some(StateDependenceReport {
            steps: toggles.state_dependence_steps,
            behavior: "measured policy".into(),
            per_policy,
        })
    } else {
        None
    };

    let reachability = toggles.reachability.then(|| {
        owned_states(mdp, params)
            .iter()
            .zip(&policies)
            .map(|(targets, pi)| {
                (!targets.is_empty()).then(|| artifacts::arrow_reachability(&config.gridworld, pi, targets))
            })
            .collect()
    });

    let report = MetricsReport {
        seed: best.seed,
        mode: best.mode,
        j_disentangled: final_report.j_disentangled,
        j_nontrivial: final_report.j_nontrivial,
        j_independent: final_report.j_independent,
        diagonal_values: final_report.diagonal_values(),
        trivial: best.diagnostics.trivial.clone(),
        total_value,
        avg_saturation,
        state_saturation,
        theorem1,
        lemma1,
        state_dependence,
        reachability,
    };
    Ok((report, records))
}

fn write_theorem_csv(path: &Path, records: &[TheoremOneRecord]) -> Result<()> {
    let mut text = String::from("factor,other,state,gap,r_max,bound,actual_tv,holds\n");
    for r in records {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.factor,
            r.other,
            r.state,
            r.gap,
            r.r_max,
            r.bound,
            r.actual_tv,
            u8::from(r.holds)
        ));
    }
    write_text(path, &text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducedSummary {
    pub region: Region,
    pub seeds: Vec<u64>,
    /// Largest `V*_induced(s) - V*_base(s)` over states; never positive.
    pub optimum_gap: f64,
    pub early_fraction: f64,
    pub early_induced: Vec<f64>,
    pub early_baseline: Vec<f64>,
    pub mean_early_induced: f64,
    pub mean_early_baseline: f64,
}

/// Fraction of the budget averaged for the induced-vs-baseline comparison.
pub const EARLY_FRACTION: f64 = 0.5;

pub fn induced_experiment(
    config: &ExperimentConfig,
    mdp: &TabularMdp,
    policies: &[DeterministicPolicy],
) -> Result<(InducedSummary, Vec<PairedCurves>)> {
    let induced = induce(mdp, policies)?;
    let (q_induced, _) = planner::value_iteration(induced.mdp(), mdp.reward(), DEFAULT_TOLERANCE)?;
    let (q_base, _) = planner::value_iteration(mdp, mdp.reward(), DEFAULT_TOLERANCE)?;
    let optimum_gap = (0..mdp.n_states())
        .map(|s| q_induced.max(s) - q_base.max(s))
        .fold(f64::NEG_INFINITY, f64::max);

    let region = &config.induced.region;
    let spec = &config.gridworld;
    let curves = config
        .run
        .seeds
        .par_iter()
        .map(|&seed| {
            generalization_experiment(
                mdp,
                |s| region.contains(spec, s),
                policies,
                &config.induced.control,
                seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let early_induced: Vec<f64> = curves.iter().map(|c| c.induced.early_average(EARLY_FRACTION)).collect();
    let early_baseline: Vec<f64> = curves
        .iter()
        .map(|c| c.baseline.early_average(EARLY_FRACTION))
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let summary = InducedSummary {
        region: region.clone(),
        seeds: config.run.seeds.clone(),
        optimum_gap,
        early_fraction: EARLY_FRACTION,
        mean_early_induced: mean(&early_induced),
        mean_early_baseline: mean(&early_baseline),
        early_induced,
        early_baseline,
    };
    Ok((summary, curves))
}

fn write_induced(
    config: &ExperimentConfig,
    mdp: &TabularMdp,
    policies: &[DeterministicPolicy],
    dir: &Path,
) -> Result<InducedSummary> {
    let (summary, curves) = induced_experiment(config, mdp, policies)?;
    let mut text = String::from("seed,step,induced,baseline\n");
    for paired in &curves {
        for (a, b) in paired.induced.points.iter().zip(&paired.baseline.points) {
            text.push_str(&format!("{},{},{},{}\n", paired.induced.seed, a.step, a.value, b.value));
        }
    }
    write_text(&dir.join("curves.csv"), &text)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// A finished run directory.
pub struct SavedRun {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub best: TrainResult,
}

pub fn load_run(run_dir: &Path) -> std::result::Result<SavedRun, CliError> {
    if run_dir.join(INCOMPLETE_MARKER).exists() {
        return Err(Error::Precondition(format!("{} is incomplete", run_dir.display())).into());
    }
    let config = load_config(&run_dir.join("config.toml"))?;
    let best = read_json(&run_dir.join("best").join(RESULT_FILE))?;
    Ok(SavedRun {
        dir: run_dir.to_path_buf(),
        config,
        best,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub logged_j_disentangled: f64,
    pub j_disentangled: f64,
    pub j_nontrivial: f64,
    pub j_independent: f64,
    pub abs_diff: f64,
}

/// Recomputes the objective of the saved best decomposition. Exact-mode runs
/// are re-planned from scratch; sampled runs use their saved policies.
pub fn evaluate_run(run: &SavedRun) -> Result<EvalReport> {
    let mdp = base_mdp(&run.config)?;
    let greedy = run.best.policies.greedy_policies();
    let policies = match run.best.mode {
        TrainerMode::Exact => None,
        TrainerMode::Sampled => Some(greedy.as_slice()),
    };
    let report = evaluate_objective(&mdp, &run.best.params, run.config.alpha(), policies)?;
    let logged = run.best.final_score();
    Ok(EvalReport {
        seed: run.best.seed,
        logged_j_disentangled: logged,
        j_disentangled: report.j_disentangled,
        j_nontrivial: report.j_nontrivial,
        j_independent: report.j_independent,
        abs_diff: (report.j_disentangled - logged).abs(),
    })
}

pub fn execute(command: &Command, overrides: &Overrides) -> std::result::Result<String, CliError> {
    match command {
        Command::Train { config } => {
            let cfg = load_config(config)?;
            let dir = run_training(&cfg, config, overrides)?;
            let summary: RunSummary = read_json(&dir.join("summary.json"))?;
            let best = &summary.seeds[summary.best_index];
            Ok(format!(
                "{}\nbest seed {} with J_disentangled {}",
                dir.display(),
                best.seed,
                best.j_disentangled
            ))
        }
        Command::Eval { run_dir } => {
            let run = load_run(run_dir)?;
            let report = evaluate_run(&run)?;
            write_json(&run.dir.join("best").join("eval.json"), &report)?;
            Ok(format!(
                "seed {}: J_disentangled {} (logged {}, diff {:e})",
                report.seed, report.j_disentangled, report.logged_j_disentangled, report.abs_diff
            ))
        }
        Command::Metrics { run_dir } => {
            let run = load_run(run_dir)?;
            let mdp = base_mdp(&run.config)?;
            let best_dir = run.dir.join("best");
            let (report, records) = compute_metrics(&run.config, &mdp, &run.best)?;
            write_json(&best_dir.join("metrics.json"), &report)?;
            if let Some(records) = records {
                write_theorem_csv(&best_dir.join("theorem1.csv"), &records)?;
            }
            Ok(serde_json::to_string_pretty(&report).map_err(|e| Error::Serde(e.to_string()))?)
        }
        Command::Viz { run_dir } => {
            let run = load_run(run_dir)?;
            let mdp = base_mdp(&run.config)?;
            render(&run.config, &mdp, &run.best, &run.dir.join("best"))?;
            Ok(run.dir.join("best").display().to_string())
        }
        Command::Induced { config } => {
            let cfg = load_config(config)?;
            let dir = run_dir_for(&cfg, config, overrides);
            let reusable = !dir.join(INCOMPLETE_MARKER).exists()
                && fs::read_to_string(dir.join("config.toml")).is_ok_and(|text| text == cfg.source)
                && dir.join("best").join(RESULT_FILE).exists();
            if !reusable {
                run_training(&cfg, config, overrides)?;
            }
            let best: TrainResult = read_json(&dir.join("best").join(RESULT_FILE))?;
            let mdp = base_mdp(&cfg)?;
            let pool = worker_pool(&cfg, overrides)?;
            let summary = guarded(&dir, || {
                pool.install(|| write_induced(&cfg, &mdp, &best.policies.greedy_policies(), &dir.join("induced")))
            })?;
            Ok(format!(
                "{}\nearly-phase return: induced {} vs baseline {}",
                dir.join("induced").display(),
                summary.mean_early_induced,
                summary.mean_early_baseline
            ))
        }
    }
}
