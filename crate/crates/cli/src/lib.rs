//! Command implementations behind the `scenegen` binary: dataset generation,
//! policy training, evaluation, cross-factor ablation and dataset statistics.

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use scenegen::augment::{record_seed_demos, AugmentError, EpisodeCollector, GenerationContext};
use scenegen::dataset::{
    dataset_stats, read_dataset, write_dataset, DatasetError, DatasetStats, EpisodeRecord, GenerationConfig,
    GenerationSummary, Manifest,
};
use scenegen::policy::{rollout, ChunkPolicy, ChunkingConfig, DiffusionPolicy, ExpertPolicy, PolicyError, TrainLog};
use scenegen::randomize::{fibonacci_cap, sample_scene, CameraRig, FactorSet, RandomizationConfig};
use scenegen::sim::{Simulator, TaskSpec};

pub use config::AppConfig;

/// Environment variable holding the worker thread count.
pub const WORKERS_ENV: &str = "SCENEGEN_WORKERS";
/// Evaluation rollouts draw from `seed ^ EVAL_SEED_DOMAIN ^ r`, disjoint from
/// generation attempts (`seed ^ i` with `i < 2^32`).
pub const EVAL_SEED_DOMAIN: u64 = 1 << 32;
/// Checkpoint name that selects the scripted expert instead of a file.
pub const EXPERT: &str = "expert";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("internal: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Dataset(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Io(_)
            | PolicyError::Checkpoint(_)
            | PolicyError::UnsupportedVersion { .. }
            | PolicyError::SchemaMismatch(_)
            | PolicyError::EmptyDataset => CliError::Data(e.to_string()),
            PolicyError::InvalidChunking { .. } | PolicyError::InvalidSchedule(_) => CliError::Usage(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Worker count from [`WORKERS_ENV`], else the machine's parallelism.
pub fn workers_from_env() -> Result<usize, CliError> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))
}

pub fn parse_factors(s: &str) -> Result<FactorSet, CliError> {
    s.parse().map_err(|e| CliError::Usage(format!("factors {s:?}: {e}")))
}

/// Comma-separated list of factor sets; `+` joins factors within one entry.
pub fn parse_factor_list(s: &str) -> Result<Vec<FactorSet>, CliError> {
    let list: Vec<FactorSet> =
        s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(parse_factors).collect::<Result<_, _>>()?;
    if list.is_empty() {
        return Err(CliError::Usage("empty factor list".into()));
    }
    Ok(list)
}

fn rig(cfg: &AppConfig) -> Result<CameraRig, CliError> {
    fibonacci_cap(&cfg.randomization.camera).map_err(|e| CliError::Usage(format!("camera rig: {e}")))
}

#[derive(Debug, Clone)]
pub struct GenerateArgs {
    pub task: String,
    pub factors: FactorSet,
    pub episodes: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub config: AppConfig,
}

/// Generates `episodes` successful episodes and writes the dataset.
///
/// Attempts run in parallel in batches but are consumed strictly in index
/// order, so the output does not depend on the worker count.
pub fn cmd_generate(args: &GenerateArgs, workers: usize) -> Result<Manifest, CliError> {
    if args.episodes == 0 {
        return Err(CliError::Usage("--episodes must be positive".into()));
    }
    let cfg = &args.config;
    let task = cfg.task(&args.task)?;
    let rig = rig(cfg)?;
    let randomization =
        RandomizationConfig { factors: args.factors.clone(), master_seed: args.seed, ..cfg.randomization.clone() };
    let seeds = record_seed_demos(&task, cfg.generation.seed_demos, cfg.generation.seed_demo_seed, &rig)?;
    let ctx = GenerationContext { task: Arc::clone(&task), seeds, rig, randomization, augment: cfg.augment };
    let max_attempts = args.episodes.saturating_mul(cfg.generation.max_attempts_per_episode.max(1));

    let pool = pool(workers)?;
    let batch = (4 * workers).max(8);
    let mut collector = EpisodeCollector::new(ctx.rig.num_poses());
    let mut next = 0usize;
    while collector.accepted.len() < args.episodes && next < max_attempts {
        let end = (next + batch).min(max_attempts);
        let attempts = pool.install(|| {
            (next as u64..end as u64).into_par_iter().map(|i| ctx.attempt(i)).collect::<Result<Vec<_>, _>>()
        })?;
        for a in attempts {
            if collector.accepted.len() == args.episodes {
                break;
            }
            collector.push(&ctx, a)?;
        }
        next = end;
    }
    if collector.accepted.len() < args.episodes {
        log::warn!(
            "only {} of {} episodes after {} attempts",
            collector.accepted.len(),
            args.episodes,
            collector.attempts
        );
    }
    let records: Vec<EpisodeRecord> = collector.accepted.into_iter().map(EpisodeRecord::from).collect();
    let summary = GenerationSummary {
        config: GenerationConfig {
            task: (*task).clone(),
            randomization: ctx.randomization.clone(),
            augment: ctx.augment,
            seed_demos: cfg.generation.seed_demos,
            seed_demo_seed: cfg.generation.seed_demo_seed,
            max_attempts,
        },
        attempts: collector.attempts,
        failures_by_subtask: collector.failures_by_subtask,
    };
    let manifest = write_dataset(&args.out, &records, summary)?;
    log::info!(
        "generation success rate {:.3} ({} / {} attempts)",
        manifest.generation_success_rate,
        manifest.episode_count,
        manifest.attempts
    );
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub config: AppConfig,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainLog, CliError> {
    let ds = read_dataset(&args.dataset)?;
    if ds.episodes.is_empty() {
        return Err(CliError::Data(format!("{}: dataset has no episodes", args.dataset.display())));
    }
    let mut tc = args.config.train.clone();
    if let Some(s) = args.seed {
        tc.seed = s;
    }
    let (mut policy, log) = scenegen::policy::train(&ds.demonstrations(), &tc)?;
    policy.meta = BTreeMap::from([
        ("task".to_string(), ds.manifest.task.clone()),
        ("train_factors".to_string(), ds.manifest.factors.to_string()),
        ("dataset_hash".to_string(), ds.manifest.content_hash.clone()),
        ("episodes".to_string(), ds.manifest.episode_count.to_string()),
    ]);
    policy.save(&args.out)?;
    log::info!(
        "trained on {} samples: loss {:.4} -> {:.4}",
        log.train_samples,
        log.initial_loss,
        log.epoch_losses.last().copied().unwrap_or(log.initial_loss)
    );
    Ok(log)
}

/// One (task, train regime, eval factor) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: String,
    pub train_factors: String,
    pub eval_factor: String,
    pub rollouts: usize,
    pub successes: usize,
    pub rate: f64,
}

impl EvalRow {
    pub fn new(task: &str, train_factors: &str, eval_factor: &FactorSet, rollouts: usize, successes: usize) -> Self {
        Self {
            task: task.to_string(),
            train_factors: train_factors.to_string(),
            eval_factor: eval_factor.to_string(),
            rollouts,
            successes,
            rate: if rollouts == 0 { 0.0 } else { successes as f64 / rollouts as f64 },
        }
    }
}

/// A loaded checkpoint or the scripted expert.
pub enum EvalPolicy {
    Diffusion(DiffusionPolicy),
    Expert,
}

impl EvalPolicy {
    pub fn load(spec: &Path) -> Result<Self, CliError> {
        if spec.as_os_str() == EXPERT {
            return Ok(EvalPolicy::Expert);
        }
        if !spec.exists() {
            return Err(CliError::Data(format!("{}: no such checkpoint", spec.display())));
        }
        Ok(EvalPolicy::Diffusion(DiffusionPolicy::load(spec)?))
    }

    pub fn train_factors(&self) -> String {
        match self {
            EvalPolicy::Diffusion(p) => p.meta.get("train_factors").cloned().unwrap_or_else(|| "unknown".into()),
            EvalPolicy::Expert => EXPERT.to_string(),
        }
    }

    fn chunking(&self) -> ChunkingConfig {
        match self {
            EvalPolicy::Diffusion(p) => p.chunking,
            EvalPolicy::Expert => ChunkingConfig::default(),
        }
    }
}

/// Successes out of `rollouts` for one eval factor. Rollout `r` draws its
/// camera index and scene from `seed ^ EVAL_SEED_DOMAIN ^ r`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_cell(
    policy: &EvalPolicy,
    task: &Arc<TaskSpec>,
    rig: &CameraRig,
    randomization: &RandomizationConfig,
    factors: &FactorSet,
    rollouts: usize,
    max_steps: usize,
    seed: u64,
    pool: &rayon::ThreadPool,
) -> Result<usize, CliError> {
    let chunking = policy.chunking();
    let outcomes: Vec<bool> = pool.install(|| {
        (0..rollouts as u64)
            .into_par_iter()
            .map(|r| -> Result<bool, CliError> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_SEED_DOMAIN ^ r);
                let cam = rng.random_range(0..rig.num_poses());
                let scene = sample_scene(task, factors, cam, randomization, &mut rng)
                    .map_err(|e| CliError::Internal(format!("scene sampling: {e}")))?;
                let sim = Simulator::for_scene(Arc::clone(task), &scene);
                let res = match policy {
                    EvalPolicy::Diffusion(p) => {
                        let mut pol = p;
                        rollout(&mut pol as &mut dyn ChunkPolicy, &sim, &scene, rig, chunking, max_steps, &mut rng)?
                    }
                    EvalPolicy::Expert => {
                        let mut pol = ExpertPolicy::new(chunking.t_p);
                        rollout(&mut pol, &sim, &scene, rig, chunking, max_steps, &mut rng)?
                    }
                };
                Ok(res.success)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(outcomes.into_iter().filter(|&s| s).count())
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub task: String,
    pub eval_factors: Vec<FactorSet>,
    pub rollouts: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub config: AppConfig,
}

pub fn cmd_eval(args: &EvalArgs, workers: usize) -> Result<Vec<EvalRow>, CliError> {
    if args.eval_factors.is_empty() {
        return Err(CliError::Usage("no eval factors".into()));
    }
    let policy = EvalPolicy::load(&args.checkpoint)?;
    let task = args.config.task(&args.task)?;
    let rig = rig(&args.config)?;
    let pool = pool(workers)?;
    let mut rows = Vec::new();
    for f in &args.eval_factors {
        let successes = evaluate_cell(
            &policy,
            &task,
            &rig,
            &args.config.randomization,
            f,
            args.rollouts,
            args.config.eval.max_steps,
            args.seed,
            &pool,
        )?;
        let row = EvalRow::new(task.kind.name(), &policy.train_factors(), f, args.rollouts, successes);
        log::info!("{} / eval {}: {}/{}", row.train_factors, row.eval_factor, successes, args.rollouts);
        rows.push(row);
    }
    if let Some(out) = &args.out {
        report::write_eval_csv(out, &rows)?;
    }
    Ok(rows)
}

/// One cell of the train-regime × eval-factor matrix. `row` is `None` when the
/// regime's checkpoint is missing.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub train_factors: FactorSet,
    pub eval_factor: FactorSet,
    pub row: Option<EvalRow>,
}

impl AblationCell {
    pub fn is_diagonal(&self) -> bool {
        !self.train_factors.is_empty() && self.train_factors == self.eval_factor
    }
}

#[derive(Debug, Clone)]
pub struct AblationArgs {
    pub task: String,
    /// Training regimes; the no-augmentation regime is always included.
    pub regimes: Vec<FactorSet>,
    pub eval_factors: Vec<FactorSet>,
    /// Holds `<regime>.ckpt` per regime, named by the factor set's display form.
    pub checkpoints: PathBuf,
    pub rollouts: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub config: AppConfig,
}

pub fn checkpoint_path(dir: &Path, regime: &FactorSet) -> PathBuf {
    dir.join(format!("{regime}.ckpt"))
}

/// Evaluates every available regime under every eval factor. Missing
/// checkpoints become skip cells; the CSV is written either way and the
/// error is reported afterwards.
pub fn cmd_ablation(args: &AblationArgs, workers: usize) -> Result<Vec<AblationCell>, CliError> {
    if args.regimes.is_empty() || args.eval_factors.is_empty() {
        return Err(CliError::Usage("ablation needs at least one regime and one eval factor".into()));
    }
    let mut regimes = vec![FactorSet::none()];
    for r in &args.regimes {
        if !regimes.contains(r) {
            regimes.push(r.clone());
        }
    }
    let task = args.config.task(&args.task)?;
    let rig = rig(&args.config)?;
    let pool = pool(workers)?;
    let mut cells = Vec::new();
    let mut missing = Vec::new();
    for regime in &regimes {
        let path = checkpoint_path(&args.checkpoints, regime);
        let policy = if path.exists() { Some(EvalPolicy::load(&path)?) } else { None };
        if policy.is_none() {
            missing.push(path.display().to_string());
        }
        for f in &args.eval_factors {
            let row = match &policy {
                Some(p) => {
                    let successes = evaluate_cell(
                        p,
                        &task,
                        &rig,
                        &args.config.randomization,
                        f,
                        args.rollouts,
                        args.config.eval.max_steps,
                        args.seed,
                        &pool,
                    )?;
                    log::info!("train {regime} / eval {f}: {successes}/{}", args.rollouts);
                    Some(EvalRow::new(task.kind.name(), &regime.to_string(), f, args.rollouts, successes))
                }
                None => None,
            };
            cells.push(AblationCell { train_factors: regime.clone(), eval_factor: f.clone(), row });
        }
    }
    if let Some(out) = &args.out {
        report::write_ablation_csv(out, task.kind.name(), &cells)?;
        std::fs::write(out.with_extension("md"), report::ablation_markdown(&cells))?;
    }
    if !missing.is_empty() {
        return Err(CliError::Data(format!("missing checkpoints: {}", missing.join(", "))));
    }
    Ok(cells)
}

pub fn cmd_stats(dataset: &Path) -> Result<DatasetStats, CliError> {
    Ok(dataset_stats(dataset)?)
}
