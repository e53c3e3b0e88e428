//! Per-seed experiment drivers and the run-level orchestration around them.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use isarlab_core::env::{sample_meta_tasks, AltitudeLevel, Task, World};
use isarlab_core::isar::{train_task, train_task_async, TrainProgress, TrainSpec};
use isarlab_core::meta::{
    build_curriculum, meta_train, run_curriculum_from, CurriculumProgress, CurriculumRun, MetaTrainConfig, StageSummary,
    META_STAGE,
};
use isarlab_core::metrics::MetricsRecord;
use isarlab_core::policy_net::{init_params, ParameterVector, PolicyNet};
use isarlab_core::seed;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::report::{seed_rows, variant_stats, sweep_report, SweepPoint, SweepReport};
use crate::output::{
    checkpoint_path, create_dir, read_metrics_csv, seed_csv_name, sha256_hex, write_atomic, write_json, write_manifest, write_metrics_csv,
    Checkpoint, Manifest, Versions, MANIFEST_FORMAT, MANIFEST_VERSION,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Train,
    MetaTrain,
    Curriculum,
    Transfer,
}

impl Command {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Command::Train),
            "meta-train" => Ok(Command::MetaTrain),
            "curriculum" => Ok(Command::Curriculum),
            "transfer" => Ok(Command::Transfer),
            other => Err(HarnessError::Config(format!("unknown command '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::MetaTrain => "meta-train",
            Command::Curriculum => "curriculum",
            Command::Transfer => "transfer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaResult {
    pub psi: ParameterVector,
    pub metrics: Vec<MetricsRecord>,
    pub episodes: u64,
    pub iterations: usize,
    pub converged_at: Option<u64>,
}

/// Resumable per-seed state of any command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SeedState {
    Train { progress: TrainProgress },
    MetaTrain { result: Option<MetaResult> },
    Curriculum { meta: Option<MetaResult>, progress: Option<CurriculumProgress> },
    Transfer { meta: Option<MetaResult>, progress: Option<TrainProgress> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// Episodes counted up to convergence; `None` when the run did not converge.
    pub episodes_to_convergence: Option<u64>,
    pub total_episodes: u64,
    pub meta_episodes: u64,
    pub stages: Vec<StageSummary>,
}

impl SeedSummary {
    pub fn converged(&self) -> bool {
        self.episodes_to_convergence.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub summary: SeedSummary,
    pub metrics: Vec<MetricsRecord>,
    pub params: ParameterVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub command: Command,
    pub algorithm: String,
    pub seeds: Vec<SeedSummary>,
}

pub fn load_world(cfg: &ExperimentConfig) -> Result<Arc<World>> {
    Ok(Arc::new(cfg.world.load()?))
}

fn meta_world(cfg: &ExperimentConfig, main: &Arc<World>) -> Result<Arc<World>> {
    match &cfg.meta.world {
        Some(w) => Ok(Arc::new(w.load()?)),
        None => Ok(main.clone()),
    }
}

/// The M meta-tasks of one seed, in sequential order.
pub fn meta_tasks(cfg: &ExperimentConfig, seed: u64, world: &Arc<World>) -> Result<Vec<Task>> {
    let level = AltitudeLevel::named(cfg.meta.level);
    let tasks = sample_meta_tasks(world, level, cfg.meta.tasks, cfg.meta.region_size, cfg.meta.max_steps, seed)
        .map_err(|e| HarnessError::Config(format!("meta: {e}")))?;
    Ok(tasks.into_iter().map(|t| t.with_relative_encoding(cfg.task.relative_encoding)).collect())
}

fn network(cfg: &ExperimentConfig, task: &Task, seed: u64) -> Result<(PolicyNet, ParameterVector)> {
    let net_cfg = cfg.net_config(task.obs_dim());
    let net = PolicyNet::new(net_cfg.clone())?;
    let init = init_params(&net_cfg, seed::derive(seed, &[cfg.network.init_seed_offset]))?;
    Ok((net, init))
}

fn run_meta(cfg: &ExperimentConfig, seed: u64, world: &Arc<World>, net: &PolicyNet, init: &ParameterVector) -> Result<MetaResult> {
    let mworld = meta_world(cfg, world)?;
    let mcfg = MetaTrainConfig {
        tasks: meta_tasks(cfg, seed, &mworld)?,
        batch_size: cfg.meta.batch_size,
        eta: cfg.hyper.eta,
        episodes_per_task: cfg.meta.episodes_per_task,
        max_iterations: cfg.meta.max_iterations,
        convergence: cfg.convergence,
        stop_on_convergence: cfg.meta.stop_on_convergence,
        run_id: cfg.run_id.clone(),
        seed,
    };
    let out = meta_train(net, init, &mcfg, &cfg.isar_config(cfg.meta.max_steps), cfg.algorithm)?;
    log::info!("seed {seed}: meta-training {} episodes, converged at {:?}", out.episodes, out.converged_at);
    Ok(MetaResult {
        psi: out.psi,
        metrics: out.metrics,
        episodes: out.episodes,
        iterations: out.iterations,
        converged_at: out.converged_at,
    })
}

fn train_spec(cfg: &ExperimentConfig, seed: u64, stage: u32) -> TrainSpec {
    TrainSpec {
        algorithm: cfg.algorithm,
        max_episodes: cfg.training.max_episodes,
        convergence: cfg.convergence,
        stop_on_convergence: true,
        run_id: cfg.run_id.clone(),
        seed,
        stage,
        record_wallclock: cfg.record_wallclock,
    }
}

fn fine_tune(
    cfg: &ExperimentConfig,
    net: &PolicyNet,
    task: &Task,
    spec: &TrainSpec,
    progress: TrainProgress,
    on_progress: &mut dyn FnMut(&TrainProgress) -> Result<()>,
) -> Result<TrainProgress> {
    let isar = cfg.isar_config(task.max_steps());
    if cfg.training.async_workers > 1 {
        return Ok(train_task_async(net, task, &isar, spec, progress, cfg.training.async_workers)?);
    }
    let every = cfg.training.checkpoint_every.max(1);
    let mut failure = None;
    let out = train_task(net, task, &isar, spec, progress, &mut |p| {
        if p.episode % every == 0 {
            if let Err(e) = on_progress(p) {
                failure = Some(e);
                return Err(isarlab_core::Error::Task("checkpoint write failed".into()));
            }
        }
        Ok(())
    });
    match (out, failure) {
        (_, Some(e)) => Err(e),
        (r, None) => Ok(r?),
    }
}

/// Run one seed of `cmd` from `state` (or from scratch), reporting resumable state
/// through `checkpoint` at stage boundaries and every `training.checkpoint_every` episodes.
pub fn run_seed(
    cfg: &ExperimentConfig,
    cmd: Command,
    seed: u64,
    state: Option<SeedState>,
    checkpoint: &mut dyn FnMut(&SeedState) -> Result<()>,
) -> Result<SeedOutcome> {
    let world = load_world(cfg)?;
    match cmd {
        Command::Train => {
            let task = cfg.task.build(world, AltitudeLevel::named(cfg.task.level), cfg.task.max_steps)?;
            let (net, init) = network(cfg, &task, seed)?;
            let progress = match state {
                Some(SeedState::Train { progress }) => progress,
                None => TrainProgress::start(init),
                Some(_) => return Err(HarnessError::Config("checkpoint is not a train state".into())),
            };
            checkpoint(&SeedState::Train { progress: progress.clone() })?;
            let spec = train_spec(cfg, seed, 1);
            let done = fine_tune(cfg, &net, &task, &spec, progress, &mut |p| {
                checkpoint(&SeedState::Train { progress: p.clone() })
            })?;
            checkpoint(&SeedState::Train { progress: done.clone() })?;
            Ok(SeedOutcome {
                summary: SeedSummary {
                    seed,
                    episodes_to_convergence: done.converged_at,
                    total_episodes: done.episode,
                    meta_episodes: 0,
                    stages: vec![],
                },
                metrics: done.metrics,
                params: done.params,
            })
        }
        Command::MetaTrain => {
            let mworld = meta_world(cfg, &world)?;
            let probe = meta_tasks(cfg, seed, &mworld)?;
            let (net, init) = network(cfg, &probe[0], seed)?;
            let result = match state {
                Some(SeedState::MetaTrain { result: Some(r) }) => r,
                None | Some(SeedState::MetaTrain { result: None }) => run_meta(cfg, seed, &world, &net, &init)?,
                Some(_) => return Err(HarnessError::Config("checkpoint is not a meta-train state".into())),
            };
            checkpoint(&SeedState::MetaTrain { result: Some(result.clone()) })?;
            Ok(SeedOutcome {
                summary: SeedSummary {
                    seed,
                    episodes_to_convergence: result.converged_at,
                    total_episodes: result.episodes,
                    meta_episodes: result.episodes,
                    stages: vec![],
                },
                metrics: result.metrics,
                params: result.psi,
            })
        }
        Command::Curriculum => {
            let levels: Vec<AltitudeLevel> = cfg.curriculum.levels.iter().map(|&l| AltitudeLevel::named(l)).collect();
            let target = cfg.task.target(&world)?;
            let schedule = build_curriculum(
                world.clone(),
                &levels,
                target,
                &cfg.curriculum.budgets,
                cfg.curriculum.max_steps,
                cfg.convergence,
            )
            .map_err(|e| HarnessError::Config(format!("curriculum: {e}")))?;
            let mut schedule = schedule;
            for stage in &mut schedule.stages {
                stage.task = stage.task.clone().with_relative_encoding(cfg.task.relative_encoding);
            }
            let (net, init) = network(cfg, &schedule.stages[0].task, seed)?;
            let (meta, progress) = match state {
                Some(SeedState::Curriculum { meta, progress }) => (meta, progress),
                None => (None, None),
                Some(_) => return Err(HarnessError::Config("checkpoint is not a curriculum state".into())),
            };
            let meta = match meta {
                Some(m) => Some(m),
                None if cfg.curriculum.meta_train => Some(run_meta(cfg, seed, &world, &net, &init)?),
                None => None,
            };
            let psi = meta.as_ref().map_or(init, |m| m.psi.clone());
            let progress = progress.unwrap_or_else(|| CurriculumProgress::start(psi));
            checkpoint(&SeedState::Curriculum { meta: meta.clone(), progress: Some(progress.clone()) })?;
            let run = CurriculumRun { algorithm: cfg.algorithm, run_id: cfg.run_id.clone(), seed, first_stage: 1 };
            let every = cfg.training.checkpoint_every.max(1);
            let mut failure = None;
            let out = run_curriculum_from(&net, &schedule, &cfg.isar_config(cfg.curriculum.max_steps), &run, progress, &mut |p| {
                if p.current.episode % every == 0 {
                    if let Err(e) = checkpoint(&SeedState::Curriculum { meta: meta.clone(), progress: Some(p.clone()) }) {
                        failure = Some(e);
                        return Err(isarlab_core::Error::Task("checkpoint write failed".into()));
                    }
                }
                Ok(())
            });
            if let Some(e) = failure {
                return Err(e);
            }
            let out = out?;
            let meta_episodes = meta.as_ref().map_or(0, |m| m.episodes);
            let total = meta_episodes + out.episodes();
            let done = CurriculumProgress {
                stage_index: schedule.stages.len(),
                current: TrainProgress::start(out.params.clone()),
                stage_initial_fingerprint: out.params.fingerprint(),
                completed: out.stages.clone(),
                metrics: out.metrics.clone(),
            };
            checkpoint(&SeedState::Curriculum { meta: meta.clone(), progress: Some(done) })?;
            let mut metrics = meta.map(|m| m.metrics).unwrap_or_default();
            metrics.extend(out.metrics.iter().cloned());
            Ok(SeedOutcome {
                summary: SeedSummary {
                    seed,
                    episodes_to_convergence: out.converged().then_some(total),
                    total_episodes: total,
                    meta_episodes,
                    stages: out.stages,
                },
                metrics,
                params: out.params,
            })
        }
        Command::Transfer => {
            let task = cfg.task.build(world.clone(), AltitudeLevel::named(cfg.task.level), cfg.task.max_steps)?;
            let (net, init) = network(cfg, &task, seed)?;
            let (meta, progress) = match state {
                Some(SeedState::Transfer { meta, progress }) => (meta, progress),
                None => (None, None),
                Some(_) => return Err(HarnessError::Config("checkpoint is not a transfer state".into())),
            };
            let meta = match meta {
                Some(m) => m,
                None => run_meta(cfg, seed, &world, &net, &init)?,
            };
            let progress = progress.unwrap_or_else(|| TrainProgress::start(meta.psi.clone()));
            checkpoint(&SeedState::Transfer { meta: Some(meta.clone()), progress: Some(progress.clone()) })?;
            let spec = train_spec(cfg, seed, 1);
            let done = fine_tune(cfg, &net, &task, &spec, progress, &mut |p| {
                checkpoint(&SeedState::Transfer { meta: Some(meta.clone()), progress: Some(p.clone()) })
            })?;
            checkpoint(&SeedState::Transfer { meta: Some(meta.clone()), progress: Some(done.clone()) })?;
            let mut metrics = meta.metrics.clone();
            metrics.extend(done.metrics.iter().cloned());
            debug_assert!(metrics.iter().take(meta.metrics.len()).all(|r| r.stage == META_STAGE));
            Ok(SeedOutcome {
                summary: SeedSummary {
                    seed,
                    episodes_to_convergence: done.converged_at,
                    total_episodes: done.episode,
                    meta_episodes: meta.episodes,
                    stages: vec![],
                },
                metrics,
                params: done.params,
            })
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub resume: bool,
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    sha256_hex(cfg.to_toml_string().as_bytes())
}

fn run_one(cfg: &ExperimentConfig, cmd: Command, seed: u64, hash: &str, run_dir: &Path, opts: &RunOptions) -> Result<SeedOutcome> {
    let ck_path = checkpoint_path(run_dir, seed);
    let state = if opts.resume && ck_path.exists() {
        log::info!("seed {seed}: resuming from {}", ck_path.display());
        Some(Checkpoint::<SeedState>::load(&ck_path, hash, seed)?.state)
    } else {
        None
    };
    let outcome = run_seed(cfg, cmd, seed, state, &mut |s| Checkpoint::new(hash, seed, s.clone()).save(&ck_path));
    let outcome = outcome.map_err(|e| match e {
        HarnessError::Config(_) => e,
        other => HarnessError::Run { checkpoint: ck_path.display().to_string(), source: Box::new(other) },
    })?;
    write_metrics_csv(&run_dir.join(seed_csv_name(seed)), &outcome.metrics)?;
    outcome.params.save_json(&run_dir.join("params").join(format!("seed-{seed}.json")))?;
    Ok(outcome)
}

/// Execute `cmd` for every configured seed and write all artifacts under the run directory.
pub fn run_experiment(cfg: &ExperimentConfig, cmd: Command, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    create_dir(&run_dir)?;
    create_dir(&run_dir.join("params"))?;
    let hash = config_hash(cfg);
    write_atomic(&run_dir.join("config.toml"), cfg.to_toml_string().as_bytes())?;

    let queue = Mutex::new(cfg.seeds.iter().copied().collect::<VecDeque<u64>>());
    let results: Mutex<Vec<(u64, Result<SeedOutcome>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..cfg.workers.min(cfg.seeds.len()) {
            scope.spawn(|| loop {
                let Some(seed) = queue.lock().expect("seed queue").pop_front() else { return };
                let r = run_one(cfg, cmd, seed, &hash, &run_dir, opts);
                results.lock().expect("results").push((seed, r));
            });
        }
    });
    let mut results = results.into_inner().expect("results");
    results.sort_by_key(|(s, _)| cfg.seeds.iter().position(|x| x == s));
    let mut seeds = Vec::new();
    let mut first_error = None;
    for (seed, r) in results {
        match r {
            Ok(o) => seeds.push(o.summary),
            Err(e) => {
                log::error!("seed {seed}: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    let summary = RunSummary { run_id: cfg.run_id.clone(), command: cmd, algorithm: cfg.algorithm.as_str().into(), seeds };
    write_json(&run_dir.join("summary.json"), &summary)?;
    write_manifest(
        &run_dir,
        Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            run_id: cfg.run_id.clone(),
            command: cmd.as_str().into(),
            config_hash: hash,
            versions: Versions::current(),
            seeds: cfg.seeds.clone(),
            workers: cfg.workers,
            deterministic: cfg.training.async_workers == 1,
            files: vec![],
        },
    )?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

/// Generate the configured world and write it with a per-level rendering.
pub fn run_gridgen(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    create_dir(&run_dir)?;
    let world = cfg.world.load()?;
    world.save_json(&run_dir.join("world.json"))?;
    let target = cfg.task.target(&world).ok();
    for level in AltitudeLevel::standard() {
        let occ = world.render_level(&level);
        let mut text = String::new();
        for y in 0..world.height {
            for x in 0..world.width {
                text.push(if Some((x, y)) == target {
                    'T'
                } else if occ.is_blocked(x, y) {
                    '#'
                } else {
                    '.'
                });
            }
            text.push('\n');
        }
        write_atomic(&run_dir.join(format!("world-{}.txt", level.name.as_str())), text.as_bytes())?;
    }
    write_manifest(
        &run_dir,
        Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            run_id: cfg.run_id.clone(),
            command: "gridgen".into(),
            config_hash: config_hash(cfg),
            versions: Versions::current(),
            seeds: vec![cfg.world.seed],
            workers: 1,
            deterministic: true,
            files: vec![],
        },
    )?;
    Ok(run_dir.join("world.json"))
}

/// Run the configured sweep: one full experiment per axis value, then a report.
pub fn run_sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<SweepReport> {
    let sweep = cfg.sweep.as_ref().ok_or_else(|| HarnessError::Config("sweep: section missing".into()))?;
    let cmd = Command::parse(&sweep.command)?;
    if sweep.axis.is_meta() && cmd == Command::Train {
        return Err(HarnessError::Config(format!(
            "sweep.command: axis '{}' only affects meta-training; use curriculum or transfer",
            sweep.axis.as_str()
        )));
    }
    let mut points = Vec::new();
    for &value in &sweep.values {
        let point_cfg = sweep.axis.apply(cfg, value);
        let summary = run_experiment(&point_cfg, cmd, opts)?;
        let run_dir = point_cfg.run_dir();
        let v = variant_stats(&summary.run_id, seed_rows(&summary.seeds))?;
        let (mut len, mut n) = (0.0, 0usize);
        for s in &summary.seeds {
            for r in read_metrics_csv(&run_dir.join(seed_csv_name(s.seed)))? {
                if r.success == 1 {
                    len += r.steps as f64;
                    n += 1;
                }
            }
        }
        points.push(SweepPoint {
            value,
            run_id: summary.run_id,
            median: v.median,
            iqr: v.iqr,
            censored: v.censored,
            mean_success_path: if n == 0 { f64::NAN } else { len / n as f64 },
        });
    }
    let report = sweep_report(sweep.axis.as_str(), points)?;
    write_json(&cfg.out_dir.join(format!("{}-sweep.json", cfg.run_id)), &report)?;
    Ok(report)
}
