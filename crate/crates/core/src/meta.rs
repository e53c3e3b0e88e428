//! Meta-training over a task batch and coarse-to-fine curriculum fine-tuning.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{AltitudeLevel, Task, World};
use crate::error::{Error, Result};
use crate::isar::{episode_record, episode_rng, run_episode, train_task, Algorithm, IsarConfig, TrainProgress, TrainSpec};
use crate::metrics::{Convergence, ConvergenceTracker, MetricsRecord};
use crate::policy_net::{sgd_step, AdamState, ParameterVector, PolicyNet};

/// Stage index used in metrics rows for meta-training episodes.
pub const META_STAGE: u32 = 0;

#[derive(Clone, Debug)]
pub struct MetaTrainConfig {
    pub tasks: Vec<Task>,
    pub batch_size: usize,
    /// Meta learning rate η.
    pub eta: f64,
    pub episodes_per_task: usize,
    pub max_iterations: usize,
    pub convergence: Convergence,
    pub stop_on_convergence: bool,
    pub run_id: String,
    pub seed: u64,
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("meta-training needs at least one task".into()));
        }
        if self.batch_size == 0 || self.batch_size > self.tasks.len() {
            return Err(Error::Config(format!(
                "batch_size must lie in 1..={} (the number of meta-tasks)",
                self.tasks.len()
            )));
        }
        if self.episodes_per_task == 0 {
            return Err(Error::Config("episodes_per_task must be at least 1".into()));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::Config("eta must be non-negative".into()));
        }
        let obs_dim = self.tasks[0].obs_dim();
        if self.tasks.iter().any(|t| t.obs_dim() != obs_dim) {
            return Err(Error::Config("meta-tasks disagree on observation size".into()));
        }
        Ok(())
    }

    /// Task indices of iteration `it`, taken cyclically in order.
    pub fn batch(&self, it: usize) -> Vec<usize> {
        (0..self.batch_size).map(|j| (it * self.batch_size + j) % self.tasks.len()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct MetaTrainOutcome {
    pub psi: ParameterVector,
    pub metrics: Vec<MetricsRecord>,
    pub iterations: usize,
    pub episodes: u64,
    /// Meta-training episode at which task success converged.
    pub converged_at: Option<u64>,
}

/// One meta-iteration: adapt a copy of ψ to each task of the batch and step ψ along the
/// summed task gradients. Returns ψ′ and the per-episode outcomes.
pub fn meta_step(
    net: &PolicyNet,
    psi: &ParameterVector,
    tasks: &[&Task],
    episodes_per_task: usize,
    eta: f64,
    isar: &IsarConfig,
    algorithm: Algorithm,
    mut rng_for_episode: impl FnMut() -> crate::seed::Rng,
    mut on_outcome: impl FnMut(&crate::isar::EpisodeOutcome),
) -> Result<ParameterVector> {
    let mut meta_grad = psi.zeros_like();
    for task in tasks {
        let mut phi = psi.clone();
        let mut adam = AdamState::for_params(psi);
        let mut task_grad = psi.zeros_like();
        for _ in 0..episodes_per_task {
            let mut rng = rng_for_episode();
            let out = run_episode(algorithm, net, &phi, &adam, task, isar, &mut rng)?;
            for (acc, g) in task_grad.flat_mut().iter_mut().zip(out.loss_gradient.flat()) {
                *acc += g;
            }
            on_outcome(&out);
            phi = out.updated_phi;
            adam = out.adam_state;
        }
        let scale = 1.0 / episodes_per_task as f64;
        for (acc, g) in meta_grad.flat_mut().iter_mut().zip(task_grad.flat()) {
            *acc += g * scale;
        }
    }
    let next = sgd_step(psi, &meta_grad, eta)?;
    if !next.all_finite() {
        return Err(Error::NonFinite("meta-policy parameters".into()));
    }
    Ok(next)
}

/// Meta-train ψ from `init` on the configured tasks.
pub fn meta_train(
    net: &PolicyNet,
    init: &ParameterVector,
    cfg: &MetaTrainConfig,
    isar: &IsarConfig,
    algorithm: Algorithm,
) -> Result<MetaTrainOutcome> {
    cfg.validate()?;
    let mut psi = init.clone();
    let mut metrics = Vec::new();
    let mut tracker = ConvergenceTracker::new(cfg.convergence);
    let mut converged_at = None;
    let mut episode = 0u64;
    let mut iterations = 0;
    let spec = TrainSpec {
        algorithm,
        max_episodes: u64::MAX,
        convergence: cfg.convergence,
        stop_on_convergence: cfg.stop_on_convergence,
        run_id: cfg.run_id.clone(),
        seed: cfg.seed,
        stage: META_STAGE,
        record_wallclock: false,
    };
    while iterations < cfg.max_iterations && !(cfg.stop_on_convergence && converged_at.is_some()) {
        let batch: Vec<&Task> = cfg.batch(iterations).into_iter().map(|i| &cfg.tasks[i]).collect();
        let mut issued = episode;
        psi = meta_step(
            net,
            &psi,
            &batch,
            cfg.episodes_per_task,
            cfg.eta,
            isar,
            algorithm,
            || {
                issued += 1;
                episode_rng(cfg.seed, META_STAGE, issued)
            },
            |out| {
                episode += 1;
                metrics.push(episode_record(&spec, episode, out, 0));
                if tracker.push(out.success) && converged_at.is_none() {
                    converged_at = Some(episode);
                }
            },
        )?;
        iterations += 1;
    }
    Ok(MetaTrainOutcome { psi, metrics, iterations, episodes: episode, converged_at })
}

#[derive(Clone, Debug)]
pub struct CurriculumStage {
    pub level: AltitudeLevel,
    pub task: Task,
    pub budget: u64,
    pub convergence: Convergence,
}

#[derive(Clone, Debug)]
pub struct CurriculumSchedule {
    pub stages: Vec<CurriculumStage>,
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("curriculum has no stages".into()));
        }
        for w in self.stages.windows(2) {
            if !(w[0].level.altitude_m > w[1].level.altitude_m) {
                return Err(Error::Config("curriculum altitudes must strictly decrease".into()));
            }
        }
        if self.stages.iter().any(|s| s.budget == 0) {
            return Err(Error::Config("curriculum stage budgets must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stages over the whole world at each of `levels`, all with the same target.
pub fn build_curriculum(
    world: Arc<World>,
    levels: &[AltitudeLevel],
    target: (usize, usize),
    budgets: &[u64],
    max_steps: u32,
    convergence: Convergence,
) -> Result<CurriculumSchedule> {
    if levels.len() != budgets.len() {
        return Err(Error::Config(format!("{} levels but {} budgets", levels.len(), budgets.len())));
    }
    let stages = levels
        .iter()
        .zip(budgets)
        .map(|(&level, &budget)| {
            Ok(CurriculumStage { level, task: Task::full(world.clone(), level, target, max_steps)?, budget, convergence })
        })
        .collect::<Result<Vec<_>>>()?;
    let schedule = CurriculumSchedule { stages };
    schedule.validate()?;
    Ok(schedule)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: u32,
    pub level: crate::env::LevelName,
    pub episodes: u64,
    pub converged_at: Option<u64>,
    pub initial_fingerprint: u64,
    pub final_fingerprint: u64,
}

/// Resumable curriculum state: completed stages plus the in-progress one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumProgress {
    /// Index into the schedule of the stage in progress.
    pub stage_index: usize,
    pub current: TrainProgress,
    /// Fingerprint of the in-progress stage's starting parameters.
    pub stage_initial_fingerprint: u64,
    pub completed: Vec<StageSummary>,
    pub metrics: Vec<MetricsRecord>,
}

impl CurriculumProgress {
    pub fn start(psi: ParameterVector) -> Self {
        Self {
            stage_index: 0,
            stage_initial_fingerprint: psi.fingerprint(),
            current: TrainProgress::start(psi),
            completed: Vec::new(),
            metrics: Vec::new(),
        }
    }

    pub fn total_episodes(&self) -> u64 {
        self.metrics.len() as u64 + self.current.episode
    }
}

#[derive(Clone, Debug)]
pub struct CurriculumOutcome {
    pub params: ParameterVector,
    pub metrics: Vec<MetricsRecord>,
    pub stages: Vec<StageSummary>,
}

impl CurriculumOutcome {
    /// Whether the last stage met its convergence criterion.
    pub fn converged(&self) -> bool {
        self.stages.last().is_some_and(|s| s.converged_at.is_some())
    }

    pub fn episodes(&self) -> u64 {
        self.metrics.len() as u64
    }
}

/// Curriculum run settings shared by every stage.
#[derive(Clone, Debug)]
pub struct CurriculumRun {
    pub algorithm: Algorithm,
    pub run_id: String,
    pub seed: u64,
    /// Stage number written for the first stage; later stages count up from it.
    pub first_stage: u32,
}

pub fn run_curriculum(
    net: &PolicyNet,
    psi: &ParameterVector,
    schedule: &CurriculumSchedule,
    isar: &IsarConfig,
    run: &CurriculumRun,
) -> Result<CurriculumOutcome> {
    run_curriculum_from(net, schedule, isar, run, CurriculumProgress::start(psi.clone()), &mut |_| Ok(()))
}

/// Continue a curriculum from `progress`. `on_episode` sees the state after every episode.
pub fn run_curriculum_from(
    net: &PolicyNet,
    schedule: &CurriculumSchedule,
    isar: &IsarConfig,
    run: &CurriculumRun,
    mut progress: CurriculumProgress,
    on_episode: &mut dyn FnMut(&CurriculumProgress) -> Result<()>,
) -> Result<CurriculumOutcome> {
    schedule.validate()?;
    while progress.stage_index < schedule.stages.len() {
        let stage = &schedule.stages[progress.stage_index];
        let stage_no = run.first_stage + progress.stage_index as u32;
        let spec = TrainSpec {
            algorithm: run.algorithm,
            max_episodes: stage.budget,
            convergence: stage.convergence,
            stop_on_convergence: true,
            run_id: run.run_id.clone(),
            seed: run.seed,
            stage: stage_no,
            record_wallclock: false,
        };
        let current = progress.current.clone();
        let done_before = progress.clone();
        let finished = train_task(net, &stage.task, isar, &spec, current, &mut |p| {
            let mut snapshot = done_before.clone();
            snapshot.current = p.clone();
            on_episode(&snapshot)
        })?;
        log::info!(
            "stage {stage_no} ({}): {} episodes, converged at {:?}",
            stage.level.name.as_str(),
            finished.episode,
            finished.converged_at
        );
        progress.completed.push(StageSummary {
            stage: stage_no,
            level: stage.level.name,
            episodes: finished.episode,
            converged_at: finished.converged_at,
            initial_fingerprint: progress.stage_initial_fingerprint,
            final_fingerprint: finished.params.fingerprint(),
        });
        progress.metrics.extend(finished.metrics);
        // Next stage starts from this stage's final weights with a fresh optimizer.
        progress.stage_initial_fingerprint = finished.params.fingerprint();
        progress.current = TrainProgress::start(finished.params);
        progress.stage_index += 1;
    }
    Ok(CurriculumOutcome { params: progress.current.params, metrics: progress.metrics, stages: progress.completed })
}

/// Fine-tune ψ on a new task. ψ itself is left untouched.
pub fn transfer(net: &PolicyNet, psi: &ParameterVector, task: &Task, isar: &IsarConfig, spec: &TrainSpec) -> Result<TrainProgress> {
    train_task(net, task, isar, spec, TrainProgress::start(psi.clone()), &mut |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_world, sample_meta_tasks};
    use crate::isar::GradMode;
    use crate::policy_net::{init_params, NetConfig};
    use crate::rl::HyperParams;

    fn isar() -> IsarConfig {
        IsarConfig {
            hyper: HyperParams { segment_len: 4, adapt_steps: 2, alpha: 1e-3, beta: 1e-3, max_steps: 20, ..Default::default() },
            grad_mode: GradMode::FirstOrder,
            trailing_window: true,
        }
    }

    fn setup() -> (Arc<World>, PolicyNet, ParameterVector, Vec<Task>) {
        let world = Arc::new(generate_world(12, 12, 0.15, (10.0, 100.0), 4).unwrap());
        let tasks = sample_meta_tasks(&world, AltitudeLevel::meta(), 4, 6, 20, 9).unwrap();
        let cfg = NetConfig { obs_dim: tasks[0].obs_dim(), embed_dim: 8, n_hidden: 1, n_actions: 4 };
        let net = PolicyNet::new(cfg.clone()).unwrap();
        let init = init_params(&cfg, 2).unwrap();
        (world, net, init, tasks)
    }

    #[test]
    fn single_task_single_episode_is_one_sgd_step() {
        let (_, net, psi, tasks) = setup();
        let before = psi.clone();
        let mut outcome = None;
        let next = meta_step(
            &net,
            &psi,
            &[&tasks[0]],
            1,
            0.01,
            &isar(),
            Algorithm::Isar,
            || episode_rng(1, META_STAGE, 1),
            |o| outcome = Some(o.clone()),
        )
        .unwrap();
        let g = outcome.unwrap().loss_gradient;
        assert!(g.l2_norm() > 0.0);
        assert_eq!(next, sgd_step(&psi, &g, 0.01).unwrap());
        assert_eq!(psi, before);
    }

    #[test]
    fn batches_cycle_in_order() {
        let (_, _, _, tasks) = setup();
        let cfg = MetaTrainConfig {
            tasks,
            batch_size: 3,
            eta: 1e-3,
            episodes_per_task: 1,
            max_iterations: 2,
            convergence: Convergence::default(),
            stop_on_convergence: false,
            run_id: "m".into(),
            seed: 0,
        };
        assert_eq!(cfg.batch(0), [0, 1, 2]);
        assert_eq!(cfg.batch(1), [3, 0, 1]);
        let mut bad = cfg.clone();
        bad.batch_size = 5;
        assert!(bad.validate().is_err());
        bad.tasks.clear();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn meta_training_is_deterministic_and_counts_episodes() {
        let (_, net, init, tasks) = setup();
        let cfg = MetaTrainConfig {
            tasks,
            batch_size: 2,
            eta: 1e-3,
            episodes_per_task: 2,
            max_iterations: 3,
            convergence: Convergence::default(),
            stop_on_convergence: true,
            run_id: "m".into(),
            seed: 5,
        };
        let a = meta_train(&net, &init, &cfg, &isar(), Algorithm::Isar).unwrap();
        let b = meta_train(&net, &init, &cfg, &isar(), Algorithm::Isar).unwrap();
        assert_eq!((a.iterations, a.episodes), (3, 12));
        assert_eq!(a.psi, b.psi);
        assert_eq!(a.metrics, b.metrics);
        assert!(a.metrics.iter().all(|r| r.stage == META_STAGE));
        assert_eq!(a.metrics.last().unwrap().episode, 12);
        assert_ne!(a.psi, init);
    }

    #[test]
    fn curriculum_stages_descend_and_chain_parameters() {
        let (world, net, psi, _) = setup();
        let occ = world.render_level(&AltitudeLevel::low());
        let target = world.full_region().cells().find(|&(x, y)| !occ.is_blocked(x, y)).unwrap();
        let levels = [AltitudeLevel::high(), AltitudeLevel::mid(), AltitudeLevel::low()];
        let sched = build_curriculum(world.clone(), &levels, target, &[5, 6, 7], 20, Convergence::default()).unwrap();
        let run = CurriculumRun { algorithm: Algorithm::Isar, run_id: "c".into(), seed: 3, first_stage: 1 };
        let out = run_curriculum(&net, &psi, &sched, &isar(), &run).unwrap();
        assert_eq!(out.stages.iter().map(|s| s.episodes).collect::<Vec<_>>(), [5, 6, 7]);
        assert_eq!(out.episodes(), 18);
        assert!(out.metrics.windows(2).all(|w| w[0].stage <= w[1].stage));
        assert_eq!(out.stages[0].initial_fingerprint, psi.fingerprint());
        for w in out.stages.windows(2) {
            assert_eq!(w[1].initial_fingerprint, w[0].final_fingerprint);
        }
        assert_eq!(out.stages[2].final_fingerprint, out.params.fingerprint());
        assert!(!out.converged());

        let mut rising = levels;
        rising.reverse();
        assert!(build_curriculum(world.clone(), &rising, target, &[1, 1, 1], 20, Convergence::default()).is_err());
        assert!(build_curriculum(world, &levels, target, &[1, 0, 1], 20, Convergence::default()).is_err());
    }

    #[test]
    fn interrupted_curriculum_resumes_bit_exactly() {
        let (world, net, psi, _) = setup();
        let occ = world.render_level(&AltitudeLevel::low());
        let target = world.full_region().cells().find(|&(x, y)| !occ.is_blocked(x, y)).unwrap();
        let levels = [AltitudeLevel::high(), AltitudeLevel::low()];
        let sched = build_curriculum(world, &levels, target, &[6, 6], 20, Convergence::default()).unwrap();
        let run = CurriculumRun { algorithm: Algorithm::Isar, run_id: "c".into(), seed: 3, first_stage: 1 };
        let full = run_curriculum(&net, &psi, &sched, &isar(), &run).unwrap();
        let mut saved = None;
        let r = run_curriculum_from(&net, &sched, &isar(), &run, CurriculumProgress::start(psi.clone()), &mut |p| {
            if p.stage_index == 1 && p.current.episode == 2 {
                saved = Some(p.clone());
                return Err(Error::Task("stop".into()));
            }
            Ok(())
        });
        assert!(r.is_err());
        let json = serde_json::to_string(&saved.unwrap()).unwrap();
        let resumed = run_curriculum_from(&net, &sched, &isar(), &run, serde_json::from_str(&json).unwrap(), &mut |_| Ok(())).unwrap();
        assert_eq!(resumed.params, full.params);
        assert_eq!(resumed.metrics, full.metrics);
        assert_eq!(resumed.stages, full.stages);
    }

    #[test]
    fn single_level_curriculum_is_plain_fine_tuning() {
        let (world, net, psi, _) = setup();
        let occ = world.render_level(&AltitudeLevel::low());
        let target = world.full_region().cells().find(|&(x, y)| !occ.is_blocked(x, y)).unwrap();
        let sched = build_curriculum(world, &[AltitudeLevel::low()], target, &[9], 20, Convergence::default()).unwrap();
        let run = CurriculumRun { algorithm: Algorithm::Isar, run_id: "c".into(), seed: 3, first_stage: 1 };
        let cur = run_curriculum(&net, &psi, &sched, &isar(), &run).unwrap();
        let spec = TrainSpec {
            algorithm: Algorithm::Isar,
            max_episodes: 9,
            convergence: Convergence::default(),
            stop_on_convergence: true,
            run_id: "c".into(),
            seed: 3,
            stage: 1,
            record_wallclock: false,
        };
        let ft = transfer(&net, &psi, &sched.stages[0].task, &isar(), &spec).unwrap();
        assert_eq!(cur.params, ft.params);
        assert_eq!(cur.metrics, ft.metrics);
    }
}
