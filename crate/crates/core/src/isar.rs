//! Incremental self-adaptive updates within an episode.
//!
//! The interaction policy θ acts and takes one SGD step per N-step segment. Every K
//! segments the adaptation policy φ takes one Adam step on the sum of the window's
//! interaction losses, differentiated through the unrolled inner steps, and θ is reset
//! to the new φ. The episode-level baseline runs the same inner loop but only updates φ
//! once, at the end of the episode. Plain actor-critic (no inner loop) is provided as the
//! non-meta reference.

use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, grad, Var};
use crate::env::Task;
use crate::error::{Error, Result};
use crate::metrics::{Convergence, ConvergenceTracker, MetricsRecord};
use crate::policy_net::{adam_step, AdamState, ParamVars, ParameterVector, PolicyNet};
use crate::rl::{rollout_segment, HyperParams, SegmentObjective, SurrogateLoss};
use crate::seed::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Backpropagate through the inner gradient steps (second-order terms included).
    ExactSecondOrder,
    /// Treat inner gradients as constants.
    FirstOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Isar,
    Baseline,
    A3c,
}

impl Algorithm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "isar" => Ok(Algorithm::Isar),
            "baseline" => Ok(Algorithm::Baseline),
            "a3c" => Ok(Algorithm::A3c),
            other => Err(Error::Config(format!("unknown algorithm '{other}' (isar|baseline|a3c)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Isar => "isar",
            Algorithm::Baseline => "baseline",
            Algorithm::A3c => "a3c",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsarConfig {
    pub hyper: HyperParams,
    pub grad_mode: GradMode,
    /// Apply an outer update over a final partial window at episode end.
    pub trailing_window: bool,
}

impl Default for IsarConfig {
    fn default() -> Self {
        Self { hyper: HyperParams::default(), grad_mode: GradMode::ExactSecondOrder, trailing_window: true }
    }
}

/// One SGD step `θ − α ∇_θ L(θ)`.
///
/// In exact mode the step is recorded on the graph (when θ is itself connected to one),
/// so later losses can be differentiated through it. Returns the new parameters and the
/// loss value at θ.
pub fn inner_update(theta: &ParamVars, objective: &dyn SurrogateLoss, alpha: f64, mode: GradMode) -> Result<(ParamVars, f64)> {
    let loss = objective.loss(theta)?;
    if !loss.validate_finite() {
        return Err(Error::NonFinite("interaction loss".into()));
    }
    let create_graph = mode == GradMode::ExactSecondOrder && theta.requires_grad();
    let grads = grad(&loss, theta.vars(), create_graph)?;
    let stepped = theta
        .vars()
        .iter()
        .zip(&grads)
        .map(|(t, g)| t.sub(&g.scalar_mul(alpha)))
        .collect::<Result<Vec<Var>>>()?;
    Ok((ParamVars::from_vars(stepped, theta.layout().to_vec())?, loss.item()))
}

/// The unrolled inner loop of one adaptation window.
///
/// Each pushed segment must have been rolled out under the window's current θ. Its
/// interaction loss drives one inner step θ → θ′, and the window keeps the loss
/// re-evaluated at θ′ as its term; θ′ becomes the rollout policy for the next segment.
pub struct AdaptationWindow {
    phi: ParamVars,
    theta: ParamVars,
    theta_values: ParameterVector,
    terms: Vec<Var>,
    inner_losses: Vec<f64>,
    alpha: f64,
    mode: GradMode,
}

impl AdaptationWindow {
    /// Window starting from leaves for φ.
    pub fn open(phi: &ParameterVector, alpha: f64, mode: GradMode) -> Self {
        Self::over(phi.to_vars(true), alpha, mode)
    }

    pub fn over(phi: ParamVars, alpha: f64, mode: GradMode) -> Self {
        let theta_values = phi.values();
        Self { theta: phi.clone(), phi, theta_values, terms: Vec::new(), inner_losses: Vec::new(), alpha, mode }
    }

    pub fn phi(&self) -> &ParamVars {
        &self.phi
    }

    /// Current interaction policy.
    pub fn theta(&self) -> &ParamVars {
        &self.theta
    }

    pub fn theta_values(&self) -> &ParameterVector {
        &self.theta_values
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Interaction losses at the pre-update θ of each segment.
    pub fn inner_losses(&self) -> &[f64] {
        &self.inner_losses
    }

    pub fn push(&mut self, objective: &dyn SurrogateLoss) -> Result<()> {
        if let Some(fp) = objective.rollout_fingerprint() {
            if fp != self.theta_values.fingerprint() {
                return Err(Error::ChainDiscontinuity { index: self.terms.len() });
            }
        }
        let (next, inner_loss) = inner_update(&self.theta, objective, self.alpha, self.mode)?;
        let term = objective.loss(&next)?;
        self.theta_values = next.values();
        if !self.theta_values.all_finite() {
            return Err(Error::NonFinite("interaction policy parameters".into()));
        }
        self.theta = next;
        self.terms.push(term);
        self.inner_losses.push(inner_loss);
        Ok(())
    }

    /// Sum of the window's terms, differentiable with respect to φ.
    pub fn loss(&self) -> Result<Var> {
        let mut iter = self.terms.iter();
        let first = iter.next().ok_or_else(|| Error::Config("empty adaptation window".into()))?.clone();
        iter.try_fold(first, |acc, t| acc.add(t))
    }
}

pub struct AdaptationLoss {
    pub loss: Var,
    pub inner_losses: Vec<f64>,
    /// θ after the last inner step.
    pub theta: ParamVars,
}

/// Sum of interaction losses over a chain of segments starting from φ.
pub fn adaptation_loss(phi: &ParamVars, segments: &[&dyn SurrogateLoss], alpha: f64, mode: GradMode) -> Result<AdaptationLoss> {
    let mut window = AdaptationWindow::over(phi.clone(), alpha, mode);
    for s in segments {
        window.push(*s)?;
    }
    Ok(AdaptationLoss { loss: window.loss()?, inner_losses: window.inner_losses.clone(), theta: window.theta })
}

/// Batch form: each objective adapts independently from φ by one inner step,
/// `Σ_i L_i(φ − α ∇L_i(φ))`.
pub fn meta_objective(phi: &ParamVars, objectives: &[&dyn SurrogateLoss], alpha: f64, mode: GradMode) -> Result<Var> {
    let mut total: Option<Var> = None;
    for obj in objectives {
        let term = adaptation_loss(phi, std::slice::from_ref(obj), alpha, mode)?.loss;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Config("no objectives".into()))
}

pub struct OuterStep {
    pub phi: ParameterVector,
    pub adam: AdamState,
    pub gradient: ParameterVector,
}

/// One Adam step on φ along `−∇_φ loss`.
pub fn outer_update(phi_vars: &ParamVars, loss: &Var, adam: &AdamState, beta: f64) -> Result<OuterStep> {
    let grads = backward(loss, false)?;
    let gradient = phi_vars.gradient(&grads);
    if !gradient.all_finite() {
        return Err(Error::NonFinite("adaptation gradient".into()));
    }
    let (phi, adam) = adam_step(&phi_vars.values(), &gradient, adam, beta)?;
    if !phi.all_finite() {
        return Err(Error::NonFinite("adaptation policy parameters".into()));
    }
    Ok(OuterStep { phi, adam, gradient })
}

#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub updated_phi: ParameterVector,
    pub adam_state: AdamState,
    pub steps_taken: u32,
    pub success: bool,
    pub total_reward: f64,
    /// One per segment.
    pub inner_losses: Vec<f64>,
    /// One per outer update.
    pub adapt_losses: Vec<f64>,
    pub segments: usize,
    pub outer_updates: usize,
    /// Sum of all gradients applied to φ during the episode.
    pub loss_gradient: ParameterVector,
    /// θ at the end of the episode.
    pub final_theta: ParameterVector,
}

impl EpisodeOutcome {
    fn new(phi: &ParameterVector, adam: &AdamState) -> Self {
        Self {
            updated_phi: phi.clone(),
            adam_state: adam.clone(),
            steps_taken: 0,
            success: false,
            total_reward: 0.0,
            inner_losses: Vec::new(),
            adapt_losses: Vec::new(),
            segments: 0,
            outer_updates: 0,
            loss_gradient: phi.zeros_like(),
            final_theta: phi.clone(),
        }
    }

    fn absorb(&mut self, step: OuterStep, loss: f64) {
        for (acc, g) in self.loss_gradient.flat_mut().iter_mut().zip(step.gradient.flat()) {
            *acc += g;
        }
        self.updated_phi = step.phi;
        self.adam_state = step.adam;
        self.adapt_losses.push(loss);
        self.outer_updates += 1;
    }
}

fn episode_task_check(task: &Task, cfg: &IsarConfig) -> Result<()> {
    if task.max_steps() != cfg.hyper.max_steps {
        log::debug!("task max_steps {} overrides hyper max_steps {}", task.max_steps(), cfg.hyper.max_steps);
    }
    cfg.hyper.validate()
}

/// Windowed episode with outer updates every `window` segments.
fn run_windowed(
    net: &PolicyNet,
    phi: &ParameterVector,
    adam: &AdamState,
    task: &Task,
    cfg: &IsarConfig,
    window_len: usize,
    trailing: bool,
    rng: &mut Rng,
) -> Result<EpisodeOutcome> {
    episode_task_check(task, cfg)?;
    let h = &cfg.hyper;
    let mut out = EpisodeOutcome::new(phi, adam);
    let mut state = task.reset_with(rng);
    let mut window = AdaptationWindow::open(phi, h.alpha, cfg.grad_mode);
    while !state.done {
        let (segment, next) = rollout_segment(net, window.theta_values(), task, &state, h.segment_len, rng)?;
        out.steps_taken += segment.len() as u32;
        out.total_reward += segment.rewards().iter().sum::<f64>();
        state = next;
        window.push(&SegmentObjective { net, segment: &segment, hyper: h })?;
        out.inner_losses.push(*window.inner_losses().last().expect("pushed"));
        out.segments += 1;
        if window.len() == window_len {
            let loss = window.loss()?;
            let step = outer_update(window.phi(), &loss, &out.adam_state, h.beta)?;
            out.absorb(step, loss.item());
            // θ ← φ
            window = AdaptationWindow::open(&out.updated_phi, h.alpha, cfg.grad_mode);
        }
    }
    out.final_theta = window.theta_values().clone();
    if !window.is_empty() && trailing {
        let loss = window.loss()?;
        let step = outer_update(window.phi(), &loss, &out.adam_state, h.beta)?;
        out.absorb(step, loss.item());
        out.final_theta = out.updated_phi.clone();
    }
    out.success = state.succeeded;
    Ok(out)
}

pub fn run_episode_isar(
    net: &PolicyNet,
    phi: &ParameterVector,
    adam: &AdamState,
    task: &Task,
    cfg: &IsarConfig,
    rng: &mut Rng,
) -> Result<EpisodeOutcome> {
    run_windowed(net, phi, adam, task, cfg, cfg.hyper.adapt_steps, cfg.trailing_window, rng)
}

/// Inner steps per segment, one outer update over the whole episode.
pub fn run_episode_baseline(
    net: &PolicyNet,
    phi: &ParameterVector,
    adam: &AdamState,
    task: &Task,
    cfg: &IsarConfig,
    rng: &mut Rng,
) -> Result<EpisodeOutcome> {
    run_windowed(net, phi, adam, task, cfg, usize::MAX, true, rng)
}

/// Actor-critic: one Adam step (rate β) on the interaction loss after every segment.
pub fn run_episode_a3c(
    net: &PolicyNet,
    params: &ParameterVector,
    adam: &AdamState,
    task: &Task,
    cfg: &IsarConfig,
    rng: &mut Rng,
) -> Result<EpisodeOutcome> {
    episode_task_check(task, cfg)?;
    let h = &cfg.hyper;
    let mut out = EpisodeOutcome::new(params, adam);
    let mut state = task.reset_with(rng);
    while !state.done {
        let (segment, next) = rollout_segment(net, &out.updated_phi, task, &state, h.segment_len, rng)?;
        out.steps_taken += segment.len() as u32;
        out.total_reward += segment.rewards().iter().sum::<f64>();
        state = next;
        let vars = out.updated_phi.to_vars(true);
        let loss = SegmentObjective { net, segment: &segment, hyper: h }.loss(&vars)?;
        if !loss.validate_finite() {
            return Err(Error::NonFinite("interaction loss".into()));
        }
        let step = outer_update(&vars, &loss, &out.adam_state, h.beta)?;
        out.inner_losses.push(loss.item());
        out.segments += 1;
        for (acc, g) in out.loss_gradient.flat_mut().iter_mut().zip(step.gradient.flat()) {
            *acc += g;
        }
        out.updated_phi = step.phi;
        out.adam_state = step.adam;
        out.outer_updates += 1;
    }
    out.final_theta = out.updated_phi.clone();
    out.success = state.succeeded;
    Ok(out)
}

pub fn run_episode(
    algorithm: Algorithm,
    net: &PolicyNet,
    phi: &ParameterVector,
    adam: &AdamState,
    task: &Task,
    cfg: &IsarConfig,
    rng: &mut Rng,
) -> Result<EpisodeOutcome> {
    match algorithm {
        Algorithm::Isar => run_episode_isar(net, phi, adam, task, cfg, rng),
        Algorithm::Baseline => run_episode_baseline(net, phi, adam, task, cfg, rng),
        Algorithm::A3c => run_episode_a3c(net, phi, adam, task, cfg, rng),
    }
}

/// Randomness for one episode of a run.
pub fn episode_rng(seed: u64, stage: u32, episode: u64) -> Rng {
    seed::rng_for(seed, &[seed::STREAM_EPISODE, stage as u64, episode])
}

/// Episode loop settings for training on one task.
#[derive(Clone, Debug)]
pub struct TrainSpec {
    pub algorithm: Algorithm,
    pub max_episodes: u64,
    pub convergence: Convergence,
    pub stop_on_convergence: bool,
    pub run_id: String,
    pub seed: u64,
    pub stage: u32,
    pub record_wallclock: bool,
}

/// Resumable state of a training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub params: ParameterVector,
    pub adam: AdamState,
    /// Episodes completed.
    pub episode: u64,
    pub metrics: Vec<MetricsRecord>,
    pub converged_at: Option<u64>,
}

impl TrainProgress {
    pub fn start(params: ParameterVector) -> Self {
        let adam = AdamState::for_params(&params);
        Self { params, adam, episode: 0, metrics: Vec::new(), converged_at: None }
    }

    pub fn is_finished(&self, spec: &TrainSpec) -> bool {
        self.episode >= spec.max_episodes || (spec.stop_on_convergence && self.converged_at.is_some())
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn episode_record(spec: &TrainSpec, episode: u64, out: &EpisodeOutcome, wallclock_ms: u64) -> MetricsRecord {
    MetricsRecord {
        run_id: spec.run_id.clone(),
        seed: spec.seed,
        stage: spec.stage,
        episode,
        steps: out.steps_taken,
        total_reward: out.total_reward,
        success: out.success as u8,
        inner_loss: mean(&out.inner_losses),
        adapt_loss: mean(&out.adapt_losses),
        wallclock_ms,
    }
}

/// Train on a single task until the budget is spent or the success criterion is met.
///
/// `on_episode` observes progress after every episode (checkpointing hook); returning an
/// error aborts the loop.
pub fn train_task(
    net: &PolicyNet,
    task: &Task,
    cfg: &IsarConfig,
    spec: &TrainSpec,
    mut progress: TrainProgress,
    on_episode: &mut dyn FnMut(&TrainProgress) -> Result<()>,
) -> Result<TrainProgress> {
    let mut tracker = ConvergenceTracker::new(spec.convergence);
    for r in &progress.metrics {
        tracker.push(r.success == 1);
    }
    while !progress.is_finished(spec) {
        let episode = progress.episode + 1;
        let started = Instant::now();
        let mut rng = episode_rng(spec.seed, spec.stage, episode);
        let out = run_episode(spec.algorithm, net, &progress.params, &progress.adam, task, cfg, &mut rng)?;
        let ms = if spec.record_wallclock { started.elapsed().as_millis() as u64 } else { 0 };
        let record = episode_record(spec, episode, &out, ms);
        if tracker.push(out.success) && progress.converged_at.is_none() {
            progress.converged_at = Some(episode);
        }
        progress.params = out.updated_phi;
        progress.adam = out.adam_state;
        progress.episode = episode;
        progress.metrics.push(record);
        on_episode(&progress)?;
    }
    Ok(progress)
}

/// Asynchronous variant: `workers` threads pull a φ snapshot, run an episode, and push
/// the resulting parameter delta to the shared store. Episode numbers follow completion
/// order, so results are not reproducible across runs.
pub fn train_task_async(
    net: &PolicyNet,
    task: &Task,
    cfg: &IsarConfig,
    spec: &TrainSpec,
    progress: TrainProgress,
    workers: usize,
) -> Result<TrainProgress> {
    struct Shared {
        progress: TrainProgress,
        tracker: ConvergenceTracker,
        issued: u64,
        failure: Option<Error>,
    }
    let mut tracker = ConvergenceTracker::new(spec.convergence);
    for r in &progress.metrics {
        tracker.push(r.success == 1);
    }
    let issued = progress.episode;
    let shared = Mutex::new(Shared { progress, tracker, issued, failure: None });
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1) {
            scope.spawn(|| loop {
                let (snapshot, adam, ticket) = {
                    let mut s = shared.lock().expect("parameter store poisoned");
                    if s.failure.is_some() || s.issued >= spec.max_episodes || (spec.stop_on_convergence && s.progress.converged_at.is_some()) {
                        return;
                    }
                    s.issued += 1;
                    (s.progress.params.clone(), s.progress.adam.clone(), s.issued)
                };
                let started = Instant::now();
                let mut rng = episode_rng(spec.seed, spec.stage, ticket);
                let result = run_episode(spec.algorithm, net, &snapshot, &adam, task, cfg, &mut rng);
                let mut s = shared.lock().expect("parameter store poisoned");
                match result {
                    Ok(out) => {
                        for ((p, new), old) in s.progress.params.flat_mut().iter_mut().zip(out.updated_phi.flat()).zip(snapshot.flat()) {
                            *p += new - old;
                        }
                        s.progress.adam = out.adam_state.clone();
                        let episode = s.progress.episode + 1;
                        let ms = if spec.record_wallclock { started.elapsed().as_millis() as u64 } else { 0 };
                        let record = episode_record(spec, episode, &out, ms);
                        if s.tracker.push(out.success) && s.progress.converged_at.is_none() {
                            s.progress.converged_at = Some(episode);
                        }
                        s.progress.episode = episode;
                        s.progress.metrics.push(record);
                    }
                    Err(e) => {
                        s.failure.get_or_insert(e);
                    }
                }
            });
        }
    });
    let s = shared.into_inner().expect("parameter store poisoned");
    match s.failure {
        Some(e) => Err(e),
        None => Ok(s.progress),
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::autodiff::Tensor;
    use crate::env::{AltitudeLevel, World};
    use crate::policy_net::{init_params, LayoutEntry, NetConfig};

    struct Quadratic(Vec<f64>);

    impl SurrogateLoss for Quadratic {
        fn loss(&self, p: &ParamVars) -> Result<Var> {
            let d = p.vars()[0].sub(&Var::constant(Tensor::vector(self.0.clone())))?;
            Ok(d.mul(&d)?.sum().scalar_mul(0.5))
        }
    }

    fn point(v: &[f64]) -> ParameterVector {
        ParameterVector::from_flat(vec![LayoutEntry::new("w".into(), vec![v.len()])], v.to_vec()).unwrap()
    }

    fn phi_grad(phi: &ParameterVector, losses: &[Quadratic], alpha: f64, mode: GradMode) -> Vec<f64> {
        let vars = phi.to_vars(true);
        let objs: Vec<&dyn SurrogateLoss> = losses.iter().map(|q| q as &dyn SurrogateLoss).collect();
        let l = adaptation_loss(&vars, &objs, alpha, mode).unwrap().loss;
        vars.gradient(&backward(&l, false).unwrap()).flat().to_vec()
    }

    #[test]
    fn inner_update_quadratic_closed_form() {
        let theta = point(&[1.0, -2.0, 0.5]).to_vars(true);
        let c = [0.25, 1.0, -1.0];
        let (next, loss) = inner_update(&theta, &Quadratic(c.to_vec()), 0.3, GradMode::ExactSecondOrder).unwrap();
        for ((t, c), n) in [1.0, -2.0, 0.5].iter().zip(c).zip(next.values().flat()) {
            assert!((n - (t - 0.3 * (t - c))).abs() < 1e-15);
        }
        assert!((loss - 0.5 * (0.75f64.powi(2) + 9.0 + 2.25)).abs() < 1e-12);
        assert!(next.requires_grad() && !next.vars()[0].is_leaf());
        let (same, _) = inner_update(&theta, &Quadratic(c.to_vec()), 0.0, GradMode::FirstOrder).unwrap();
        assert_eq!(same.values(), theta.values());
    }

    #[test]
    fn chained_window_matches_closed_form() {
        // θ_{k+1} = (1−α)θ_k + α c_k; terms ½‖θ_{k+1} − c_k‖².
        let phi = [0.7, -1.2];
        let cs = [[0.1, 0.4], [-0.5, 2.0], [1.5, -0.3]];
        let alpha = 0.35;
        let losses: Vec<Quadratic> = cs.iter().map(|c| Quadratic(c.to_vec())).collect();
        let exact = phi_grad(&point(&phi), &losses, alpha, GradMode::ExactSecondOrder);
        let first = phi_grad(&point(&phi), &losses, alpha, GradMode::FirstOrder);
        for d in 0..2 {
            let (mut theta, mut ge, mut gf) = (phi[d], 0.0, 0.0);
            for (k, c) in cs.iter().enumerate() {
                theta = (1.0 - alpha) * theta + alpha * c[d];
                ge += (1.0f64 - alpha).powi(k as i32 + 1) * (theta - c[d]);
                gf += theta - c[d];
            }
            assert!((exact[d] - ge).abs() < 1e-12, "{exact:?} vs {ge}");
            assert!((first[d] - gf).abs() < 1e-12, "{first:?} vs {gf}");
        }
    }

    #[test]
    fn batch_objective_matches_one_step_oracle() {
        let phi = point(&[0.3, 0.9, -0.4]);
        let cs = [vec![1.0, 0.0, 0.0], vec![-0.2, 0.5, 2.0]];
        let alpha = 0.6;
        let losses: Vec<Quadratic> = cs.iter().map(|c| Quadratic(c.clone())).collect();
        let objs: Vec<&dyn SurrogateLoss> = losses.iter().map(|q| q as &dyn SurrogateLoss).collect();
        for (mode, power) in [(GradMode::ExactSecondOrder, 2), (GradMode::FirstOrder, 1)] {
            let vars = phi.to_vars(true);
            let l = meta_objective(&vars, &objs, alpha, mode).unwrap();
            let g = vars.gradient(&backward(&l, false).unwrap());
            for d in 0..3 {
                let want: f64 = cs.iter().map(|c| (1.0f64 - alpha).powi(power) * (phi.flat()[d] - c[d])).sum();
                assert!((g.flat()[d] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_alpha_modes_agree() {
        let losses = vec![Quadratic(vec![1.0, 2.0]), Quadratic(vec![-1.0, 0.0])];
        let a = phi_grad(&point(&[0.5, 0.5]), &losses, 0.0, GradMode::ExactSecondOrder);
        let b = phi_grad(&point(&[0.5, 0.5]), &losses, 0.0, GradMode::FirstOrder);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_gradient_outer_update_is_identity() {
        let phi = point(&[1.0, 2.0]);
        let vars = phi.to_vars(true);
        let l = Quadratic(vec![1.0, 2.0]).loss(&vars).unwrap();
        let step = outer_update(&vars, &l, &AdamState::for_params(&phi), 0.1).unwrap();
        assert_eq!(step.phi, phi);
    }

    fn setup() -> (PolicyNet, Task, ParameterVector) {
        let world = Arc::new(World::open(8, 8).unwrap());
        let task = Task::full(world, AltitudeLevel::low(), (6, 1), 23).unwrap();
        let cfg = NetConfig { obs_dim: task.obs_dim(), embed_dim: 8, n_hidden: 1, n_actions: 4 };
        let net = PolicyNet::new(cfg.clone()).unwrap();
        (net, task, init_params(&cfg, 5).unwrap())
    }

    fn cfg(k: usize, alpha: f64, beta: f64, mode: GradMode) -> IsarConfig {
        IsarConfig {
            hyper: HyperParams { segment_len: 4, adapt_steps: k, alpha, beta, max_steps: 23, ..Default::default() },
            grad_mode: mode,
            trailing_window: true,
        }
    }

    #[test]
    fn window_accounting() {
        let (net, task, phi) = setup();
        let adam = AdamState::for_params(&phi);
        for k in 1..=4 {
            for trailing in [true, false] {
                let mut c = cfg(k, 0.05, 1e-3, GradMode::ExactSecondOrder);
                c.trailing_window = trailing;
                for s in 0..3 {
                    let out = run_episode_isar(&net, &phi, &adam, &task, &c, &mut seed::rng(s)).unwrap();
                    let full = out.segments / k;
                    let extra = (trailing && out.segments % k != 0) as usize;
                    assert_eq!(out.outer_updates, full + extra);
                    assert_eq!(out.adapt_losses.len(), out.outer_updates);
                    assert_eq!(out.inner_losses.len(), out.segments);
                    assert!(out.steps_taken <= task.max_steps());
                    assert_eq!(out.adam_state.t as usize, out.outer_updates);
                    if out.segments % k == 0 {
                        assert_eq!(out.final_theta, out.updated_phi);
                    }
                }
            }
        }
        let out = run_episode_baseline(&net, &phi, &adam, &task, &cfg(3, 0.05, 1e-3, GradMode::FirstOrder), &mut seed::rng(1)).unwrap();
        assert_eq!(out.outer_updates, 1);
    }

    #[test]
    fn spanning_window_matches_baseline_bitwise() {
        let (net, task, phi) = setup();
        let adam = AdamState::for_params(&phi);
        // 23 steps in 4-step segments: at most 6 segments.
        let c = cfg(6, 0.05, 1e-2, GradMode::ExactSecondOrder);
        for s in 0..3 {
            let a = run_episode_isar(&net, &phi, &adam, &task, &c, &mut seed::rng(s)).unwrap();
            let b = run_episode_baseline(&net, &phi, &adam, &task, &c, &mut seed::rng(s)).unwrap();
            assert_eq!(a.updated_phi, b.updated_phi);
            assert_eq!(a.adam_state, b.adam_state);
        }
    }

    #[test]
    fn zero_beta_freezes_phi() {
        let (net, task, phi) = setup();
        let adam = AdamState::for_params(&phi);
        for alg in [Algorithm::Isar, Algorithm::Baseline, Algorithm::A3c] {
            let out = run_episode(alg, &net, &phi, &adam, &task, &cfg(2, 0.1, 0.0, GradMode::ExactSecondOrder), &mut seed::rng(3)).unwrap();
            assert_eq!(out.updated_phi, phi);
        }
    }

    #[test]
    fn zero_alpha_episode_modes_agree() {
        let (net, task, phi) = setup();
        let adam = AdamState::for_params(&phi);
        let a = run_episode_isar(&net, &phi, &adam, &task, &cfg(2, 0.0, 1e-2, GradMode::ExactSecondOrder), &mut seed::rng(9)).unwrap();
        let b = run_episode_isar(&net, &phi, &adam, &task, &cfg(2, 0.0, 1e-2, GradMode::FirstOrder), &mut seed::rng(9)).unwrap();
        for (x, y) in a.loss_gradient.flat().iter().zip(b.loss_gradient.flat()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn mismatched_rollout_policy_is_rejected() {
        let (net, task, phi) = setup();
        let h = HyperParams::default();
        let state = task.reset(0);
        let (segment, _) = rollout_segment(&net, &phi, &task, &state, 4, &mut seed::rng(0)).unwrap();
        let mut window = AdaptationWindow::open(&phi, 0.1, GradMode::FirstOrder);
        let obj = SegmentObjective { net: &net, segment: &segment, hyper: &h };
        window.push(&obj).unwrap();
        assert!(matches!(window.push(&obj), Err(Error::ChainDiscontinuity { index: 1 })));
    }

    #[test]
    fn training_resume_is_bit_exact() {
        let (net, task, phi) = setup();
        let c = cfg(2, 0.05, 1e-2, GradMode::FirstOrder);
        let spec = |max| TrainSpec {
            algorithm: Algorithm::Isar,
            max_episodes: max,
            convergence: Convergence { threshold: 0.9, window: 5 },
            stop_on_convergence: false,
            run_id: "t".into(),
            seed: 11,
            stage: 1,
            record_wallclock: false,
        };
        let full = train_task(&net, &task, &c, &spec(6), TrainProgress::start(phi.clone()), &mut |_| Ok(())).unwrap();
        let half = train_task(&net, &task, &c, &spec(3), TrainProgress::start(phi.clone()), &mut |_| Ok(())).unwrap();
        let json = serde_json::to_string(&half).unwrap();
        let restored: TrainProgress = serde_json::from_str(&json).unwrap();
        let resumed = train_task(&net, &task, &c, &spec(6), restored, &mut |_| Ok(())).unwrap();
        assert_eq!(full, resumed);
    }
}
