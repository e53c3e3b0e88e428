//! Segment rollouts and the actor-critic interaction loss.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::env::{Action, EnvState, Task};
use crate::error::{Error, Result};
use crate::policy_net::{softmax, ParamVars, ParameterVector, PolicyNet};
use crate::seed::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub gamma: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Steps per trajectory segment (N).
    pub segment_len: usize,
    /// Segments per adaptation window (K).
    pub adapt_steps: usize,
    /// Inner (interaction policy) SGD learning rate.
    pub alpha: f64,
    /// Outer (adaptation policy) Adam learning rate.
    pub beta: f64,
    /// Meta-policy SGD learning rate.
    pub eta: f64,
    pub max_steps: u32,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            value_coef: 0.5,
            entropy_coef: 0.01,
            segment_len: 5,
            adapt_steps: 3,
            alpha: 1e-3,
            beta: 1e-3,
            eta: 1e-3,
            max_steps: 70,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.segment_len == 0 || self.adapt_steps == 0 {
            return bad("segment_len (N) and adapt_steps (K) must be at least 1");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.eta >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return bad("loss coefficients must be non-negative");
        }
        if (self.segment_len * self.adapt_steps) as u64 > self.max_steps as u64 {
            log::warn!(
                "N*K = {} exceeds max_steps = {}; ISAR windows will be truncated",
                self.segment_len * self.adapt_steps,
                self.max_steps
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
    pub log_prob: f64,
    pub value: f64,
    pub entropy: f64,
}

/// Up to N consecutive steps, plus the value estimate needed to bootstrap their returns.
#[derive(Clone, Debug)]
pub struct Segment {
    pub steps: Vec<StepRecord>,
    /// Value of the state after the last step under the rollout policy, 0 if terminal.
    pub bootstrap_value: f64,
    pub target: Vec<f64>,
    /// [`ParameterVector::fingerprint`] of the rollout policy.
    pub rollout_fingerprint: u64,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_terminal(&self) -> bool {
        self.steps.last().is_some_and(|s| s.done)
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn returns(&self, gamma: f64) -> Vec<f64> {
        discounted_returns(&self.rewards(), self.bootstrap_value, gamma)
    }

    /// Differentiable log-probabilities, values and entropies under `params`.
    pub fn evaluate(&self, net: &PolicyNet, params: &ParamVars) -> Result<SegmentEval> {
        let n = self.steps.len();
        if n == 0 {
            return Err(Error::Config("cannot evaluate an empty segment".into()));
        }
        let d = self.target.len();
        let obs: Vec<f64> = self.steps.iter().flat_map(|s| s.obs.iter().copied()).collect();
        let obs = Tensor::new(vec![n, d], obs)?;
        let target = Tensor::new(vec![1, d], self.target.clone())?;
        let out = net.forward_vars(params, &obs, &target)?;
        let a = net.config().n_actions;
        let log_p = out.log_probabilities()?;
        let chosen: Vec<usize> = self.steps.iter().enumerate().map(|(k, s)| k * a + s.action).collect();
        let log_probs = log_p.index_select(&chosen, &[n])?;
        let p_log_p = log_p.exp().mul(&log_p)?;
        let entropies = p_log_p
            .matmul(&Var::constant(Tensor::ones(&[a, 1])))?
            .reshape(&[n])?
            .neg();
        let values = out.value.reshape(&[n])?;
        Ok(SegmentEval { log_probs, values, entropies })
    }
}

/// Per-step graph quantities of a segment, each `[n]`.
#[derive(Clone, Debug)]
pub struct SegmentEval {
    pub log_probs: Var,
    pub values: Var,
    pub entropies: Var,
}

/// `G_t = r_t + γ G_{t+1}` with `G_n = bootstrap`.
pub fn discounted_returns(rewards: &[f64], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut next = bootstrap;
    for t in (0..rewards.len()).rev() {
        next = rewards[t] + gamma * next;
        out[t] = next;
    }
    out
}

/// Sample an action index from a probability row using one uniform draw.
pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Roll at most `n` steps from `state` with actions sampled from `params`' policy.
pub fn rollout_segment(
    net: &PolicyNet,
    params: &ParameterVector,
    task: &Task,
    state: &EnvState,
    n: usize,
    rng: &mut Rng,
) -> Result<(Segment, EnvState)> {
    if state.done {
        return Err(Error::EpisodeDone);
    }
    let target = task.target_vector();
    let actor = net.actor(params, &target)?;
    let mut steps = Vec::with_capacity(n);
    let mut state = *state;
    while steps.len() < n && !state.done {
        let obs = task.observe(&state).to_vector();
        let (logits, value) = actor.evaluate(&obs);
        let probs = softmax(&logits);
        let action = sample_categorical(&probs, rng);
        let entropy = -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        let tr = task.step(&state, Action::from_index(action).expect("sampled action index in range"))?;
        steps.push(StepRecord {
            obs,
            action,
            reward: tr.reward,
            done: tr.done,
            log_prob: probs[action].ln(),
            value,
            entropy,
        });
        state = tr.state;
    }
    let bootstrap_value = if state.done { 0.0 } else { actor.evaluate(&task.observe(&state).to_vector()).1 };
    Ok((Segment { steps, bootstrap_value, target, rollout_fingerprint: params.fingerprint() }, state))
}

/// Actor-critic loss of a segment:
/// `−Σ log π(a_t)·Â_t + c_v Σ (V_t − G_t)² − c_e Σ H_t`, with `Â_t = G_t − V_t` held constant.
pub fn interaction_loss(segment: &Segment, eval: &SegmentEval, hyper: &HyperParams) -> Result<Var> {
    let n = segment.len();
    let returns = Var::constant(Tensor::vector(segment.returns(hyper.gamma)));
    let advantage = returns.sub(&eval.values.detach())?;
    let policy = eval.log_probs.mul(&advantage)?.sum().neg();
    let residual = eval.values.sub(&returns)?;
    let value = residual.mul(&residual)?.sum().scalar_mul(hyper.value_coef);
    let entropy = eval.entropies.sum().scalar_mul(-hyper.entropy_coef);
    debug_assert_eq!(eval.values.value().numel(), n);
    policy.add(&value)?.add(&entropy)
}

/// A scalar objective of the policy parameters.
pub trait SurrogateLoss {
    fn loss(&self, params: &ParamVars) -> Result<Var>;

    /// Fingerprint of the parameters that generated the data, when there are any.
    fn rollout_fingerprint(&self) -> Option<u64> {
        None
    }
}

/// The interaction loss of one rolled-out segment, as a function of the parameters.
pub struct SegmentObjective<'a> {
    pub net: &'a PolicyNet,
    pub segment: &'a Segment,
    pub hyper: &'a HyperParams,
}

impl SurrogateLoss for SegmentObjective<'_> {
    fn loss(&self, params: &ParamVars) -> Result<Var> {
        let eval = self.segment.evaluate(self.net, params)?;
        interaction_loss(self.segment, &eval, self.hyper)
    }

    fn rollout_fingerprint(&self) -> Option<u64> {
        Some(self.segment.rollout_fingerprint)
    }
}
