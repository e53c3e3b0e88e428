//! Goal-conditioned actor-critic network over a flat parameter vector.
//!
//! A shared tanh encoder embeds the current observation and the target observation;
//! the two embeddings are concatenated, passed through one fused tanh layer and read
//! out by a policy head (action logits) and a value head.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;

pub const N_ACTIONS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub obs_dim: usize,
    pub embed_dim: usize,
    pub n_hidden: usize,
    pub n_actions: usize,
}

impl NetConfig {
    pub fn new(obs_dim: usize) -> Self {
        Self { obs_dim, embed_dim: 64, n_hidden: 2, n_actions: N_ACTIONS }
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.embed_dim == 0 || self.n_hidden == 0 {
            return Err(Error::Config(format!("network dimensions must be positive: {:?}", self)));
        }
        if self.n_actions != N_ACTIONS {
            return Err(Error::Config(format!(
                "n_actions must be {} (forward, right, left, backward), got {}",
                N_ACTIONS, self.n_actions
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<LayoutEntry> {
        let e = self.embed_dim;
        let mut layout = Vec::new();
        for k in 0..self.n_hidden {
            let fan_in = if k == 0 { self.obs_dim } else { e };
            layout.push(LayoutEntry::new(format!("encoder.{k}.w"), vec![fan_in, e]));
            layout.push(LayoutEntry::new(format!("encoder.{k}.b"), vec![1, e]));
        }
        layout.push(LayoutEntry::new("fuse.w".into(), vec![2 * e, e]));
        layout.push(LayoutEntry::new("fuse.b".into(), vec![1, e]));
        layout.push(LayoutEntry::new("policy.w".into(), vec![e, self.n_actions]));
        layout.push(LayoutEntry::new("policy.b".into(), vec![1, self.n_actions]));
        layout.push(LayoutEntry::new("value.w".into(), vec![e, 1]));
        layout.push(LayoutEntry::new("value.b".into(), vec![1, 1]));
        layout
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn new(name: String, shape: Vec<usize>) -> Self {
        Self { name, shape }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn is_bias(&self) -> bool {
        self.name.ends_with(".b")
    }
}

/// All learnable weights of one policy, flattened in layout order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    layout: Vec<LayoutEntry>,
    flat: Vec<f64>,
}

const PARAMS_FORMAT: &str = "isarlab.parameters";
const PARAMS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    params: ParameterVector,
}

impl ParameterVector {
    pub fn from_flat(layout: Vec<LayoutEntry>, flat: Vec<f64>) -> Result<Self> {
        let need: usize = layout.iter().map(LayoutEntry::numel).sum();
        if need != flat.len() {
            return Err(Error::Layout(format!("layout needs {} values, got {}", need, flat.len())));
        }
        Ok(Self { layout, flat })
    }

    pub fn zeros(layout: Vec<LayoutEntry>) -> Self {
        let n = layout.iter().map(LayoutEntry::numel).sum();
        Self { layout, flat: vec![0.0; n] }
    }

    pub fn zeros_like(&self) -> Self {
        Self { layout: self.layout.clone(), flat: vec![0.0; self.flat.len()] }
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// Slices of `flat` per layout entry.
    pub fn chunks(&self) -> impl Iterator<Item = (&LayoutEntry, &[f64])> {
        let mut offset = 0;
        self.layout.iter().map(move |entry| {
            let n = entry.numel();
            let chunk = &self.flat[offset..offset + n];
            offset += n;
            (entry, chunk)
        })
    }

    pub fn check_layout(&self, other: &ParameterVector) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::Layout(format!(
                "{} entries / {} values vs {} entries / {} values",
                self.layout.len(),
                self.flat.len(),
                other.layout.len(),
                other.flat.len()
            )));
        }
        Ok(())
    }

    /// Overwrite these weights with `src` (θ ← φ).
    pub fn load_from(&mut self, src: &ParameterVector) -> Result<()> {
        self.check_layout(src)?;
        self.flat.copy_from_slice(&src.flat);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.flat.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Order-sensitive hash of the exact bit patterns, used to check rollout lineage.
    pub fn fingerprint(&self) -> u64 {
        self.flat.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }

    /// Graph leaves, one per layout entry.
    pub fn to_vars(&self, requires_grad: bool) -> ParamVars {
        let vars = self
            .chunks()
            .map(|(entry, chunk)| Var::leaf(Tensor::from_parts(entry.shape.clone(), chunk.to_vec()), requires_grad))
            .collect();
        ParamVars { vars, layout: self.layout.clone() }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = ParamsFile { format: PARAMS_FORMAT.into(), version: PARAMS_VERSION, params: self.clone() };
        std::fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file: ParamsFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if file.format != PARAMS_FORMAT || file.version != PARAMS_VERSION {
            return Err(Error::Layout(format!("unsupported parameter file {} v{}", file.format, file.version)));
        }
        ParameterVector::from_flat(file.params.layout, file.params.flat)
    }
}

/// Parameters as graph nodes: leaves for φ, possibly derived nodes for adapted θ.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
    layout: Vec<LayoutEntry>,
}

impl ParamVars {
    pub fn from_vars(vars: Vec<Var>, layout: Vec<LayoutEntry>) -> Result<Self> {
        if vars.len() != layout.len() || vars.iter().zip(&layout).any(|(v, e)| v.shape() != e.shape.as_slice()) {
            return Err(Error::Layout("variables do not match layout".into()));
        }
        Ok(Self { vars, layout })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    /// Current numeric values.
    pub fn values(&self) -> ParameterVector {
        let flat = self.vars.iter().flat_map(|v| v.value().data().iter().copied()).collect();
        ParameterVector { layout: self.layout.clone(), flat }
    }

    /// True when any entry is still connected to a differentiable graph.
    pub fn requires_grad(&self) -> bool {
        self.vars.iter().any(Var::requires_grad)
    }

    /// Gradients for these variables as a flat vector; zeros where the root is independent.
    pub fn gradient(&self, grads: &GradientMap) -> ParameterVector {
        let flat = self
            .vars
            .iter()
            .flat_map(|v| match grads.tensor(v) {
                Some(t) => t.data().to_vec(),
                None => vec![0.0; v.value().numel()],
            })
            .collect();
        ParameterVector { layout: self.layout.clone(), flat }
    }

    /// Per-entry gradient nodes, in layout order.
    pub fn gradient_vars(&self, grads: &GradientMap) -> Vec<Var> {
        self.vars.iter().map(|v| grads.get_or_zeros(v)).collect()
    }

    pub fn detached(&self) -> ParamVars {
        ParamVars { vars: self.vars.iter().map(Var::detach).collect(), layout: self.layout.clone() }
    }

    fn get(&self, k: usize) -> &Var {
        &self.vars[k]
    }
}

/// Uniform Glorot initialisation for weights, zero biases.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ParameterVector> {
    cfg.validate()?;
    let layout = cfg.layout();
    let mut rng = seed::rng_for(seed, &[seed::STREAM_INIT]);
    let mut flat = Vec::with_capacity(layout.iter().map(LayoutEntry::numel).sum());
    for entry in &layout {
        if entry.is_bias() {
            flat.extend(std::iter::repeat_n(0.0, entry.numel()));
        } else {
            let bound = glorot_bound(entry);
            flat.extend((0..entry.numel()).map(|_| rng.gen_range(-bound..bound)));
        }
    }
    ParameterVector::from_flat(layout, flat)
}

pub fn glorot_bound(entry: &LayoutEntry) -> f64 {
    let (fan_in, fan_out) = (entry.shape[0], entry.shape[1]);
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Graph outputs for a batch of rows.
#[derive(Clone, Debug)]
pub struct PolicyOutput {
    /// `[rows, n_actions]`
    pub logits: Var,
    /// `[rows, 1]`
    pub value: Var,
}

impl PolicyOutput {
    pub fn probabilities(&self) -> Var {
        self.logits.softmax_logits()
    }

    /// Row-wise log-softmax, shifted by the (constant) row maximum for stability.
    pub fn log_probabilities(&self) -> Result<Var> {
        let z = self.logits.value();
        let (n, a) = (z.shape()[0], z.shape()[1]);
        let mut shift = Vec::with_capacity(n * a);
        for row in z.data().chunks(a) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            shift.extend(std::iter::repeat(m).take(a));
        }
        let shifted = self.logits.sub(&Var::constant(Tensor::new(vec![n, a], shift)?))?;
        let log_norm = shifted
            .exp()
            .matmul(&Var::constant(Tensor::ones(&[a, 1])))?
            .log()
            .matmul(&Var::constant(Tensor::ones(&[1, a])))?;
        shifted.sub(&log_norm)
    }
}

#[derive(Clone, Debug)]
pub struct PolicyNet {
    cfg: NetConfig,
}

impl PolicyNet {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn check_params(&self, layout: &[LayoutEntry]) -> Result<()> {
        if layout != self.cfg.layout().as_slice() {
            return Err(Error::Layout("parameters were not built for this network".into()));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor, what: &str) -> Result<usize> {
        match x.as_matrix_dims() {
            Some((rows, cols)) if cols == self.cfg.obs_dim && rows > 0 => Ok(rows),
            _ => Err(Error::Shape {
                op: "policy_forward",
                detail: format!("{what} has shape {:?}, expected [rows, {}]", x.shape(), self.cfg.obs_dim),
            }),
        }
    }

    fn encode(&self, params: &ParamVars, x: Var) -> Result<Var> {
        let rows = x.shape()[0];
        let ones = Var::constant(Tensor::ones(&[rows, 1]));
        let mut h = x;
        for k in 0..self.cfg.n_hidden {
            let (w, b) = (params.get(2 * k), params.get(2 * k + 1));
            h = h.matmul(w)?.add(&ones.matmul(b)?)?.tanh();
        }
        Ok(h)
    }

    /// Batched forward pass. `obs` is `[rows, obs_dim]`; `target` is either `[rows, obs_dim]`
    /// or a single row broadcast to every observation.
    pub fn forward_vars(&self, params: &ParamVars, obs: &Tensor, target: &Tensor) -> Result<PolicyOutput> {
        self.check_params(params.layout())?;
        let rows = self.check_input(obs, "observation")?;
        let target_rows = self.check_input(target, "target observation")?;
        if target_rows != rows && target_rows != 1 {
            return Err(Error::Shape {
                op: "policy_forward",
                detail: format!("{rows} observation rows but {target_rows} target rows"),
            });
        }
        let as_matrix = |t: &Tensor, r: usize| Var::constant(Tensor::from_parts(vec![r, self.cfg.obs_dim], t.data().to_vec()));
        let obs_embed = self.encode(params, as_matrix(obs, rows))?;
        let mut target_embed = self.encode(params, as_matrix(target, target_rows))?;
        if target_rows != rows {
            target_embed = Var::constant(Tensor::ones(&[rows, 1])).matmul(&target_embed)?;
        }
        let joint = Var::concat(&[obs_embed, target_embed], 1)?;
        let base = 2 * self.cfg.n_hidden;
        let ones = Var::constant(Tensor::ones(&[rows, 1]));
        let fused = joint
            .matmul(params.get(base))?
            .add(&ones.matmul(params.get(base + 1))?)?
            .tanh();
        let logits = fused.matmul(params.get(base + 2))?.add(&ones.matmul(params.get(base + 3))?)?;
        let value = fused.matmul(params.get(base + 4))?.add(&ones.matmul(params.get(base + 5))?)?;
        Ok(PolicyOutput { logits, value })
    }

    /// Single-observation forward pass; with `differentiable` the outputs are connected
    /// to freshly created parameter leaves, which are returned alongside.
    pub fn forward(
        &self,
        params: &ParameterVector,
        obs: &Tensor,
        target: &Tensor,
        differentiable: bool,
    ) -> Result<(PolicyOutput, ParamVars)> {
        let vars = params.to_vars(differentiable);
        let out = if differentiable {
            self.forward_vars(&vars, obs, target)?
        } else {
            crate::autodiff::no_grad(|| self.forward_vars(&vars, obs, target))?
        };
        Ok((out, vars))
    }

    /// Graph-free evaluator used while sampling actions.
    pub fn actor(&self, params: &ParameterVector, target: &[f64]) -> Result<Actor> {
        self.check_params(params.layout())?;
        if target.len() != self.cfg.obs_dim {
            return Err(Error::Shape {
                op: "policy_forward",
                detail: format!("target has length {}, expected {}", target.len(), self.cfg.obs_dim),
            });
        }
        let mats: Vec<Vec<f64>> = params.chunks().map(|(_, c)| c.to_vec()).collect();
        let mut actor = Actor { cfg: self.cfg.clone(), mats, target_embed: Vec::new() };
        actor.target_embed = actor.encode(target);
        Ok(actor)
    }
}

/// Plain-`f64` forward pass for a fixed parameter vector and target.
pub struct Actor {
    cfg: NetConfig,
    mats: Vec<Vec<f64>>,
    target_embed: Vec<f64>,
}

fn dense(input: &[f64], w: &[f64], b: &[f64], out_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_dim];
    for (p, &x) in input.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = &w[p * out_dim..(p + 1) * out_dim];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += x * wv;
        }
    }
    for (o, &bv) in out.iter_mut().zip(b) {
        *o += bv;
    }
    out
}

impl Actor {
    fn encode(&self, x: &[f64]) -> Vec<f64> {
        let e = self.cfg.embed_dim;
        let mut h = x.to_vec();
        for k in 0..self.cfg.n_hidden {
            h = dense(&h, &self.mats[2 * k], &self.mats[2 * k + 1], e);
            h.iter_mut().for_each(|v| *v = v.tanh());
        }
        h
    }

    /// Action logits and state value for one observation.
    pub fn evaluate(&self, obs: &[f64]) -> (Vec<f64>, f64) {
        let e = self.cfg.embed_dim;
        let mut joint = self.encode(obs);
        joint.extend_from_slice(&self.target_embed);
        let base = 2 * self.cfg.n_hidden;
        let mut fused = dense(&joint, &self.mats[base], &self.mats[base + 1], e);
        fused.iter_mut().for_each(|v| *v = v.tanh());
        let logits = dense(&fused, &self.mats[base + 2], &self.mats[base + 3], self.cfg.n_actions);
        let value = dense(&fused, &self.mats[base + 4], &self.mats[base + 5], 1)[0];
        (logits, value)
    }
}

/// Max-subtracted softmax of a logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `params − lr · grads`, leaving both inputs untouched.
pub fn sgd_step(params: &ParameterVector, grads: &ParameterVector, lr: f64) -> Result<ParameterVector> {
    params.check_layout(grads)?;
    let flat = params.flat.iter().zip(&grads.flat).map(|(p, g)| p - lr * g).collect();
    Ok(ParameterVector { layout: params.layout.clone(), flat })
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn for_params(params: &ParameterVector) -> Self {
        Self::new(params.len())
    }
}

/// One bias-corrected Adam step.
pub fn adam_step(
    params: &ParameterVector,
    grads: &ParameterVector,
    state: &AdamState,
    lr: f64,
) -> Result<(ParameterVector, AdamState)> {
    params.check_layout(grads)?;
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Layout(format!(
            "optimizer state has {} entries for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    let t = state.t + 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let mut next = AdamState { m: Vec::with_capacity(params.len()), v: Vec::with_capacity(params.len()), t };
    let mut flat = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let g = grads.flat[i];
        let m = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        let v = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        flat.push(params.flat[i] - lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
        next.m.push(m);
        next.v.push(v);
    }
    Ok((ParameterVector { layout: params.layout.clone(), flat }, next))
}
