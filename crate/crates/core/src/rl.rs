//! Closed-loop control on top of a fixed channel assignment.
//!
//! The policy sees a translation-invariant view of the truss and picks one of
//! 2^n_γ joint channel states per action step. Training is PPO with a
//! clipped surrogate, GAE advantages and two separate tanh MLPs.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objectives::{center_frame, score, ObjectiveError, ObjectiveSpec, TrussEvaluator};
use crate::sim::{SimError, SimState, Trajectory};
use crate::truss::{ChannelAssignment, TrussGraph, Vec3};

/// Largest channel count the action codec supports.
pub const MAX_CODEC_CHANNELS: usize = 16;

pub const CHECKPOINT_FORMAT: &str = "vgt-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RlError {
    #[error("action {action} out of range for {n_channels} channels")]
    OutOfRange { action: usize, n_channels: usize },
    #[error("non-finite loss at update {update}: policy {policy_loss}, value {value_loss}")]
    NonFiniteLoss {
        update: usize,
        policy_loss: f64,
        value_loss: f64,
    },
    #[error("invalid PPO config: {0}")]
    InvalidConfig(String),
    #[error("observation has {got} entries, policy expects {expected}")]
    ObservationLength { expected: usize, got: usize },
    #[error("unsupported policy checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Flat observation: absolute positions, absolute velocities, body-frame
/// positions, body-frame velocities, channel states. Length 12·n_v + n_γ.
pub fn observe(graph: &TrussGraph, state: &SimState) -> Result<Vec<f64>, ObjectiveError> {
    let frame = center_frame(graph, state)?;
    let n_v = state.positions.len();
    let mut out = Vec::with_capacity(observation_len(graph));
    let push = |out: &mut Vec<f64>, v: &Vec3| out.extend_from_slice(&[v.x, v.y, v.z]);
    for p in &state.positions {
        push(&mut out, p);
    }
    for v in &state.velocities {
        push(&mut out, v);
    }
    for p in &state.positions {
        push(&mut out, &frame.point_to_local(p));
    }
    for v in &state.velocities {
        push(&mut out, &frame.rotate_to_local(v));
    }
    out.extend(state.channel_states.iter().map(|&on| if on { 1.0 } else { 0.0 }));
    debug_assert_eq!(out.len(), 12 * n_v + state.channel_states.len());
    Ok(out)
}

pub fn observation_len(graph: &TrussGraph) -> usize {
    12 * graph.n_vertices() + graph.n_channels()
}

/// Little-endian binary expansion: bit i is channel i.
pub fn encode_action(action: usize, n_channels: usize) -> Result<Vec<bool>, RlError> {
    if n_channels > MAX_CODEC_CHANNELS || action >= 1usize << n_channels {
        return Err(RlError::OutOfRange { action, n_channels });
    }
    Ok((0..n_channels).map(|i| action >> i & 1 == 1).collect())
}

pub fn decode_action(bits: &[bool]) -> usize {
    bits.iter()
        .enumerate()
        .fold(0, |acc, (i, &b)| acc | (usize::from(b) << i))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major, `outputs × inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn orthogonal<R: Rng + ?Sized>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        let (rows, cols) = (outputs.max(inputs), outputs.min(inputs));
        let g = DMatrix::<f64>::from_fn(rows, cols, |_, _| rng.sample(StandardNormal));
        let qr = g.qr();
        let mut q = qr.q();
        let r = qr.r();
        for j in 0..cols {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        // q is rows × cols with orthonormal columns.
        let w = if outputs >= inputs { q } else { q.transpose() };
        let weights = (0..outputs)
            .flat_map(|o| (0..inputs).map(move |i| (o, i)))
            .map(|(o, i)| gain * w[(o, i)])
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }

    fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Fully connected network with tanh hidden layers and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes` lists layer widths from input to output.
    pub fn orthogonal<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden_gain: f64,
        output_gain: f64,
        rng: &mut R,
    ) -> Self {
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i == last { output_gain } else { hidden_gain };
                Linear::orthogonal(w[0], w[1], gain, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).pop().expect("at least one layer")
    }

    /// Layer inputs followed by the output.
    fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.apply(acts.last().unwrap());
            if i + 1 < self.layers.len() {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(y);
        }
        acts
    }

    /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(output).
    fn backward(&self, trace: &[Vec<f64>], grad_out: &[f64], grad: &mut [f64]) {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.n_params();
        }
        let mut delta = grad_out.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace[li];
            let base = offsets[li];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[base + o * layer.inputs..base + (o + 1) * layer.inputs];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
                grad[base + layer.weights.len() + o] += d;
            }
            if li > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (p, &w) in prev.iter_mut().zip(row) {
                        *p += w * d;
                    }
                }
                for (p, &a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Linear::n_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.n_params());
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|p| {
                *p = it.next().unwrap();
            });
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

/// Actor and critic networks for one objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub n_channels: usize,
    pub actor: Mlp,
    pub critic: Mlp,
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(
        observation_len: usize,
        n_channels: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut actor_sizes = vec![observation_len];
        actor_sizes.extend_from_slice(hidden);
        let mut critic_sizes = actor_sizes.clone();
        actor_sizes.push(1 << n_channels);
        critic_sizes.push(1);
        Self {
            n_channels,
            actor: Mlp::orthogonal(&actor_sizes, 2f64.sqrt(), 0.01, rng),
            critic: Mlp::orthogonal(&critic_sizes, 2f64.sqrt(), 1.0, rng),
        }
    }

    pub fn n_actions(&self) -> usize {
        1 << self.n_channels
    }

    pub fn observation_len(&self) -> usize {
        self.actor.input_len()
    }

    pub fn logits(&self, observation: &[f64]) -> Vec<f64> {
        self.actor.forward(observation)
    }

    pub fn value(&self, observation: &[f64]) -> f64 {
        self.critic.forward(observation)[0]
    }
}

/// Samples from, or takes the argmax of, the policy's action distribution.
pub fn act<R: Rng + ?Sized>(
    policy: &Policy,
    observation: &[f64],
    mode: ActMode,
    rng: &mut R,
) -> Result<usize, RlError> {
    if observation.len() != policy.observation_len() {
        return Err(RlError::ObservationLength {
            expected: policy.observation_len(),
            got: observation.len(),
        });
    }
    let logits = policy.logits(observation);
    Ok(match mode {
        ActMode::Deterministic => argmax(&logits),
        ActMode::Stochastic => sample_categorical(&softmax(&logits), rng),
    })
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    observation_len: usize,
    n_channels: usize,
    hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    header: CheckpointHeader,
    policy: Policy,
}

impl Policy {
    /// JSON checkpoint with an architecture header.
    pub fn to_checkpoint_json(&self) -> String {
        let hidden = self.actor.layers[..self.actor.layers.len() - 1]
            .iter()
            .map(|l| l.outputs)
            .collect();
        let ckpt = Checkpoint {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                observation_len: self.observation_len(),
                n_channels: self.n_channels,
                hidden,
            },
            policy: self.clone(),
        };
        serde_json::to_string(&ckpt).expect("finite parameters")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self, RlError> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| RlError::Checkpoint(e.to_string()))?;
        let h = &ckpt.header;
        if h.format != CHECKPOINT_FORMAT || h.version != CHECKPOINT_VERSION {
            return Err(RlError::Checkpoint(format!(
                "expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                h.format, h.version
            )));
        }
        let p = ckpt.policy;
        if p.observation_len() != h.observation_len
            || p.n_channels != h.n_channels
            || p.actor.output_len() != 1 << h.n_channels
            || p.critic.output_len() != 1
        {
            return Err(RlError::Checkpoint("header does not match parameters".into()));
        }
        for l in p.actor.layers.iter().chain(&p.critic.layers) {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(RlError::Checkpoint("layer shape mismatch".into()));
            }
        }
        Ok(p)
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Episodic environment with a discrete action space.
pub trait Environment: Clone + Send + Sync {
    fn observation_len(&self) -> usize;
    fn n_channels(&self) -> usize;
    /// Upper bound on episode length, used to size rollouts.
    fn episode_len(&self) -> usize;
    fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<f64>, RlError>;
    fn step(&mut self, action: usize) -> Result<Transition, RlError>;
}

/// One truss task: reward is the objective score at the last action step and
/// zero before it.
#[derive(Debug, Clone)]
pub struct TrussEnv {
    evaluator: Arc<TrussEvaluator>,
    assignment: ChannelAssignment,
    objective: ObjectiveSpec,
    n_actions: usize,
    position_noise: f64,
    blowup_reward: f64,
    states: Vec<SimState>,
}

impl TrussEnv {
    pub fn new(
        evaluator: Arc<TrussEvaluator>,
        assignment: ChannelAssignment,
        objective: ObjectiveSpec,
        n_actions: usize,
        position_noise: f64,
        blowup_reward: f64,
    ) -> Result<Self, RlError> {
        objective.validate()?;
        Ok(Self {
            evaluator,
            assignment,
            objective,
            n_actions,
            position_noise,
            blowup_reward,
            states: Vec::new(),
        })
    }

    fn graph(&self) -> &TrussGraph {
        self.evaluator.graph()
    }
}

impl Environment for TrussEnv {
    fn observation_len(&self) -> usize {
        observation_len(self.graph())
    }

    fn n_channels(&self) -> usize {
        self.graph().n_channels()
    }

    fn episode_len(&self) -> usize {
        self.n_actions
    }

    fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<f64>, RlError> {
        let mut s0 = self.evaluator.initial_state()?.clone();
        if self.position_noise > 0.0 {
            for p in &mut s0.positions {
                for c in p.iter_mut() {
                    *c += self.position_noise * rng.sample::<f64, _>(StandardNormal);
                }
                p.z = p.z.max(0.0);
            }
        }
        let obs = observe(self.graph(), &s0)?;
        self.states = vec![s0];
        Ok(obs)
    }

    fn step(&mut self, action: usize) -> Result<Transition, RlError> {
        let bits = encode_action(action, self.n_channels())?;
        let current = self.states.last().expect("reset before step").clone();
        let mut ctl = |_: usize, _: &SimState| bits.clone();
        let t = self
            .evaluator
            .simulator()
            .rollout(&self.assignment, &current, &mut ctl, 1)?;
        if t.is_flagged() {
            return Ok(Transition {
                observation: observe(self.graph(), &current)?,
                reward: self.blowup_reward,
                done: true,
            });
        }
        let next = t.states.into_iter().nth(1).expect("one action step");
        let observation = match observe(self.graph(), &next) {
            Ok(o) => o,
            Err(_) => {
                return Ok(Transition {
                    observation: observe(self.graph(), &current)?,
                    reward: self.blowup_reward,
                    done: true,
                })
            }
        };
        self.states.push(next);
        let done = self.states.len() > self.n_actions;
        let reward = if done {
            let trajectory = Trajectory {
                states: std::mem::take(&mut self.states),
                blowup_step: None,
            };
            let r = score(&self.objective, self.graph(), &trajectory).unwrap_or(self.blowup_reward);
            self.states = trajectory.states;
            r
        } else {
            0.0
        };
        Ok(Transition {
            observation,
            reward,
            done,
        })
    }
}

/// One-step contextual bandit: the observation is a one-hot context and
/// reward is 1 exactly when the action equals that context's target.
#[derive(Debug, Clone)]
pub struct BanditEnv {
    n_contexts: usize,
    n_channels: usize,
    context: usize,
}

impl BanditEnv {
    pub fn new(n_contexts: usize, n_channels: usize) -> Self {
        Self {
            n_contexts,
            n_channels,
            context: 0,
        }
    }

    pub fn target(&self, context: usize) -> usize {
        (3 * context + 1) % (1 << self.n_channels)
    }
}

impl Environment for BanditEnv {
    fn observation_len(&self) -> usize {
        self.n_contexts
    }

    fn n_channels(&self) -> usize {
        self.n_channels
    }

    fn episode_len(&self) -> usize {
        1
    }

    fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<f64>, RlError> {
        self.context = rng.random_range(0..self.n_contexts);
        let mut obs = vec![0.0; self.n_contexts];
        obs[self.context] = 1.0;
        Ok(obs)
    }

    fn step(&mut self, action: usize) -> Result<Transition, RlError> {
        let reward = if action == self.target(self.context) { 1.0 } else { 0.0 };
        Ok(Transition {
            observation: vec![0.0; self.n_contexts],
            reward,
            done: true,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub updates: usize,
    /// Environment steps collected per update (rounded up to whole episodes).
    pub rollout_steps: usize,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    pub normalize_advantages: bool,
    /// Std-dev of Gaussian noise added to initial positions (m).
    pub position_noise: f64,
    /// Terminal reward when the simulation blows up.
    pub blowup_reward: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            updates: 600,
            rollout_steps: 2048,
            minibatch_size: 64,
            epochs: 4,
            clip: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            learning_rate: 3e-4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            hidden: vec![64, 64],
            normalize_advantages: true,
            position_noise: 0.0,
            blowup_reward: -10.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::InvalidConfig(m.into()));
        if self.rollout_steps == 0 || self.minibatch_size == 0 || self.epochs == 0 {
            return bad("rollout_steps, minibatch_size and epochs must be positive");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        Ok(())
    }
}

/// Training summary for one PPO update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: usize,
    pub mean_return: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Flattened batch used by the loss functions.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Batch {
        Batch {
            observations: idx.iter().map(|&i| self.observations[i].clone()).collect(),
            actions: idx.iter().map(|&i| self.actions[i]).collect(),
            old_log_probs: idx.iter().map(|&i| self.old_log_probs[i]).collect(),
            advantages: idx.iter().map(|&i| self.advantages[i]).collect(),
            returns: idx.iter().map(|&i| self.returns[i]).collect(),
        }
    }
}

/// Clipped-surrogate policy loss minus the entropy bonus, with its gradient.
/// Returns `(loss, surrogate_loss, mean_entropy, grad)`.
pub fn actor_loss_and_grad(
    actor: &Mlp,
    batch: &Batch,
    clip: f64,
    entropy_coef: f64,
) -> (f64, f64, f64, Vec<f64>) {
    let n = batch.len() as f64;
    let mut grad = vec![0.0; actor.n_params()];
    let (mut surrogate, mut entropy) = (0.0, 0.0);
    for i in 0..batch.len() {
        let trace = actor.trace(&batch.observations[i]);
        let logits = trace.last().unwrap();
        let logp = log_softmax(logits);
        let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let a = batch.actions[i];
        let adv = batch.advantages[i];
        let ratio = (logp[a] - batch.old_log_probs[i]).exp();
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
        surrogate -= unclipped.min(clipped);
        let h: f64 = -p.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
        entropy += h;

        let mut g = vec![0.0; logits.len()];
        if unclipped <= clipped {
            // d(−ratio·A)/dz = −ratio·A·(onehot − p)
            for (j, gj) in g.iter_mut().enumerate() {
                let onehot = if j == a { 1.0 } else { 0.0 };
                *gj -= unclipped * (onehot - p[j]);
            }
        }
        // d(−c·H)/dz_j = c·p_j·(log p_j + H)
        for (j, gj) in g.iter_mut().enumerate() {
            *gj += entropy_coef * p[j] * (logp[j] + h);
            *gj /= n;
        }
        actor.backward(&trace, &g, &mut grad);
    }
    let (surrogate, entropy) = (surrogate / n, entropy / n);
    (surrogate - entropy_coef * entropy, surrogate, entropy, grad)
}

/// Mean of ½(V − R)² with its gradient.
pub fn critic_loss_and_grad(critic: &Mlp, batch: &Batch) -> (f64, Vec<f64>) {
    let n = batch.len() as f64;
    let mut grad = vec![0.0; critic.n_params()];
    let mut loss = 0.0;
    for i in 0..batch.len() {
        let trace = critic.trace(&batch.observations[i]);
        let err = trace.last().unwrap()[0] - batch.returns[i];
        loss += 0.5 * err * err;
        critic.backward(&trace, &[err / n], &mut grad);
    }
    (loss / n, grad)
}

/// Plain policy-gradient loss −mean(A·log π(a)) and its gradient.
pub fn vanilla_pg_loss_and_grad(actor: &Mlp, batch: &Batch) -> (f64, Vec<f64>) {
    let n = batch.len() as f64;
    let mut grad = vec![0.0; actor.n_params()];
    let mut loss = 0.0;
    for i in 0..batch.len() {
        let trace = actor.trace(&batch.observations[i]);
        let logp = log_softmax(trace.last().unwrap());
        let a = batch.actions[i];
        let adv = batch.advantages[i];
        loss -= adv * logp[a];
        let g: Vec<f64> = logp
            .iter()
            .enumerate()
            .map(|(j, l)| -adv * (f64::from(u8::from(j == a)) - l.exp()) / n)
            .collect();
        actor.backward(&trace, &g, &mut grad);
    }
    (loss / n, grad)
}

/// Rescales to zero mean and unit variance.
pub fn normalize(values: &mut [f64]) {
    if values.len() < 2 {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    values.iter_mut().for_each(|v| *v = (*v - mean) / std);
}

/// Generalised advantage estimates for one episode ending in a terminal state.
/// Returns `(advantages, returns)`.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

fn clip_grad_norm(grad: &mut [f64], max_norm: f64) {
    if !(max_norm > 0.0) {
        return;
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        grad.iter_mut().for_each(|g| *g *= max_norm / norm);
    }
}

#[derive(Debug, Default)]
struct Episode {
    observations: Vec<Vec<f64>>,
    actions: Vec<usize>,
    log_probs: Vec<f64>,
    values: Vec<f64>,
    rewards: Vec<f64>,
}

fn run_episode<E: Environment>(
    env: &E,
    policy: &Policy,
    seed: u64,
) -> Result<Episode, RlError> {
    let mut env = env.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = env.reset(&mut rng)?;
    let mut ep = Episode::default();
    for _ in 0..env.episode_len() {
        let logp = log_softmax(&policy.logits(&obs));
        let action = sample_categorical(&logp.iter().map(|l| l.exp()).collect::<Vec<_>>(), &mut rng);
        ep.values.push(policy.value(&obs));
        ep.log_probs.push(logp[action]);
        ep.actions.push(action);
        let t = env.step(action)?;
        ep.observations.push(std::mem::replace(&mut obs, t.observation));
        ep.rewards.push(t.reward);
        if t.done {
            break;
        }
    }
    Ok(ep)
}

/// PPO training. Episodes within an update are collected in parallel with
/// per-episode seeds, so results do not depend on the worker count.
pub fn train_ppo<E: Environment>(
    env: &E,
    config: &PpoConfig,
    seed: u64,
    mut on_update: impl FnMut(&UpdateRecord),
) -> Result<(Policy, Vec<UpdateRecord>), RlError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = Policy::new(env.observation_len(), env.n_channels(), &config.hidden, &mut rng);
    let mut actor_params = policy.actor.params();
    let mut critic_params = policy.critic.params();
    let mut actor_opt = Adam::new(actor_params.len(), config.learning_rate);
    let mut critic_opt = Adam::new(critic_params.len(), config.learning_rate);
    let episodes_per_update = config.rollout_steps.div_ceil(env.episode_len().max(1));
    let mut history = Vec::with_capacity(config.updates);

    for update in 0..config.updates {
        let seeds: Vec<u64> = (0..episodes_per_update).map(|_| rng.random()).collect();
        let episodes = seeds
            .par_iter()
            .map(|&s| run_episode(env, &policy, s))
            .collect::<Result<Vec<_>, _>>()?;

        let mut batch = Batch::default();
        let mut total_return = 0.0;
        for ep in episodes {
            total_return += ep.rewards.iter().sum::<f64>();
            let (adv, ret) = gae(&ep.rewards, &ep.values, config.gamma, config.gae_lambda);
            batch.observations.extend(ep.observations);
            batch.actions.extend(ep.actions);
            batch.old_log_probs.extend(ep.log_probs);
            batch.advantages.extend(adv);
            batch.returns.extend(ret);
        }
        if config.normalize_advantages {
            normalize(&mut batch.advantages);
        }

        let mut index: Vec<usize> = (0..batch.len()).collect();
        let (mut pl, mut vl, mut ent, mut count) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..config.epochs {
            index.shuffle(&mut rng);
            for chunk in index.chunks(config.minibatch_size) {
                let mb = batch.subset(chunk);
                let (_, surrogate, entropy, mut ag) =
                    actor_loss_and_grad(&policy.actor, &mb, config.clip, config.entropy_coef);
                let (value_loss, mut cg) = critic_loss_and_grad(&policy.critic, &mb);
                if !surrogate.is_finite() || !value_loss.is_finite() {
                    return Err(RlError::NonFiniteLoss {
                        update,
                        policy_loss: surrogate,
                        value_loss,
                    });
                }
                cg.iter_mut().for_each(|g| *g *= config.value_coef);
                clip_grad_norm(&mut ag, config.max_grad_norm);
                clip_grad_norm(&mut cg, config.max_grad_norm);
                actor_opt.step(&mut actor_params, &ag);
                critic_opt.step(&mut critic_params, &cg);
                policy.actor.set_params(&actor_params);
                policy.critic.set_params(&critic_params);
                pl += surrogate;
                vl += value_loss;
                ent += entropy;
                count += 1.0;
            }
        }

        let record = UpdateRecord {
            update,
            mean_return: total_return / episodes_per_update as f64,
            policy_loss: pl / count,
            value_loss: vl / count,
            entropy: ent / count,
        };
        on_update(&record);
        history.push(record);
    }
    Ok((policy, history))
}

/// Runs a trained policy greedily on the truss from the settled state.
pub fn policy_rollout(
    evaluator: &TrussEvaluator,
    assignment: &ChannelAssignment,
    policy: &Policy,
    n_actions: usize,
) -> Result<Trajectory, RlError> {
    let graph = evaluator.graph();
    let n_channels = graph.n_channels();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut failure = None;
    let mut ctl = |_: usize, s: &SimState| {
        let chosen = observe(graph, s)
            .map_err(RlError::from)
            .and_then(|o| act(policy, &o, ActMode::Deterministic, &mut rng));
        match chosen.and_then(|a| encode_action(a, n_channels)) {
            Ok(bits) => bits,
            Err(e) => {
                failure.get_or_insert(e);
                vec![false; n_channels]
            }
        }
    };
    let trajectory = evaluator.rollout(assignment, &mut ctl, n_actions)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(trajectory),
    }
}
