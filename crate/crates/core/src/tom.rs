//! Transition occupancy matching: the discriminator that estimates the
//! relevance reward, the dual Q-function, and the importance weights it
//! induces on replay transitions.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::approximator::{
    adam_step, backward, forward_batch, sigmoid, softplus, Activation, AdamState, MlpSpec, ParamVector,
};
use crate::error::{Error, Result};
use crate::fdiv::FDivergence;
use crate::mdp::{Policy, ReplayBuffer, Transition};
use crate::occupancy::{
    accelerated_ascent, exact_occupancy, transition_occupancy, TabularMdp, TabularPolicy,
    TransitionOccupancyTable,
};

pub const DEFAULT_HIDDEN: [usize; 2] = [256, 256];
pub const DEFAULT_CLAMP_EPSILON: f64 = 1e-6;
pub const DEFAULT_CLIP_BOUND: f64 = 10.0;
pub const TRAIN_VALUE_SAMPLES: usize = 4;
pub const WEIGHT_VALUE_SAMPLES: usize = 16;

/// Source of the relevance reward `r(s, a, s')`.
pub trait Relevance {
    fn relevance(&self, t: &Transition) -> f64;
}

impl<F: Fn(&Transition) -> f64> Relevance for F {
    fn relevance(&self, t: &Transition) -> f64 {
        self(t)
    }
}

/// `-log(1/c - 1)` with `c` clamped away from 0 and 1, then clipped.
pub fn relevance_from_probability(c: f64, clamp_epsilon: f64, clip_bound: f64) -> f64 {
    let c = c.clamp(clamp_epsilon, 1.0 - clamp_epsilon);
    (c.ln() - (1.0 - c).ln()).clamp(-clip_bound, clip_bound)
}

fn transition_features(t: &Transition, out: &mut Vec<f64>) {
    out.extend_from_slice(&t.state);
    out.extend_from_slice(&t.action);
    out.extend_from_slice(&t.next_state);
}

/// Classifier `c(s, a, s')` separating current-policy transitions (label 1)
/// from replay transitions (label 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub spec: MlpSpec,
    pub params: ParamVector,
    pub clamp_epsilon: f64,
    pub clip_bound: f64,
}

impl Discriminator {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut dyn RngCore) -> Result<Self> {
        let spec = MlpSpec::new(
            2 * state_dim + action_dim,
            hidden.to_vec(),
            1,
            Activation::Tanh,
            Activation::Sigmoid,
        )?;
        let params = spec.init_params(rng);
        Ok(Self {
            spec,
            params,
            clamp_epsilon: DEFAULT_CLAMP_EPSILON,
            clip_bound: DEFAULT_CLIP_BOUND,
        })
    }

    fn logit_spec(&self) -> MlpSpec {
        self.spec.with_output_activation(Activation::Identity)
    }

    /// Pre-sigmoid outputs for a batch of transitions.
    pub fn logits(&self, batch: &[&Transition]) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(batch.len() * self.spec.input_dim);
        for t in batch {
            transition_features(t, &mut x);
        }
        Ok(forward_batch(&self.logit_spec(), &self.params, &x)?.output().to_vec())
    }

    /// Clamped classifier outputs.
    pub fn probabilities(&self, batch: &[&Transition]) -> Result<Vec<f64>> {
        Ok(self
            .logits(batch)?
            .into_iter()
            .map(|z| sigmoid(z).clamp(self.clamp_epsilon, 1.0 - self.clamp_epsilon))
            .collect())
    }

    pub fn probability(&self, t: &Transition) -> Result<f64> {
        Ok(self.probabilities(&[t])?[0])
    }

    pub fn relevance_rewards(&self, batch: &[&Transition]) -> Result<Vec<f64>> {
        Ok(self
            .probabilities(batch)?
            .into_iter()
            .map(|c| relevance_from_probability(c, self.clamp_epsilon, self.clip_bound))
            .collect())
    }

    /// Mean binary cross-entropy over both classes and its parameter gradient.
    pub fn loss_and_gradient(
        &self,
        params: &[f64],
        positives: &[&Transition],
        negatives: &[&Transition],
    ) -> Result<(f64, ParamVector)> {
        let spec = self.logit_spec();
        let n = positives.len() + negatives.len();
        let mut x = Vec::with_capacity(n * spec.input_dim);
        for t in positives.iter().chain(negatives) {
            transition_features(t, &mut x);
        }
        let tape = forward_batch(&spec, params, &x)?;
        let mut loss = 0.0;
        let mut upstream = Vec::with_capacity(n);
        for (i, &z) in tape.output().iter().enumerate() {
            let y = if i < positives.len() { 1.0 } else { 0.0 };
            loss += softplus(z) - y * z;
            upstream.push((sigmoid(z) - y) / n as f64);
        }
        let (grad, _) = backward(&spec, params, &tape, &upstream)?;
        Ok((loss / n as f64, grad))
    }
}

impl Relevance for Discriminator {
    fn relevance(&self, t: &Transition) -> f64 {
        self.probability(t)
            .map(|c| relevance_from_probability(c, self.clamp_epsilon, self.clip_bound))
            .unwrap_or(0.0)
    }
}

/// Reward of a single transition under the discriminator.
pub fn relevance_reward(disc: &Discriminator, t: &Transition) -> Result<f64> {
    let c = disc.probability(t)?;
    Ok(relevance_from_probability(c, disc.clamp_epsilon, disc.clip_bound))
}

/// Logistic training with balanced minibatches: `batch` policy transitions
/// and `batch` replay transitions per step. Returns the per-step loss trace.
pub fn train_discriminator(
    disc: &mut Discriminator,
    policy_buffer: &ReplayBuffer,
    replay_buffer: &ReplayBuffer,
    steps: usize,
    batch: usize,
    adam: &mut AdamState,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    if policy_buffer.is_empty() {
        return Err(Error::EmptyBuffer("discriminator needs current-policy transitions"));
    }
    if replay_buffer.is_empty() {
        return Err(Error::EmptyBuffer("discriminator needs replay transitions"));
    }
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let pos = policy_buffer.sample(batch, None, rng)?;
        let neg = replay_buffer.sample(batch, None, rng)?;
        let (loss, grad) = disc.loss_and_gradient(&disc.params, &pos, &neg)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                phase: "discriminator",
                detail: format!("loss {loss}"),
            });
        }
        adam_step(&mut disc.params, &grad, adam)?;
        trace.push(loss);
    }
    Ok(trace)
}

/// Lagrangian Q-function of the transition occupancy matching dual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualQ {
    pub spec: MlpSpec,
    pub params: ParamVector,
    pub gamma: f64,
    pub value_samples: usize,
}

impl DualQ {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        gamma: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let spec = MlpSpec::new(
            state_dim + action_dim,
            hidden.to_vec(),
            1,
            Activation::Relu,
            Activation::Identity,
        )?;
        let params = spec.init_params(rng);
        Ok(Self {
            spec,
            params,
            gamma,
            value_samples: TRAIN_VALUE_SAMPLES,
        })
    }

    pub fn q_value(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let mut x = state.to_vec();
        x.extend_from_slice(action);
        Ok(forward_batch(&self.spec, &self.params, &x)?.output()[0])
    }
}

/// `V(s) = (1/P) sum_p Q(s, a_p)` with `a_p ~ policy(.|s)`.
pub fn state_value<P: Policy + ?Sized>(
    q: &DualQ,
    policy: &P,
    state: &[f64],
    samples: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let samples = samples.max(1);
    let mut x = Vec::with_capacity(samples * q.spec.input_dim);
    for _ in 0..samples {
        x.extend_from_slice(state);
        x.extend(policy.sample_action(state, rng));
    }
    let tape = forward_batch(&q.spec, &q.params, &x)?;
    Ok(tape.output().iter().sum::<f64>() / samples as f64)
}

/// A dual-loss minibatch with every policy action already drawn, so the loss
/// is a deterministic function of the Q parameters.
fn stack_rows(states: &[&[f64]], actions: &[Vec<f64>]) -> Vec<f64> {
    let mut x = Vec::new();
    for (s, a) in states.iter().zip(actions) {
        x.extend_from_slice(s);
        x.extend_from_slice(a);
    }
    x
}

#[derive(Debug, Clone)]
pub struct DualBatch {
    input_dim: usize,
    samples: usize,
    /// `n_init * samples` rows of `(s0, a ~ pi)`.
    initial_rows: Vec<f64>,
    /// `n` rows of `(s, a)`.
    pair_rows: Vec<f64>,
    /// `n * samples` rows of `(s', a' ~ pi)`.
    next_rows: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl DualBatch {
    pub fn new<P: Policy + ?Sized>(
        policy: &P,
        transitions: &[&Transition],
        rewards: &[f64],
        initial_states: &[Vec<f64>],
        samples: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::EmptyBuffer("dual loss needs transitions"));
        }
        if initial_states.is_empty() {
            return Err(Error::EmptySupport("dual loss needs initial states"));
        }
        if rewards.len() != transitions.len() {
            return Err(Error::dims("relevance rewards", transitions.len(), rewards.len()));
        }
        let samples = samples.max(1);
        let first = transitions[0];
        let input_dim = first.state.len() + first.action.len();
        let repeated_initial: Vec<&[f64]> = initial_states
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.as_slice(), samples))
            .collect();
        let initial_rows = stack_rows(&repeated_initial, &policy.sample_actions(&repeated_initial, rng));
        let mut pair_rows = Vec::with_capacity(transitions.len() * input_dim);
        for t in transitions {
            pair_rows.extend_from_slice(&t.state);
            pair_rows.extend_from_slice(&t.action);
        }
        let repeated_next: Vec<&[f64]> = transitions
            .iter()
            .flat_map(|t| std::iter::repeat_n(t.next_state.as_slice(), samples))
            .collect();
        let next_rows = stack_rows(&repeated_next, &policy.sample_actions(&repeated_next, rng));
        Ok(Self {
            input_dim,
            samples,
            initial_rows,
            pair_rows,
            next_rows,
            rewards: rewards.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn n_initial(&self) -> usize {
        self.initial_rows.len() / (self.input_dim * self.samples)
    }
}

/// `e = r + gamma V(s') - Q(s, a)` per transition, from one forward pass output.
fn advantages(out: &[f64], batch: &DualBatch, gamma: f64) -> Vec<f64> {
    let n0 = batch.n_initial() * batch.samples;
    let n = batch.len();
    let q_sa = &out[n0..n0 + n];
    let q_next = &out[n0 + n..];
    (0..n)
        .map(|j| {
            let v = q_next[j * batch.samples..(j + 1) * batch.samples].iter().sum::<f64>()
                / batch.samples as f64;
            batch.rewards[j] + gamma * v - q_sa[j]
        })
        .collect()
}

fn stacked_rows(batch: &DualBatch) -> Vec<f64> {
    let mut x = Vec::with_capacity(batch.initial_rows.len() + batch.pair_rows.len() + batch.next_rows.len());
    x.extend_from_slice(&batch.initial_rows);
    x.extend_from_slice(&batch.pair_rows);
    x.extend_from_slice(&batch.next_rows);
    x
}

/// `(1 - gamma) mean Q(s0, a0) + mean f*(r + gamma V(s') - Q(s, a))` and its
/// full gradient with respect to `params`.
pub fn dual_loss_and_gradient(
    spec: &MlpSpec,
    params: &[f64],
    gamma: f64,
    divergence: FDivergence,
    batch: &DualBatch,
) -> Result<(f64, ParamVector)> {
    if spec.input_dim != batch.input_dim {
        return Err(Error::dims("dual batch rows", spec.input_dim, batch.input_dim));
    }
    let tape = forward_batch(spec, params, &stacked_rows(batch))?;
    let out = tape.output();
    let n0 = batch.n_initial() * batch.samples;
    let n = batch.len();
    let p = batch.samples as f64;
    let e = advantages(out, batch, gamma);

    let init_term = out[..n0].iter().sum::<f64>() / n0 as f64;
    let conj_term = e.iter().map(|&v| divergence.conjugate(v)).sum::<f64>() / n as f64;
    let loss = (1.0 - gamma) * init_term + conj_term;

    let mut upstream = vec![(1.0 - gamma) / n0 as f64; n0];
    upstream.extend(e.iter().map(|&v| -divergence.conjugate_prime(v) / n as f64));
    for &v in &e {
        let g = gamma * divergence.conjugate_prime(v) / (n as f64 * p);
        upstream.extend(std::iter::repeat_n(g, batch.samples));
    }
    let (grad, _) = backward(spec, params, &tape, &upstream)?;
    Ok((loss, grad))
}

/// Stochastic estimate of the dual objective with freshly sampled policy actions.
#[allow(clippy::too_many_arguments)]
pub fn dual_q_loss<P: Policy + ?Sized>(
    q: &DualQ,
    policy: &P,
    divergence: FDivergence,
    transitions: &[&Transition],
    initial_states: &[Vec<f64>],
    rewards: &[f64],
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let batch = DualBatch::new(policy, transitions, rewards, initial_states, q.value_samples, rng)?;
    Ok(dual_loss_and_gradient(&q.spec, &q.params, q.gamma, divergence, &batch)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualTrainConfig {
    pub steps: usize,
    pub batch: usize,
}

impl Default for DualTrainConfig {
    fn default() -> Self {
        Self { steps: 1000, batch: 256 }
    }
}

/// Minibatch Adam on the dual loss. Initial states are drawn from the
/// episode-start transitions of `replay`. Returns the loss trace.
#[allow(clippy::too_many_arguments)]
pub fn train_dual_q<P: Policy + ?Sized, R: Relevance + ?Sized>(
    q: &mut DualQ,
    policy: &P,
    divergence: FDivergence,
    replay: &ReplayBuffer,
    relevance: &R,
    config: DualTrainConfig,
    adam: &mut AdamState,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    if replay.is_empty() {
        return Err(Error::EmptyBuffer("dual Q training needs replay transitions"));
    }
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = replay.sample(config.batch, None, rng)?;
        let init = replay.initial_state_batch(config.batch, rng)?;
        let rewards: Vec<f64> = batch.iter().map(|t| relevance.relevance(t)).collect();
        let prepared = DualBatch::new(policy, &batch, &rewards, &init, q.value_samples, rng)?;
        let (loss, grad) = dual_loss_and_gradient(&q.spec, &q.params, q.gamma, divergence, &prepared)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Diverged {
                phase: "dual_q",
                detail: format!("step {step}: loss {loss}, gradient norm {}", grad.norm()),
            });
        }
        adam_step(&mut q.params, &grad, adam)?;
        trace.push(loss);
    }
    Ok(trace)
}

/// `xi = f*'(r + gamma V(s') - Q(s, a))` per transition, unnormalized.
pub fn importance_weights<P: Policy + ?Sized, R: Relevance + ?Sized>(
    q: &DualQ,
    policy: &P,
    relevance: &R,
    transitions: &[&Transition],
    divergence: FDivergence,
    samples: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    const CHUNK: usize = 512;
    let mut out = Vec::with_capacity(transitions.len());
    for chunk in transitions.chunks(CHUNK) {
        let rewards: Vec<f64> = chunk.iter().map(|t| relevance.relevance(t)).collect();
        // a single dummy start state keeps the batch well formed; its term is unused
        let init = vec![chunk[0].state.clone()];
        let batch = DualBatch::new(policy, chunk, &rewards, &init, samples, rng)?;
        let tape = forward_batch(&q.spec, &q.params, &stacked_rows(&batch))?;
        for e in advantages(tape.output(), &batch, q.gamma) {
            let w = divergence.conjugate_prime(e);
            if !w.is_finite() {
                return Err(Error::NumericalFault(format!("non-finite importance weight from advantage {e}")));
            }
            out.push(w);
        }
    }
    Ok(out)
}

/// Importance weights for every transition of a buffer, in buffer order.
pub fn buffer_importance_weights<P: Policy + ?Sized, R: Relevance + ?Sized>(
    q: &DualQ,
    policy: &P,
    relevance: &R,
    buffer: &ReplayBuffer,
    divergence: FDivergence,
    samples: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let all: Vec<&Transition> = buffer.iter().collect();
    if all.is_empty() {
        return Ok(Vec::new());
    }
    importance_weights(q, policy, relevance, &all, divergence, samples, rng)
}

/// The dual objective in exact expectation over a tabular replay occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDualProblem {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub initial: Vec<f64>,
    pub policy: TabularPolicy,
    /// Replay transition occupancy `q((s,a),s')`.
    pub replay: Vec<f64>,
    /// Relevance reward `r((s,a),s')`, only read where `replay > 0`.
    pub relevance: Vec<f64>,
    pub divergence: FDivergence,
}

impl TabularDualProblem {
    /// Uses the exact log-ratio `log(d_pi / q)` as the relevance reward.
    pub fn from_occupancies(
        mdp: &TabularMdp,
        policy: &TabularPolicy,
        replay: &TransitionOccupancyTable,
        divergence: FDivergence,
    ) -> Result<Self> {
        let target = transition_occupancy(&exact_occupancy(mdp, policy)?, mdp);
        let relevance = target
            .d
            .iter()
            .zip(&replay.d)
            .map(|(p, q)| if *q > 0.0 { (p.max(1e-300) / q).ln() } else { 0.0 })
            .collect();
        Ok(Self {
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            gamma: mdp.gamma,
            initial: mdp.initial.clone(),
            policy: policy.clone(),
            replay: replay.d.clone(),
            relevance,
            divergence,
        })
    }

    fn value(&self, q: &[f64], s: usize) -> f64 {
        self.policy
            .row(s)
            .iter()
            .zip(&q[s * self.n_actions..(s + 1) * self.n_actions])
            .map(|(p, v)| p * v)
            .sum()
    }

    /// Advantage `e((s,a),s')` for every atom.
    pub fn advantages(&self, q: &[f64]) -> Vec<f64> {
        let (ns, na) = (self.n_states, self.n_actions);
        let values: Vec<f64> = (0..ns).map(|s| self.value(q, s)).collect();
        let mut e = Vec::with_capacity(ns * na * ns);
        for s in 0..ns {
            for a in 0..na {
                for sp in 0..ns {
                    let k = (s * na + a) * ns + sp;
                    e.push(self.relevance[k] + self.gamma * values[sp] - q[s * na + a]);
                }
            }
        }
        e
    }

    pub fn loss(&self, q: &[f64]) -> f64 {
        let init: f64 = (0..self.n_states).map(|s| self.initial[s] * self.value(q, s)).sum();
        let conj: f64 = self
            .advantages(q)
            .iter()
            .zip(&self.replay)
            .filter(|(_, w)| **w > 0.0)
            .map(|(e, w)| w * self.divergence.conjugate(*e))
            .sum();
        (1.0 - self.gamma) * init + conj
    }

    pub fn gradient(&self, q: &[f64]) -> Vec<f64> {
        let (ns, na, g) = (self.n_states, self.n_actions, self.gamma);
        let mut grad = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                grad[s * na + a] = (1.0 - g) * self.initial[s] * self.policy.p(s, a);
            }
        }
        for (k, e) in self.advantages(q).iter().enumerate() {
            let w = self.replay[k];
            if w <= 0.0 {
                continue;
            }
            let sp = k % ns;
            let pair = k / ns;
            let slope = w * self.divergence.conjugate_prime(*e);
            grad[pair] -= slope;
            for ap in 0..na {
                grad[sp * na + ap] += g * self.policy.p(sp, ap) * slope;
            }
        }
        grad
    }

    /// Per-atom `f*'(e)`; zero off the replay support.
    pub fn weights(&self, q: &[f64]) -> Vec<f64> {
        self.advantages(q)
            .iter()
            .zip(&self.replay)
            .map(|(e, w)| if *w > 0.0 { self.divergence.conjugate_prime(*e) } else { 0.0 })
            .collect()
    }

    /// `q * xi` normalized to a distribution.
    pub fn weighted_occupancy(&self, q: &[f64]) -> Result<Vec<f64>> {
        let raw: Vec<f64> = self.weights(q).iter().zip(&self.replay).map(|(x, w)| x * w).collect();
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateDistribution("dual weights vanish on the replay support"));
        }
        Ok(raw.into_iter().map(|v| v / total).collect())
    }
}

/// Table-valued dual Q trained by full-batch gradient descent.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDual {
    pub q: Vec<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl TabularDual {
    pub fn fit(problem: &TabularDualProblem, max_iter: usize) -> Self {
        let start = vec![0.0; problem.n_states * problem.n_actions];
        let q = accelerated_ascent(
            &start,
            |q| -problem.loss(q),
            |q| problem.gradient(q).into_iter().map(|g| -g).collect(),
            |_| {},
            max_iter,
        );
        let gradient_norm = problem.gradient(&q).iter().fold(0.0f64, |m, g| m.max(g.abs()));
        Self {
            q,
            iterations: max_iter,
            gradient_norm,
        }
    }
}

/// Total variation distance between two distributions on the same atoms.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
