//! Conditional next-state density models and the weighting schemes used to
//! fit them.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::approximator::{adam_step, backward, forward_batch, Activation, AdamState, MlpSpec, ParamVector};
use crate::error::{Error, Result};
use crate::mdp::{Policy, ReplayBuffer, Transition};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const DEFAULT_PMAC_DECAY: f64 = 0.996;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian log-density.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(std)
        .map(|((x, m), s)| {
            let z = (x - m) / s;
            -0.5 * z * z - s.ln() - 0.5 * LN_2PI
        })
        .sum()
}

pub trait DynamicsModel {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Mean of `T(s' | s, a)`.
    fn predict_mean(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>>;
    /// Per-dimension standard deviation.
    fn noise_std(&self) -> Vec<f64>;

    /// Means for many `(state, action)` pairs.
    fn predict_mean_batch(&self, states: &[&[f64]], actions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        states.iter().zip(actions).map(|(s, a)| self.predict_mean(s, a)).collect()
    }

    fn sample_next(&self, state: &[f64], action: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let mean = self.predict_mean(state, action)?;
        Ok(mean
            .iter()
            .zip(self.noise_std())
            .map(|(m, s)| {
                let eps: f64 = StandardNormal.sample(rng);
                m + s * eps
            })
            .collect())
    }
}

fn check_transition_dims(model: &dyn DynamicsModel, t: &Transition) -> Result<()> {
    if t.state.len() != model.state_dim() || t.next_state.len() != model.state_dim() {
        return Err(Error::dims("model state", model.state_dim(), t.state.len()));
    }
    if t.action.len() != model.action_dim() {
        return Err(Error::dims("model action", model.action_dim(), t.action.len()));
    }
    Ok(())
}

/// `log T(s' | s, a)` under the model.
pub fn model_log_likelihood(model: &dyn DynamicsModel, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<f64> {
    if s.len() != model.state_dim() || s_next.len() != model.state_dim() {
        return Err(Error::dims("model state", model.state_dim(), s.len()));
    }
    if a.len() != model.action_dim() {
        return Err(Error::dims("model action", model.action_dim(), a.len()));
    }
    let mean = model.predict_mean(s, a)?;
    Ok(gaussian_log_density(s_next, &mean, &model.noise_std()))
}

/// Mean negative log-likelihood over a set of transitions.
pub fn mean_nll<'a, I>(model: &dyn DynamicsModel, transitions: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a Transition>,
{
    let (mut total, mut n) = (0.0, 0usize);
    for t in transitions {
        total -= model_log_likelihood(model, &t.state, &t.action, &t.next_state)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyBuffer("no transitions to score"));
    }
    Ok(total / n as f64)
}

/// Mean absolute error of the predicted mean, per coordinate.
pub fn mean_prediction_error<'a, I>(model: &dyn DynamicsModel, transitions: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a Transition>,
{
    let (mut total, mut n) = (0.0, 0usize);
    for t in transitions {
        let m = model.predict_mean(&t.state, &t.action)?;
        total += m.iter().zip(&t.next_state).map(|(a, b)| (a - b).abs()).sum::<f64>() / m.len() as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyBuffer("no transitions to score"));
    }
    Ok(total / n as f64)
}

/// `s' ~ N(A s + B a + c, diag(noise_std^2))`. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianModel {
    pub state_dim: usize,
    pub action_dim: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub noise_std: Vec<f64>,
}

impl LinearGaussianModel {
    pub fn identity(state_dim: usize, action_dim: usize, noise: f64) -> Self {
        let mut a = vec![0.0; state_dim * state_dim];
        for i in 0..state_dim {
            a[i * state_dim + i] = 1.0;
        }
        Self {
            state_dim,
            action_dim,
            a,
            b: vec![0.0; state_dim * action_dim],
            c: vec![0.0; state_dim],
            noise_std: vec![noise; state_dim],
        }
    }

    pub fn a_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.state_dim, self.state_dim, &self.a)
    }

    pub fn b_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.state_dim, self.action_dim, &self.b)
    }
}

impl DynamicsModel for LinearGaussianModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn predict_mean(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim {
            return Err(Error::dims("model state", self.state_dim, state.len()));
        }
        if action.len() != self.action_dim {
            return Err(Error::dims("model action", self.action_dim, action.len()));
        }
        Ok((0..self.state_dim)
            .map(|i| {
                let ra = &self.a[i * self.state_dim..(i + 1) * self.state_dim];
                let rb = &self.b[i * self.action_dim..(i + 1) * self.action_dim];
                self.c[i]
                    + ra.iter().zip(state).map(|(x, y)| x * y).sum::<f64>()
                    + rb.iter().zip(action).map(|(x, y)| x * y).sum::<f64>()
            })
            .collect())
    }

    fn noise_std(&self) -> Vec<f64> {
        self.noise_std.clone()
    }
}

pub const LINEAR_RIDGE: f64 = 1e-6;
pub const NOISE_STD_FLOOR: f64 = 1e-3;

/// Weighted least squares for `[A B c]` on features `[s, a, 1]` with a small
/// ridge term. Weights are rescaled so that the positive ones average 1.
pub fn fit_linear_gaussian_closed_form(transitions: &[&Transition], weights: &[f64]) -> Result<LinearGaussianModel> {
    if transitions.is_empty() {
        return Err(Error::EmptyBuffer("linear fit needs transitions"));
    }
    if weights.len() != transitions.len() {
        return Err(Error::dims("regression weights", transitions.len(), weights.len()));
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidArgument("regression weights must be finite and nonnegative".into()));
    }
    let n_dim = transitions[0].state.len();
    let m_dim = transitions[0].action.len();
    let p = n_dim + m_dim + 1;
    let positive = weights.iter().filter(|w| **w > 0.0).count();
    if positive == 0 {
        return Err(Error::DegenerateDistribution("all regression weights are zero"));
    }
    if positive < p {
        return Err(Error::RankDeficient(format!(
            "{positive} weighted transitions cannot determine {p} coefficients per dimension"
        )));
    }
    let scale = positive as f64 / weights.iter().sum::<f64>();

    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DMatrix::<f64>::zeros(p, n_dim);
    let mut feat = vec![0.0; p];
    for (t, &w) in transitions.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        if t.state.len() != n_dim || t.next_state.len() != n_dim || t.action.len() != m_dim {
            return Err(Error::dims("transition", n_dim, t.state.len()));
        }
        let w = w * scale;
        feat[..n_dim].copy_from_slice(&t.state);
        feat[n_dim..n_dim + m_dim].copy_from_slice(&t.action);
        feat[p - 1] = 1.0;
        for i in 0..p {
            let wi = w * feat[i];
            for j in 0..p {
                xtx[(i, j)] += wi * feat[j];
            }
            for k in 0..n_dim {
                xty[(i, k)] += wi * t.next_state[k];
            }
        }
    }
    for i in 0..p {
        xtx[(i, i)] += LINEAR_RIDGE;
    }
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("weighted normal equations are not positive definite".into()))?;
    let theta = chol.solve(&xty);
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::RankDeficient("non-finite regression coefficients".into()));
    }

    let mut model = LinearGaussianModel {
        state_dim: n_dim,
        action_dim: m_dim,
        a: vec![0.0; n_dim * n_dim],
        b: vec![0.0; n_dim * m_dim],
        c: vec![0.0; n_dim],
        noise_std: vec![1.0; n_dim],
    };
    for k in 0..n_dim {
        for j in 0..n_dim {
            model.a[k * n_dim + j] = theta[(j, k)];
        }
        for j in 0..m_dim {
            model.b[k * m_dim + j] = theta[(n_dim + j, k)];
        }
        model.c[k] = theta[(p - 1, k)];
    }
    let mut sq = vec![0.0; n_dim];
    let mut total_w = 0.0;
    for (t, &w) in transitions.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let w = w * scale;
        let m = model.predict_mean(&t.state, &t.action)?;
        for k in 0..n_dim {
            sq[k] += w * (t.next_state[k] - m[k]).powi(2);
        }
        total_w += w;
    }
    model.noise_std = sq.iter().map(|v| (v / total_w).sqrt().max(NOISE_STD_FLOOR)).collect();
    Ok(model)
}

/// Least-squares solve shared with callers that need raw coefficients.
pub fn solve_ridge(x: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    let mut xtx = x.transpose() * x;
    for i in 0..xtx.nrows() {
        xtx[(i, i)] += ridge;
    }
    xtx.cholesky()
        .map(|c| c.solve(&(x.transpose() * y)))
        .ok_or_else(|| Error::RankDeficient("normal equations are not positive definite".into()))
}

/// Diagonal Gaussian whose mean is `s + net(s, a)` (delta prediction) or
/// `net(s, a)`. `params` holds the network parameters followed by one
/// log-std per state dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMlpModel {
    pub spec: MlpSpec,
    pub params: ParamVector,
    pub state_dim: usize,
    pub action_dim: usize,
    pub predicts_delta: bool,
}

pub const DEFAULT_INITIAL_LOG_STD: f64 = -2.0;

impl GaussianMlpModel {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut dyn RngCore) -> Result<Self> {
        let spec = MlpSpec::new(
            state_dim + action_dim,
            hidden.to_vec(),
            state_dim,
            Activation::Sigmoid,
            Activation::Identity,
        )?;
        let mut params = spec.init_params(rng);
        params.0.extend(std::iter::repeat_n(DEFAULT_INITIAL_LOG_STD, state_dim));
        Ok(Self {
            spec,
            params,
            state_dim,
            action_dim,
            predicts_delta: true,
        })
    }

    fn net_len(&self) -> usize {
        self.spec.param_count()
    }

    pub fn log_std(&self) -> Vec<f64> {
        self.params[self.net_len()..]
            .iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect()
    }

    /// Weighted negative log-likelihood `-(1/n) sum_i w_i log T(s'_i | s_i, a_i)`
    /// at `params`, with its gradient. Log-stds outside the clamp range get no
    /// gradient.
    pub fn nll_and_gradient(&self, params: &[f64], batch: &[&Transition], weights: &[f64]) -> Result<(f64, ParamVector)> {
        if params.len() != self.params.len() {
            return Err(Error::dims("model parameters", self.params.len(), params.len()));
        }
        if weights.len() != batch.len() {
            return Err(Error::dims("batch weights", batch.len(), weights.len()));
        }
        if batch.is_empty() {
            return Err(Error::EmptyBuffer("empty model batch"));
        }
        let (net, raw_ls) = params.split_at(self.net_len());
        let n = batch.len();
        let d = self.state_dim;
        let mut x = Vec::with_capacity(n * self.spec.input_dim);
        for t in batch {
            check_transition_dims(self, t)?;
            x.extend_from_slice(&t.state);
            x.extend_from_slice(&t.action);
        }
        let tape = forward_batch(&self.spec, net, &x)?;
        let out = tape.output();
        let ls: Vec<f64> = raw_ls.iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        let inv_var: Vec<f64> = ls.iter().map(|l| (-2.0 * l).exp()).collect();
        let mut loss = 0.0;
        let mut upstream = vec![0.0; n * d];
        let mut g_ls = vec![0.0; d];
        for (i, t) in batch.iter().enumerate() {
            let w = weights[i] / n as f64;
            for k in 0..d {
                let target = if self.predicts_delta {
                    t.next_state[k] - t.state[k]
                } else {
                    t.next_state[k]
                };
                let r = target - out[i * d + k];
                let z2 = r * r * inv_var[k];
                loss += w * (0.5 * z2 + ls[k] + 0.5 * LN_2PI);
                upstream[i * d + k] = -w * r * inv_var[k];
                g_ls[k] += w * (1.0 - z2);
            }
        }
        let (g_net, _) = backward(&self.spec, net, &tape, &upstream)?;
        let mut grad = g_net.0;
        for (k, g) in g_ls.into_iter().enumerate() {
            let inside = raw_ls[k] > LOG_STD_MIN && raw_ls[k] < LOG_STD_MAX;
            grad.push(if inside { g } else { 0.0 });
        }
        Ok((loss, ParamVector(grad)))
    }
}

impl DynamicsModel for GaussianMlpModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn predict_mean(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim {
            return Err(Error::dims("model state", self.state_dim, state.len()));
        }
        if action.len() != self.action_dim {
            return Err(Error::dims("model action", self.action_dim, action.len()));
        }
        let mut x = state.to_vec();
        x.extend_from_slice(action);
        let tape = forward_batch(&self.spec, &self.params[..self.net_len()], &x)?;
        let out = tape.output();
        Ok(if self.predicts_delta {
            out.iter().zip(state).map(|(d, s)| s + d).collect()
        } else {
            out.to_vec()
        })
    }

    fn noise_std(&self) -> Vec<f64> {
        self.log_std().into_iter().map(f64::exp).collect()
    }

    fn predict_mean_batch(&self, states: &[&[f64]], actions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if states.len() != actions.len() {
            return Err(Error::dims("action rows", states.len(), actions.len()));
        }
        let mut x = Vec::with_capacity(states.len() * (self.state_dim + self.action_dim));
        for (s, a) in states.iter().zip(actions) {
            if s.len() != self.state_dim {
                return Err(Error::dims("model state", self.state_dim, s.len()));
            }
            if a.len() != self.action_dim {
                return Err(Error::dims("model action", self.action_dim, a.len()));
            }
            x.extend_from_slice(s);
            x.extend_from_slice(a);
        }
        let tape = forward_batch(&self.spec, &self.params[..self.net_len()], &x)?;
        let sd = self.state_dim;
        Ok(tape
            .output()
            .chunks(sd)
            .zip(states)
            .map(|(out, s)| {
                if self.predicts_delta {
                    out.iter().zip(s.iter()).map(|(d, v)| v + d).collect()
                } else {
                    out.to_vec()
                }
            })
            .collect())
    }
}

/// Batch weights rescaled to mean 1. All-ones input is returned unchanged.
pub fn normalize_batch_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidArgument("batch weights must be finite and nonnegative".into()));
    }
    let mean = weights.iter().sum::<f64>() / weights.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::DegenerateDistribution("all batch weights are zero"));
    }
    Ok(weights.iter().map(|w| w / mean).collect())
}

/// One Adam step on the weighted NLL. Returns the loss before the step.
pub fn weighted_mle_step(
    model: &mut GaussianMlpModel,
    batch: &[&Transition],
    weights: &[f64],
    adam: &mut AdamState,
) -> Result<f64> {
    let w = normalize_batch_weights(weights)?;
    let (loss, grad) = model.nll_and_gradient(&model.params, batch, &w)?;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            phase: "model",
            detail: format!("weighted NLL {loss}"),
        });
    }
    adam_step(&mut model.params, &grad, adam)?;
    Ok(loss)
}

/// Plain maximum-likelihood step.
pub fn mle_step(model: &mut GaussianMlpModel, batch: &[&Transition], adam: &mut AdamState) -> Result<f64> {
    weighted_mle_step(model, batch, &vec![1.0; batch.len()], adam)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightScheme {
    Uniform,
    #[default]
    Tom,
    Pmac { decay_rate: f64 },
}

impl WeightScheme {
    pub fn pmac() -> Self {
        WeightScheme::Pmac {
            decay_rate: DEFAULT_PMAC_DECAY,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightScheme::Uniform => "uniform",
            WeightScheme::Tom => "tom",
            WeightScheme::Pmac { .. } => "pmac",
        }
    }
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(WeightScheme::Uniform),
            "tom" => Ok(WeightScheme::Tom),
            "pmac" => Ok(WeightScheme::pmac()),
            other => Err(Error::InvalidArgument(format!("unknown weighting scheme {other:?}"))),
        }
    }
}

/// Masses of `n_rounds` collection rounds, oldest first. Each new round takes
/// `1 - decay` and scales every older mass by `decay`.
pub fn pmac_round_masses(n_rounds: usize, decay: f64) -> Vec<f64> {
    if n_rounds == 0 {
        return Vec::new();
    }
    let mut masses = vec![1.0];
    for _ in 1..n_rounds {
        for m in masses.iter_mut() {
            *m *= decay;
        }
        masses.push(1.0 - decay);
    }
    masses
}

/// Per-transition weights for the buffer in insertion order.
pub fn compute_weights(scheme: WeightScheme, buffer: &ReplayBuffer, tom_weights: Option<&[f64]>) -> Result<Vec<f64>> {
    match scheme {
        WeightScheme::Uniform => Ok(vec![1.0; buffer.len()]),
        WeightScheme::Tom => {
            let w = tom_weights.ok_or_else(|| Error::InvalidArgument("tom scheme requires importance weights".into()))?;
            if w.len() != buffer.len() {
                return Err(Error::dims("importance weights", buffer.len(), w.len()));
            }
            Ok(w.to_vec())
        }
        WeightScheme::Pmac { decay_rate } => {
            if !(decay_rate > 0.0 && decay_rate < 1.0) {
                return Err(Error::InvalidArgument(format!("decay rate {decay_rate} outside (0, 1)")));
            }
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for r in buffer.rounds() {
                *counts.entry(*r).or_default() += 1;
            }
            let masses = pmac_round_masses(counts.len(), decay_rate);
            let per_round: BTreeMap<u32, f64> = counts
                .iter()
                .zip(&masses)
                .map(|((round, count), mass)| (*round, mass / *count as f64))
                .collect();
            Ok(buffer.rounds().iter().map(|r| per_round[r]).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRollout {
    pub transitions: Vec<Transition>,
    /// Set when a non-finite state was sampled and the rollout stopped early.
    pub truncated: bool,
}

/// `k`-step rollouts from each start state, actions from `policy` and rewards
/// from the known reward function. All starts advance together; a rollout
/// whose sampled state is non-finite is dropped from then on.
pub fn model_rollout<P, F>(
    model: &dyn DynamicsModel,
    policy: &P,
    start_states: &[Vec<f64>],
    k: usize,
    reward: F,
    rng: &mut dyn RngCore,
) -> Result<ModelRollout>
where
    P: Policy + ?Sized,
    F: Fn(&[f64], &[f64]) -> f64,
{
    let mut transitions = Vec::with_capacity(start_states.len() * k);
    let mut truncated = false;
    let mut states: Vec<Vec<f64>> = start_states.to_vec();
    let std = model.noise_std();
    for _ in 0..k {
        if states.is_empty() {
            break;
        }
        let views: Vec<&[f64]> = states.iter().map(|s| s.as_slice()).collect();
        let actions = policy.sample_actions(&views, rng);
        let means = model.predict_mean_batch(&views, &actions)?;
        let mut next_states = Vec::with_capacity(states.len());
        for ((s, a), mean) in states.iter().zip(actions).zip(means) {
            let next: Vec<f64> = mean
                .iter()
                .zip(&std)
                .map(|(m, sd)| {
                    let eps: f64 = StandardNormal.sample(rng);
                    m + sd * eps
                })
                .collect();
            if next.iter().any(|v| !v.is_finite()) {
                truncated = true;
                continue;
            }
            let r = reward(s, &a);
            transitions.push(Transition::new(s.clone(), a, next.clone(), r, false));
            next_states.push(next);
        }
        states = next_states;
    }
    Ok(ModelRollout { transitions, truncated })
}
