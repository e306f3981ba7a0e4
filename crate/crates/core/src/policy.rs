//! Entropy-regularized actor-critic with a tanh-squashed Gaussian actor and
//! twin critics.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::approximator::{adam_step, backward, forward_batch, softplus, Activation, AdamState, MlpSpec, ParamVector};
use crate::error::{Error, Result};
use crate::mdp::{Policy, Transition};

const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 2.0;
const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Keeps squashed actions strictly inside the bounds once tanh saturates.
const TANH_LIMIT: f64 = 1.0 - 1e-9;

/// `log(1 - tanh(u)^2)` without cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticPolicy {
    pub spec: MlpSpec,
    pub params: ParamVector,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
}

/// A reparameterized draw: `a = center + half * tanh(mean + std * eps)`.
#[derive(Debug, Clone)]
struct Draw {
    action: Vec<f64>,
    log_prob: f64,
    tanh: Vec<f64>,
    std: Vec<f64>,
}

impl StochasticPolicy {
    pub fn new(
        state_dim: usize,
        action_low: Vec<f64>,
        action_high: Vec<f64>,
        hidden: &[usize],
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if action_low.len() != action_high.len() || action_low.is_empty() {
            return Err(Error::dims("action bounds", action_low.len(), action_high.len()));
        }
        let spec = MlpSpec::new(
            state_dim,
            hidden.to_vec(),
            2 * action_low.len(),
            Activation::Relu,
            Activation::Identity,
        )?;
        let params = spec.init_params(rng);
        Ok(Self {
            spec,
            params,
            action_low,
            action_high,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.action_low.len()
    }

    fn center(&self, k: usize) -> f64 {
        0.5 * (self.action_low[k] + self.action_high[k])
    }

    fn half(&self, k: usize) -> f64 {
        0.5 * (self.action_high[k] - self.action_low[k])
    }

    /// Raw network heads for a batch of states: `(mean, raw_log_std)` rows.
    fn heads(&self, params: &[f64], states: &[f64]) -> Result<crate::approximator::Tape> {
        forward_batch(&self.spec, params, states)
    }

    fn split(&self, out: &[f64], i: usize) -> (Vec<f64>, Vec<f64>) {
        let m = self.action_dim();
        let row = &out[i * 2 * m..(i + 1) * 2 * m];
        (row[..m].to_vec(), row[m..].iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect())
    }

    fn draw(&self, mean: &[f64], log_std: &[f64], eps: &[f64]) -> Draw {
        let m = self.action_dim();
        let mut action = Vec::with_capacity(m);
        let mut tanh = Vec::with_capacity(m);
        let mut std = Vec::with_capacity(m);
        let mut log_prob = 0.0;
        for k in 0..m {
            let s = log_std[k].exp();
            let u = mean[k] + s * eps[k];
            let t = u.tanh();
            action.push(self.center(k) + self.half(k) * t.clamp(-TANH_LIMIT, TANH_LIMIT));
            log_prob += -0.5 * eps[k] * eps[k] - log_std[k] - 0.5 * LN_2PI - self.half(k).ln() - log_one_minus_tanh_sq(u);
            tanh.push(t);
            std.push(s);
        }
        Draw {
            action,
            log_prob,
            tanh,
            std,
        }
    }

    fn noise(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        (0..self.action_dim()).map(|_| StandardNormal.sample(rng)).collect()
    }

    /// Deterministic: squashed mean. Stochastic: squashed Gaussian sample.
    pub fn act(&self, state: &[f64], deterministic: bool, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        if deterministic {
            return self.deterministic_action(state);
        }
        let tape = self.heads(&self.params, state)?;
        let (mean, log_std) = self.split(tape.output(), 0);
        let eps = self.noise(rng);
        Ok(self.draw(&mean, &log_std, &eps).action)
    }

    pub fn deterministic_action(&self, state: &[f64]) -> Result<Vec<f64>> {
        let tape = self.heads(&self.params, state)?;
        let (mean, _) = self.split(tape.output(), 0);
        Ok((0..self.action_dim())
            .map(|k| self.center(k) + self.half(k) * mean[k].tanh().clamp(-TANH_LIMIT, TANH_LIMIT))
            .collect())
    }

    /// Sample with its log-density.
    pub fn sample_with_log_prob(&self, state: &[f64], rng: &mut dyn RngCore) -> Result<(Vec<f64>, f64)> {
        let tape = self.heads(&self.params, state)?;
        let (mean, log_std) = self.split(tape.output(), 0);
        let eps = self.noise(rng);
        let d = self.draw(&mean, &log_std, &eps);
        Ok((d.action, d.log_prob))
    }

    /// Batched [`Self::sample_with_log_prob`]; noise is drawn row by row.
    pub fn sample_batch_with_log_prob(
        &self,
        states: &[&[f64]],
        rng: &mut dyn RngCore,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let x: Vec<f64> = states.iter().flat_map(|s| s.iter().copied()).collect();
        let tape = self.heads(&self.params, &x)?;
        let mut actions = Vec::with_capacity(states.len());
        let mut log_probs = Vec::with_capacity(states.len());
        for i in 0..states.len() {
            let (mean, log_std) = self.split(tape.output(), i);
            let eps = self.noise(rng);
            let d = self.draw(&mean, &log_std, &eps);
            actions.push(d.action);
            log_probs.push(d.log_prob);
        }
        Ok((actions, log_probs))
    }

    /// Log-density of `action`, including the tanh change of variables.
    pub fn log_prob(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        if action.len() != self.action_dim() {
            return Err(Error::dims("action", self.action_dim(), action.len()));
        }
        let tape = self.heads(&self.params, state)?;
        let (mean, log_std) = self.split(tape.output(), 0);
        let mut total = 0.0;
        for k in 0..self.action_dim() {
            let t = (action[k] - self.center(k)) / self.half(k);
            if !(t > -1.0 && t < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "action {} lies on or outside the bounds [{}, {}]",
                    action[k], self.action_low[k], self.action_high[k]
                )));
            }
            let u = t.atanh();
            let z = (u - mean[k]) / log_std[k].exp();
            total += -0.5 * z * z - log_std[k] - 0.5 * LN_2PI - self.half(k).ln() - log_one_minus_tanh_sq(u);
        }
        Ok(total)
    }

    /// Per-dimension standard deviation of the pre-squash Gaussian at `state`.
    pub fn std_at(&self, state: &[f64]) -> Result<Vec<f64>> {
        let tape = self.heads(&self.params, state)?;
        Ok(self.split(tape.output(), 0).1.into_iter().map(f64::exp).collect())
    }
}

impl Policy for StochasticPolicy {
    fn sample_action(&self, state: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        self.act(state, false, rng).unwrap_or_else(|_| self.mean_action(state))
    }

    fn mean_action(&self, state: &[f64]) -> Vec<f64> {
        self.deterministic_action(state)
            .unwrap_or_else(|_| (0..self.action_dim()).map(|k| self.center(k)).collect())
    }

    fn sample_actions(&self, states: &[&[f64]], rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
        match self.sample_batch_with_log_prob(states, rng) {
            Ok((actions, _)) => actions,
            Err(_) => states.iter().map(|s| self.mean_action(s)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub spec: MlpSpec,
    pub params: ParamVector,
    pub target: ParamVector,
}

impl Critic {
    fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut dyn RngCore) -> Result<Self> {
        let spec = MlpSpec::new(
            state_dim + action_dim,
            hidden.to_vec(),
            1,
            Activation::Relu,
            Activation::Identity,
        )?;
        let params = spec.init_params(rng);
        Ok(Self {
            target: params.clone(),
            spec,
            params,
        })
    }
}

fn stack_pairs(states: &[&[f64]], actions: &[Vec<f64>]) -> Vec<f64> {
    let mut x = Vec::new();
    for (s, a) in states.iter().zip(actions) {
        x.extend_from_slice(s);
        x.extend_from_slice(a);
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticPair {
    pub critics: [Critic; 2],
    pub polyak: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl CriticPair {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        gamma: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        Ok(Self {
            critics: [
                Critic::new(state_dim, action_dim, hidden, rng)?,
                Critic::new(state_dim, action_dim, hidden, rng)?,
            ],
            polyak: 0.995,
            alpha: 0.2,
            gamma,
        })
    }

    pub fn q_values(&self, which: usize, states: &[&[f64]], actions: &[Vec<f64>]) -> Result<Vec<f64>> {
        let c = &self.critics[which];
        Ok(forward_batch(&c.spec, &c.params, &stack_pairs(states, actions))?.output().to_vec())
    }

    fn target_values(&self, which: usize, x: &[f64]) -> Result<Vec<f64>> {
        let c = &self.critics[which];
        Ok(forward_batch(&c.spec, &c.target, x)?.output().to_vec())
    }

    /// `target <- polyak * target + (1 - polyak) * online`
    pub fn soft_update(&mut self) {
        let p = self.polyak;
        for c in &mut self.critics {
            for (t, o) in c.target.0.iter_mut().zip(&c.params.0) {
                *t = p * *t + (1.0 - p) * o;
            }
        }
    }
}

/// Mean squared error `mean (Q(s,a) - y)^2` for one critic and its gradient.
pub fn critic_loss_and_gradient(
    critic: &Critic,
    params: &[f64],
    batch: &[&Transition],
    targets: &[f64],
) -> Result<(f64, ParamVector)> {
    let states: Vec<&[f64]> = batch.iter().map(|t| t.state.as_slice()).collect();
    let actions: Vec<Vec<f64>> = batch.iter().map(|t| t.action.clone()).collect();
    let tape = forward_batch(&critic.spec, params, &stack_pairs(&states, &actions))?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let upstream: Vec<f64> = tape
        .output()
        .iter()
        .zip(targets)
        .map(|(q, y)| {
            loss += (q - y) * (q - y);
            2.0 * (q - y) / n
        })
        .collect();
    let (grad, _) = backward(&critic.spec, params, &tape, &upstream)?;
    Ok((loss / n, grad))
}

/// Soft Bellman targets `r + gamma (min_i Q_targ_i(s', a') - alpha log pi(a'|s'))`.
pub fn soft_targets(
    policy: &StochasticPolicy,
    critics: &CriticPair,
    batch: &[&Transition],
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let next: Vec<&[f64]> = batch.iter().map(|t| t.next_state.as_slice()).collect();
    let (actions, log_probs) = policy.sample_batch_with_log_prob(&next, rng)?;
    let x = stack_pairs(&next, &actions);
    let q1 = critics.target_values(0, &x)?;
    let q2 = critics.target_values(1, &x)?;
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, t)| t.reward + critics.gamma * (q1[i].min(q2[i]) - critics.alpha * log_probs[i]))
        .collect())
}

/// Reparameterized actor objective `mean(alpha log pi(a|s) - min_i Q_i(s, a))`
/// with fixed noise `eps` (row-major `n x action_dim`), and its gradient.
pub fn actor_loss_and_gradient(
    policy: &StochasticPolicy,
    params: &[f64],
    critics: &CriticPair,
    states: &[&[f64]],
    eps: &[f64],
) -> Result<(f64, ParamVector)> {
    let m = policy.action_dim();
    let n = states.len();
    if eps.len() != n * m {
        return Err(Error::dims("actor noise", n * m, eps.len()));
    }
    let x: Vec<f64> = states.iter().flat_map(|s| s.iter().copied()).collect();
    let tape = policy.heads(params, &x)?;
    let out = tape.output().to_vec();
    let draws: Vec<Draw> = (0..n)
        .map(|i| {
            let (mean, ls) = policy.split(&out, i);
            policy.draw(&mean, &ls, &eps[i * m..(i + 1) * m])
        })
        .collect();
    let actions: Vec<Vec<f64>> = draws.iter().map(|d| d.action.clone()).collect();
    let q_in = stack_pairs(states, &actions);

    // dQ/da from whichever critic is smaller per sample
    let tapes = [
        forward_batch(&critics.critics[0].spec, &critics.critics[0].params, &q_in)?,
        forward_batch(&critics.critics[1].spec, &critics.critics[1].params, &q_in)?,
    ];
    let pick: Vec<usize> = (0..n)
        .map(|i| usize::from(tapes[1].output()[i] < tapes[0].output()[i]))
        .collect();
    let mut da = vec![0.0; n * m];
    for (which, tape) in tapes.iter().enumerate() {
        let up: Vec<f64> = pick.iter().map(|&p| if p == which { 1.0 } else { 0.0 }).collect();
        let c = &critics.critics[which];
        let (_, gin) = backward(&c.spec, &c.params, tape, &up)?;
        let sd = gin.len() / n - m;
        for i in 0..n {
            if pick[i] == which {
                da[i * m..(i + 1) * m].copy_from_slice(&gin[i * (sd + m) + sd..(i + 1) * (sd + m)]);
            }
        }
    }

    let alpha = critics.alpha;
    let mut loss = 0.0;
    let mut upstream = vec![0.0; n * 2 * m];
    for (i, d) in draws.iter().enumerate() {
        let q = tapes[pick[i]].output()[i];
        loss += alpha * d.log_prob - q;
        for k in 0..m {
            let t = d.tanh[k];
            let g_u = (alpha * 2.0 * t - da[i * m + k] * policy.half(k) * (1.0 - t * t)) / n as f64;
            upstream[i * 2 * m + k] = g_u;
            let raw = out[i * 2 * m + m + k];
            upstream[i * 2 * m + m + k] = if raw > LOG_STD_MIN && raw < LOG_STD_MAX {
                -alpha / n as f64 + g_u * d.std[k] * eps[i * m + k]
            } else {
                0.0
            };
        }
    }
    let (grad, _) = backward(&policy.spec, params, &tape, &upstream)?;
    Ok((loss / n as f64, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
}

/// Optimizer state for one actor-critic learner.
#[derive(Debug, Clone)]
pub struct SacOptimizers {
    pub actor: AdamState,
    pub critics: [AdamState; 2],
}

impl SacOptimizers {
    pub fn new(policy: &StochasticPolicy, critics: &CriticPair, learning_rate: f64) -> Self {
        Self {
            actor: AdamState::with_learning_rate(policy.params.len(), learning_rate),
            critics: [
                AdamState::with_learning_rate(critics.critics[0].params.len(), learning_rate),
                AdamState::with_learning_rate(critics.critics[1].params.len(), learning_rate),
            ],
        }
    }
}

/// One critic step on both critics, one actor step, then a target update.
pub fn policy_update(
    policy: &mut StochasticPolicy,
    critics: &mut CriticPair,
    batch: &[&Transition],
    opt: &mut SacOptimizers,
    rng: &mut dyn RngCore,
) -> Result<UpdateStats> {
    if batch.is_empty() {
        return Err(Error::EmptyBuffer("policy update needs a batch"));
    }
    let targets = soft_targets(policy, critics, batch, rng)?;
    let mut critic_loss = 0.0;
    for which in 0..2 {
        let c = &critics.critics[which];
        let (loss, grad) = critic_loss_and_gradient(c, &c.params, batch, &targets)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                phase: "critic",
                detail: format!("loss {loss}"),
            });
        }
        adam_step(&mut critics.critics[which].params, &grad, &mut opt.critics[which])?;
        critic_loss += 0.5 * loss;
    }
    let states: Vec<&[f64]> = batch.iter().map(|t| t.state.as_slice()).collect();
    let eps: Vec<f64> = (0..batch.len() * policy.action_dim())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let (actor_loss, grad) = actor_loss_and_gradient(policy, &policy.params, critics, &states, &eps)?;
    if !actor_loss.is_finite() {
        return Err(Error::Diverged {
            phase: "actor",
            detail: format!("loss {actor_loss}"),
        });
    }
    adam_step(&mut policy.params, &grad, &mut opt.actor)?;
    critics.soft_update();
    Ok(UpdateStats {
        critic_loss,
        actor_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn policy_1d(rng: &mut ChaCha8Rng) -> StochasticPolicy {
        StochasticPolicy::new(1, vec![-2.0], vec![2.0], &[8], rng).unwrap()
    }

    #[test]
    fn batched_sampling_matches_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = StochasticPolicy::new(2, vec![-1.0, 0.0], vec![1.0, 4.0], &[6], &mut rng).unwrap();
        let states: Vec<Vec<f64>> = (0..5).map(|i| vec![0.3 * i as f64, -0.1]).collect();
        let views: Vec<&[f64]> = states.iter().map(|s| s.as_slice()).collect();
        let (actions, lps) = p.sample_batch_with_log_prob(&views, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let mut row_rng = ChaCha8Rng::seed_from_u64(8);
        for (i, s) in states.iter().enumerate() {
            let (a, lp) = p.sample_with_log_prob(s, &mut row_rng).unwrap();
            assert!((lp - lps[i]).abs() < 1e-10);
            for (x, y) in a.iter().zip(&actions[i]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_actor_acts_at_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = StochasticPolicy::new(2, vec![-1.0, 0.0], vec![1.0, 4.0], &[4], &mut rng).unwrap();
        p.params = p.spec.zero_params();
        assert_eq!(p.act(&[0.3, 0.2], true, &mut rng).unwrap(), vec![0.0, 2.0]);
        assert_eq!(p.mean_action(&[0.3, 0.2]), p.mean_action(&[0.3, 0.2]));
    }

    #[test]
    fn samples_stay_inside_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = StochasticPolicy::new(1, vec![-1.0, 0.0], vec![1.0, 0.5], &[4], &mut rng).unwrap();
        // a wide policy
        let n = p.params.len();
        p.params.0[n - 1] = 2.0;
        p.params.0[n - 2] = 2.0;
        for _ in 0..10_000 {
            let a = p.act(&[0.5], false, &mut rng).unwrap();
            assert!(a[0] > -1.0 && a[0] < 1.0);
            assert!(a[1] > 0.0 && a[1] < 0.5);
        }
    }

    #[test]
    fn log_prob_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = policy_1d(&mut rng);
        let x: Vec<f64> = forward_batch(&p.spec, &p.params, &[0.4]).unwrap().output().to_vec();
        let (mu, ls) = (x[0], x[1].clamp(-5.0, 2.0));
        let sigma = ls.exp();
        for a in [-1.5, -0.2, 0.0, 0.7, 1.9] {
            let t: f64 = a / 2.0;
            let u = 0.5 * ((1.0 + t) / (1.0 - t)).ln();
            let gauss = (-(u - mu) * (u - mu) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
            let jac = 2.0 * (1.0 - t * t);
            let oracle = (gauss / jac).ln();
            assert!((p.log_prob(&[0.4], &[a]).unwrap() - oracle).abs() < 1e-10);
        }
        assert!(p.log_prob(&[0.4], &[2.0]).is_err());
        assert!(p.log_prob(&[0.4], &[-3.0]).is_err());
    }

    #[test]
    fn density_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = policy_1d(&mut rng);
        // importance sampling with a uniform proposal over (-2, 2)
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let a: f64 = rng.random_range(-2.0..2.0);
            if a.abs() < 2.0 {
                acc += p.log_prob(&[0.1], &[a]).unwrap().exp() * 4.0;
            }
        }
        assert!((acc / n as f64 - 1.0).abs() < 0.02, "{}", acc / n as f64);
    }

    #[test]
    fn density_peaks_at_squashed_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = policy_1d(&mut rng);
        let n = p.params.len();
        p.params.0[n - 1] = -1.5; // narrow
        let x = forward_batch(&p.spec, &p.params, &[0.0]).unwrap().output().to_vec();
        let mode = 2.0 * x[0].tanh();
        let away = 2.0 * (x[0] + 2.0 * x[1].clamp(-5.0, 2.0).exp()).tanh();
        assert!(p.log_prob(&[0.0], &[mode]).unwrap() > p.log_prob(&[0.0], &[away]).unwrap());
    }

    fn setup(seed: u64) -> (StochasticPolicy, CriticPair, Vec<Transition>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = StochasticPolicy::new(2, vec![-1.0], vec![1.0], &[6], &mut rng).unwrap();
        let c = CriticPair::new(2, 1, &[6], 0.9, &mut rng).unwrap();
        let ts = (0..6)
            .map(|_| {
                Transition::new(
                    vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                    vec![rng.random_range(-0.9..0.9)],
                    vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                    rng.random_range(0.0..1.0),
                    false,
                )
            })
            .collect();
        (p, c, ts, rng)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let (p, c, ts, mut rng) = setup(seed);
            let refs: Vec<&Transition> = ts.iter().collect();
            let y = soft_targets(&p, &c, &refs, &mut rng).unwrap();
            let critic = &c.critics[0];
            let (_, g) = critic_loss_and_gradient(critic, &critic.params, &refs, &y).unwrap();
            let err = finite_diff_check(
                |q| critic_loss_and_gradient(critic, q, &refs, &y).unwrap().0,
                &g,
                &critic.params,
                1e-6,
                &mut rng,
            );
            assert!(err < 1e-4, "critic seed {seed}: {err}");

            let states: Vec<&[f64]> = refs.iter().map(|t| t.state.as_slice()).collect();
            let eps: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
            let (_, g) = actor_loss_and_gradient(&p, &p.params, &c, &states, &eps).unwrap();
            let err = finite_diff_check(
                |q| actor_loss_and_gradient(&p, q, &c, &states, &eps).unwrap().0,
                &g,
                &p.params,
                1e-6,
                &mut rng,
            );
            assert!(err < 1e-4, "actor seed {seed}: {err}");
        }
    }

    #[test]
    fn zero_reward_drives_critic_to_zero() {
        let (mut p, mut c, _, mut rng) = setup(9);
        c.alpha = 0.0;
        // dense coverage so bootstrapped targets stay on the fitted region
        let ts: Vec<Transition> = (0..256)
            .map(|_| {
                let s = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                Transition::new(s.clone(), vec![rng.random_range(-1.0..1.0)], s, 0.0, false)
            })
            .collect();
        let refs: Vec<&Transition> = ts.iter().collect();
        let states: Vec<&[f64]> = refs.iter().map(|t| t.state.as_slice()).collect();
        let actions: Vec<Vec<f64>> = refs.iter().map(|t| t.action.clone()).collect();
        let max_q = |c: &CriticPair| {
            c.q_values(0, &states, &actions)
                .unwrap()
                .iter()
                .chain(c.q_values(1, &states, &actions).unwrap().iter())
                .fold(0.0f64, |m, v| m.max(v.abs()))
        };
        let before = max_q(&c);
        let mut opt = SacOptimizers::new(&p, &c, 1e-3);
        for _ in 0..500 {
            policy_update(&mut p, &mut c, &refs, &mut opt, &mut rng).unwrap();
        }
        assert!(max_q(&c) < before, "{} vs {before}", max_q(&c));
    }

    #[test]
    fn updates_are_reproducible() {
        let run = || {
            let (mut p, mut c, ts, mut rng) = setup(11);
            let refs: Vec<&Transition> = ts.iter().collect();
            let mut opt = SacOptimizers::new(&p, &c, 3e-4);
            for _ in 0..20 {
                policy_update(&mut p, &mut c, &refs, &mut opt, &mut rng).unwrap();
            }
            (p, c)
        };
        assert_eq!(run(), run());
    }

    fn bandit(alpha: f64, steps: usize, seed: u64) -> StochasticPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = StochasticPolicy::new(1, vec![-1.0], vec![1.0], &[16], &mut rng).unwrap();
        let mut c = CriticPair::new(1, 1, &[32], 0.0, &mut rng).unwrap();
        c.alpha = alpha;
        let mut opt = SacOptimizers::new(&p, &c, 3e-3);
        for _ in 0..steps {
            let batch: Vec<Transition> = (0..64)
                .map(|_| {
                    let a: f64 = rng.random_range(-1.0..1.0);
                    Transition::new(vec![0.0], vec![a], vec![0.0], -a * a, false)
                })
                .collect();
            let refs: Vec<&Transition> = batch.iter().collect();
            policy_update(&mut p, &mut c, &refs, &mut opt, &mut rng).unwrap();
        }
        p
    }

    #[test]
    fn bandit_finds_the_optimum() {
        let p = bandit(0.01, 2000, 12);
        let a = p.mean_action(&[0.0])[0];
        assert!(a.abs() < 0.1, "{a}");
    }

    #[test]
    fn larger_entropy_bonus_widens_the_policy() {
        let wide = bandit(10.0, 300, 13).std_at(&[0.0]).unwrap()[0];
        let narrow = bandit(0.01, 300, 13).std_at(&[0.0]).unwrap()[0];
        assert!(wide > narrow, "{wide} vs {narrow}");
    }
}
