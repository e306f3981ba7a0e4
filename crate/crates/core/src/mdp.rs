//! Environment and policy interfaces, transition records, FIFO buffers,
//! rollout collection and empirical-policy extraction.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_REPLAY_CAPACITY: usize = 1_000_000;
pub const DEFAULT_POLICY_BUFFER_CAPACITY: usize = 1000;
pub const BUFFER_CSV_VERSION: &str = "tom-buffer v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub episode_start: bool,
    pub insertion_index: u64,
}

impl Transition {
    pub fn new(
        state: Vec<f64>,
        action: Vec<f64>,
        next_state: Vec<f64>,
        reward: f64,
        episode_start: bool,
    ) -> Self {
        Self {
            state,
            action,
            next_state,
            reward,
            episode_start,
            insertion_index: 0,
        }
    }

    /// Tabular transition with indices stored as one-element vectors.
    pub fn tabular(s: usize, a: usize, s_next: usize, reward: f64, episode_start: bool) -> Self {
        Self::new(
            vec![s as f64],
            vec![a as f64],
            vec![s_next as f64],
            reward,
            episode_start,
        )
    }
}

/// Decode a tabular index stored as a one-element vector.
pub fn tabular_index(v: &[f64]) -> usize {
    v.first().copied().unwrap_or(0.0).round() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub gamma: f64,
    pub reward_range: (f64, f64),
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.action_low.len() != self.action_dim || self.action_high.len() != self.action_dim {
            return Err(Error::dims("action bounds", self.action_dim, self.action_low.len()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "discount must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if self
            .action_low
            .iter()
            .chain(&self.action_high)
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidArgument("action bounds must be finite".into()));
        }
        Ok(())
    }

    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Environments are value-like: the state is passed in and a new one returned.
pub trait Environment {
    fn spec(&self) -> &EnvSpec;
    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn step(&self, state: &[f64], action: &[f64], rng: &mut dyn RngCore) -> Step;
    /// Known task reward `R(s, a)`, also used to label synthetic model transitions.
    fn reward(&self, state: &[f64], action: &[f64]) -> f64;
    fn horizon(&self) -> usize;
}

pub trait Policy {
    fn sample_action(&self, state: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;
    fn mean_action(&self, state: &[f64]) -> Vec<f64>;

    fn act(&self, state: &[f64], deterministic: bool, rng: &mut dyn RngCore) -> Vec<f64> {
        if deterministic {
            self.mean_action(state)
        } else {
            self.sample_action(state, rng)
        }
    }

    /// One sample per state, drawn in order.
    fn sample_actions(&self, states: &[&[f64]], rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
        states.iter().map(|s| self.sample_action(s, rng)).collect()
    }
}

impl<P: Policy + ?Sized> Policy for &P {
    fn sample_action(&self, state: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        (**self).sample_action(state, rng)
    }
    fn mean_action(&self, state: &[f64]) -> Vec<f64> {
        (**self).mean_action(state)
    }
    fn sample_actions(&self, states: &[&[f64]], rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
        (**self).sample_actions(states, rng)
    }
}

/// Uniform over a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformRandomPolicy {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl UniformRandomPolicy {
    pub fn for_spec(spec: &EnvSpec) -> Self {
        Self {
            low: spec.action_low.clone(),
            high: spec.action_high.clone(),
        }
    }
}

impl Policy for UniformRandomPolicy {
    fn sample_action(&self, _state: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(lo, hi)| rng.random_range(*lo..*hi))
            .collect()
    }
    fn mean_action(&self, _state: &[f64]) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }
}

/// Bounded FIFO of transitions with monotone insertion stamps.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    transitions: VecDeque<Transition>,
    rounds: VecDeque<u32>,
    next_index: u64,
    current_round: u32,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            capacity,
            state_dim,
            action_dim,
            transitions: VecDeque::new(),
            rounds: VecDeque::new(),
            next_index: 0,
            current_round: 0,
        }
    }

    pub fn with_default_capacity(state_dim: usize, action_dim: usize) -> Self {
        Self::new(DEFAULT_REPLAY_CAPACITY, state_dim, action_dim)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn action_dim(&self) -> usize {
        self.action_dim
    }
    pub fn len(&self) -> usize {
        self.transitions.len()
    }
    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.transitions.get(i)
    }
    pub fn iter(&self) -> impl ExactSizeIterator<Item = &Transition> + '_ {
        self.transitions.iter()
    }
    pub fn last(&self) -> Option<&Transition> {
        self.transitions.back()
    }

    /// Collection round each stored transition was tagged with.
    pub fn rounds(&self) -> &VecDeque<u32> {
        &self.rounds
    }
    pub fn current_round(&self) -> u32 {
        self.current_round
    }
    /// Tag subsequent pushes with a new collection round.
    pub fn begin_round(&mut self, round: u32) {
        self.current_round = round;
    }

    fn check_dims(&self, t: &Transition) -> Result<()> {
        if t.state.len() != self.state_dim {
            return Err(Error::dims("transition state", self.state_dim, t.state.len()));
        }
        if t.next_state.len() != self.state_dim {
            return Err(Error::dims("transition next state", self.state_dim, t.next_state.len()));
        }
        if t.action.len() != self.action_dim {
            return Err(Error::dims("transition action", self.action_dim, t.action.len()));
        }
        Ok(())
    }

    fn push_raw(&mut self, t: Transition) {
        if self.transitions.len() == self.capacity {
            self.transitions.pop_front();
            self.rounds.pop_front();
        }
        self.next_index = t.insertion_index + 1;
        self.transitions.push_back(t);
        self.rounds.push_back(self.current_round);
    }

    /// Append, stamping a fresh insertion index. Returns the stamp.
    pub fn push(&mut self, mut t: Transition) -> Result<u64> {
        self.check_dims(&t)?;
        t.insertion_index = self.next_index;
        let idx = t.insertion_index;
        self.push_raw(t);
        Ok(idx)
    }

    /// Append keeping the transition's own stamp, which must exceed every stored one.
    pub fn push_indexed(&mut self, t: Transition) -> Result<()> {
        self.check_dims(&t)?;
        if let Some(last) = self.transitions.back() {
            if t.insertion_index <= last.insertion_index {
                return Err(Error::InvalidArgument(format!(
                    "insertion index {} does not exceed {}",
                    t.insertion_index, last.insertion_index
                )));
            }
        }
        self.push_raw(t);
        Ok(())
    }

    pub fn extend<I: IntoIterator<Item = Transition>>(&mut self, items: I) -> Result<()> {
        for t in items {
            self.push(t)?;
        }
        Ok(())
    }

    /// Indices drawn with replacement, proportionally to `weights` when given.
    pub fn sample_indices<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        weights: Option<&[f64]>,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::EmptyBuffer("cannot sample from an empty buffer"));
        }
        match weights {
            None => Ok((0..batch_size).map(|_| rng.random_range(0..self.len())).collect()),
            Some(w) => {
                if w.len() != self.len() {
                    return Err(Error::dims("sampling weights", self.len(), w.len()));
                }
                let dist = weighted_index(w)?;
                Ok((0..batch_size).map(|_| dist.sample(rng)).collect())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        weights: Option<&[f64]>,
        rng: &mut R,
    ) -> Result<Vec<&Transition>> {
        Ok(self
            .sample_indices(batch_size, weights, rng)?
            .into_iter()
            .map(|i| &self.transitions[i])
            .collect())
    }

    /// States of a uniform sample over the episode-start transitions.
    pub fn initial_state_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        let starts: Vec<&Transition> = self.iter().filter(|t| t.episode_start).collect();
        if starts.is_empty() {
            return Err(Error::EmptySupport("no episode-start transitions recorded"));
        }
        Ok((0..batch_size)
            .map(|_| starts[rng.random_range(0..starts.len())].state.clone())
            .collect())
    }

    /// The most recent `n` transitions as a new buffer of capacity `n`.
    pub fn suffix(&self, n: usize) -> ReplayBuffer {
        let mut out = ReplayBuffer::new(n.max(1), self.state_dim, self.action_dim);
        let skip = self.len().saturating_sub(n);
        for (t, r) in self.transitions.iter().zip(&self.rounds).skip(skip) {
            out.current_round = *r;
            out.push_raw(t.clone());
        }
        out.current_round = self.current_round;
        out
    }

    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(
            writer,
            "# {BUFFER_CSV_VERSION} state_dim={} action_dim={}",
            self.state_dim, self.action_dim
        )?;
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = Vec::new();
        header.extend((0..self.state_dim).map(|i| format!("s{i}")));
        header.extend((0..self.action_dim).map(|i| format!("a{i}")));
        header.extend((0..self.state_dim).map(|i| format!("ns{i}")));
        header.extend(["reward", "episode_start", "insertion_index"].map(String::from));
        w.write_record(&header)?;
        for t in &self.transitions {
            let mut row: Vec<String> = Vec::with_capacity(header.len());
            row.extend(t.state.iter().map(|v| v.to_string()));
            row.extend(t.action.iter().map(|v| v.to_string()));
            row.extend(t.next_state.iter().map(|v| v.to_string()));
            row.push(t.reward.to_string());
            row.push(u8::from(t.episode_start).to_string());
            row.push(t.insertion_index.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the layout written by [`ReplayBuffer::write_csv`]. Dimensions are
    /// inferred from the column names; capacity is `max(len, capacity)`.
    pub fn read_csv<R: BufRead>(reader: R, capacity: usize) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .has_headers(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let count = |prefix: &str| {
            headers
                .iter()
                .filter(|h| {
                    h.strip_prefix(prefix)
                        .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
                })
                .count()
        };
        let (sd, ad) = (count("s"), count("a"));
        if count("ns") != sd {
            return Err(Error::Format("state and next-state column counts differ".into()));
        }
        let expected = 2 * sd + ad + 3;
        if headers.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} columns, found {}",
                headers.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("bad number {s:?}: {e}")))
        };
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let vals: Vec<&str> = rec.iter().collect();
            if vals.len() != expected {
                return Err(Error::Format(format!("row has {} fields", vals.len())));
            }
            let state = vals[..sd].iter().map(|v| parse(v)).collect::<Result<Vec<_>>>()?;
            let action = vals[sd..sd + ad].iter().map(|v| parse(v)).collect::<Result<Vec<_>>>()?;
            let next_state = vals[sd + ad..2 * sd + ad]
                .iter()
                .map(|v| parse(v))
                .collect::<Result<Vec<_>>>()?;
            let reward = parse(vals[2 * sd + ad])?;
            let episode_start = match vals[2 * sd + ad + 1].trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(Error::Format(format!("bad episode_start {other:?}"))),
            };
            let insertion_index = vals[2 * sd + ad + 2]
                .trim()
                .parse::<u64>()
                .map_err(|e| Error::Format(format!("bad insertion_index: {e}")))?;
            rows.push(Transition {
                state,
                action,
                next_state,
                reward,
                episode_start,
                insertion_index,
            });
        }
        let mut buf = ReplayBuffer::new(capacity.max(rows.len()).max(1), sd, ad);
        for t in rows {
            buf.push_indexed(t)?;
        }
        Ok(buf)
    }
}

pub(crate) fn weighted_index(weights: &[f64]) -> Result<WeightedIndex<f64>> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidArgument(
            "sampling weights must be finite and nonnegative".into(),
        ));
    }
    WeightedIndex::new(weights).map_err(|_| Error::DegenerateDistribution("weights sum to zero"))
}

/// The most recent environment transitions, assumed to come from the current policy.
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentPolicyBuffer {
    inner: ReplayBuffer,
}

impl CurrentPolicyBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Self {
        Self {
            inner: ReplayBuffer::new(capacity, state_dim, action_dim),
        }
    }

    pub fn with_default_capacity(state_dim: usize, action_dim: usize) -> Self {
        Self::new(DEFAULT_POLICY_BUFFER_CAPACITY, state_dim, action_dim)
    }

    /// Mirror a transition already stamped by the main replay buffer.
    pub fn observe(&mut self, t: &Transition) -> Result<()> {
        self.inner.push_indexed(t.clone())
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.inner
    }

    pub fn snapshot(&self) -> ReplayBuffer {
        self.inner.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }
}

/// Steps one environment episode at a time, resetting on termination or horizon.
#[derive(Debug, Clone)]
pub struct EpisodeCursor {
    state: Option<Vec<f64>>,
    t: usize,
}

impl Default for EpisodeCursor {
    fn default() -> Self {
        Self::new()
    }
}

impl EpisodeCursor {
    pub fn new() -> Self {
        Self { state: None, t: 0 }
    }

    pub fn step<E, P>(&mut self, env: &E, policy: &P, rng: &mut dyn RngCore) -> Transition
    where
        E: Environment + ?Sized,
        P: Policy + ?Sized,
    {
        let start = self.state.is_none();
        let state = match self.state.take() {
            Some(s) => s,
            None => {
                self.t = 0;
                env.reset(rng)
            }
        };
        let action = policy.sample_action(&state, rng);
        let step = env.step(&state, &action, rng);
        self.t += 1;
        let done = step.done || self.t >= env.horizon();
        if !done {
            self.state = Some(step.next_state.clone());
        }
        Transition::new(state, action, step.next_state, step.reward, start)
    }
}

/// Up to `max_steps` transitions in temporal order, resetting at episode ends.
pub fn collect_rollout<E, P>(
    env: &E,
    policy: &P,
    max_steps: usize,
    rng: &mut dyn RngCore,
) -> Vec<Transition>
where
    E: Environment + ?Sized,
    P: Policy + ?Sized,
{
    let mut cursor = EpisodeCursor::new();
    (0..max_steps)
        .enumerate()
        .map(|(i, _)| {
            let mut t = cursor.step(env, policy, rng);
            t.insertion_index = i as u64;
            t
        })
        .collect()
}

/// Sum of rewards over one episode with deterministic actions.
pub fn evaluate_episode<E, P>(env: &E, policy: &P, rng: &mut dyn RngCore) -> (f64, Vec<Transition>)
where
    E: Environment + ?Sized,
    P: Policy + ?Sized,
{
    let mut state = env.reset(rng);
    let mut total = 0.0;
    let mut steps = Vec::with_capacity(env.horizon());
    for t in 0..env.horizon() {
        let action = policy.mean_action(&state);
        let step = env.step(&state, &action, rng);
        total += step.reward;
        steps.push(Transition::new(
            state,
            action,
            step.next_state.clone(),
            step.reward,
            t == 0,
        ));
        if step.done {
            break;
        }
        state = step.next_state;
    }
    (total, steps)
}

/// `pi_D(a|s) = n(s, a) / n(s)` over a tabular buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalPolicy {
    rows: Vec<Option<Vec<f64>>>,
}

impl EmpiricalPolicy {
    pub fn prob(&self, s: usize, a: usize) -> Result<f64> {
        match self.rows.get(s) {
            Some(Some(row)) => Ok(row[a]),
            _ => Err(Error::AbsentState(s)),
        }
    }

    pub fn row(&self, s: usize) -> Option<&[f64]> {
        self.rows.get(s).and_then(|r| r.as_deref())
    }

    pub fn is_visited(&self, s: usize) -> bool {
        self.row(s).is_some()
    }

    pub fn n_states(&self) -> usize {
        self.rows.len()
    }
}

pub fn empirical_policy(buffer: &ReplayBuffer, n_states: usize, n_actions: usize) -> Result<EmpiricalPolicy> {
    let mut counts = vec![vec![0u64; n_actions]; n_states];
    for t in buffer.iter() {
        let (s, a) = (tabular_index(&t.state), tabular_index(&t.action));
        if s >= n_states {
            return Err(Error::dims("tabular state index", n_states, s));
        }
        if a >= n_actions {
            return Err(Error::dims("tabular action index", n_actions, a));
        }
        counts[s][a] += 1;
    }
    let rows = counts
        .into_iter()
        .map(|row| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| row.iter().map(|&c| c as f64 / n as f64).collect())
        })
        .collect();
    Ok(EmpiricalPolicy { rows })
}
