//! Small environments: a tabular chain, the road-and-rocks navigation task and
//! a point-mass reaching task.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mdp::{EnvSpec, Environment, Policy, ReplayBuffer, Step, Transition, UniformRandomPolicy};
use crate::occupancy::TabularMdp;

/// Counts actions that arrived outside the bounds and were clipped.
#[derive(Debug, Default)]
pub struct ClipCounter(AtomicUsize);

impl ClipCounter {
    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }

    fn clip(&self, spec: &EnvSpec, action: &[f64]) -> Vec<f64> {
        let clipped = spec.clip_action(action);
        if clipped.iter().zip(action).any(|(c, a)| c != a) {
            self.0.fetch_add(1, Ordering::Relaxed);
        }
        clipped
    }
}

impl Clone for ClipCounter {
    fn clone(&self) -> Self {
        Self(AtomicUsize::new(self.get()))
    }
}

fn draw_index(rng: &mut dyn RngCore, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// A chain of states; action 0 moves left, action 1 moves right, any other
/// action stays. With probability `slip` the move goes the other way.
#[derive(Debug, Clone)]
pub struct GridChain {
    pub mdp: TabularMdp,
    pub slip: f64,
    spec: EnvSpec,
    horizon: usize,
}

impl GridChain {
    pub fn new(n_states: usize, n_actions: usize, slip: f64, gamma: f64) -> Result<Self> {
        let rewards: Vec<f64> = (0..n_states)
            .flat_map(|s| {
                let r = if s + 1 == n_states { 1.0 } else { 0.1 };
                std::iter::repeat_n(r, n_actions)
            })
            .collect();
        let mut initial = vec![0.0; n_states];
        initial[0] = 0.6;
        initial[1.min(n_states - 1)] += 0.4;
        Self::build(n_states, n_actions, slip, gamma, rewards, initial)
    }

    /// Default five-state, two-action chain.
    pub fn standard() -> Self {
        Self::new(5, 2, 0.1, 0.95).expect("default chain is valid")
    }

    /// Random slip, rewards in `[0.1, 1]` and start distribution.
    pub fn random(n_states: usize, n_actions: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slip = rng.random_range(0.0..0.5);
        let rewards = (0..n_states * n_actions).map(|_| rng.random_range(0.1..=1.0)).collect();
        let initial = crate::occupancy::random_simplex(n_states, &mut rng);
        Self::build(n_states, n_actions, slip, 0.95, rewards, initial)
    }

    fn build(
        n_states: usize,
        n_actions: usize,
        slip: f64,
        gamma: f64,
        reward: Vec<f64>,
        initial: Vec<f64>,
    ) -> Result<Self> {
        let mut transition = vec![0.0; n_states * n_actions * n_states];
        for s in 0..n_states {
            let left = s.saturating_sub(1);
            let right = (s + 1).min(n_states - 1);
            for a in 0..n_actions {
                let row = &mut transition[(s * n_actions + a) * n_states..(s * n_actions + a + 1) * n_states];
                match a {
                    0 => {
                        row[left] += 1.0 - slip;
                        row[right] += slip;
                    }
                    1 => {
                        row[right] += 1.0 - slip;
                        row[left] += slip;
                    }
                    _ => row[s] = 1.0,
                }
            }
        }
        let mdp = TabularMdp::new(n_states, n_actions, transition, reward, initial, gamma)?;
        let spec = EnvSpec {
            state_dim: 1,
            action_dim: 1,
            action_low: vec![0.0],
            action_high: vec![(n_actions - 1) as f64],
            gamma,
            reward_range: (0.0, 1.0),
        };
        Ok(Self {
            mdp,
            slip,
            spec,
            horizon: 50,
        })
    }
}

impl Environment for GridChain {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![draw_index(rng, &self.mdp.initial) as f64]
    }

    fn step(&self, state: &[f64], action: &[f64], rng: &mut dyn RngCore) -> Step {
        let s = crate::mdp::tabular_index(state).min(self.mdp.n_states - 1);
        let a = crate::mdp::tabular_index(action).min(self.mdp.n_actions - 1);
        let k = (s * self.mdp.n_actions + a) * self.mdp.n_states;
        let next = draw_index(rng, &self.mdp.transition[k..k + self.mdp.n_states]);
        Step {
            next_state: vec![next as f64],
            reward: self.mdp.r(s, a),
            done: false,
        }
    }

    fn reward(&self, state: &[f64], action: &[f64]) -> f64 {
        let s = crate::mdp::tabular_index(state).min(self.mdp.n_states - 1);
        let a = crate::mdp::tabular_index(action).min(self.mdp.n_actions - 1);
        self.mdp.r(s, a)
    }

    fn horizon(&self) -> usize {
        self.horizon
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoadAndRocksConfig {
    pub map_seed: u64,
    pub grid: usize,
    /// Corridor `[x0, x1] x [y0, y1]`, edges included.
    pub road: [f64; 4],
    /// Start segment `[x0, x1]`, spanning the road's width.
    pub start_x: [f64; 2],
    pub goal: [f64; 2],
    pub goal_tolerance: f64,
    pub max_action: f64,
    pub noise_std: f64,
    pub scale_range: [f64; 2],
    pub angle_range: [f64; 2],
    pub reward_floor: f64,
    pub horizon: usize,
    pub gamma: f64,
}

impl Default for RoadAndRocksConfig {
    fn default() -> Self {
        Self {
            map_seed: 2024,
            grid: 20,
            road: [0.0, 1.0, 0.4, 0.6],
            start_x: [0.05, 0.15],
            goal: [0.9, 0.5],
            goal_tolerance: 0.05,
            max_action: 0.05,
            noise_std: 0.002,
            scale_range: [0.2, 1.8],
            angle_range: [0.5 * PI, 1.5 * PI],
            reward_floor: 0.01,
            horizon: 200,
            gamma: 0.95,
        }
    }
}

/// Point navigation on the unit square. Inside the road corridor an action
/// moves the agent by exactly the action; elsewhere each grid cell applies its
/// own fixed rotation and scaling to the action.
#[derive(Debug, Clone)]
pub struct RoadAndRocks {
    pub config: RoadAndRocksConfig,
    /// Row-major 2x2 distortion per cell, indexed `row * grid + col`.
    pub distortions: Vec<[f64; 4]>,
    pub clip_warnings: ClipCounter,
    spec: EnvSpec,
}

impl RoadAndRocks {
    pub fn new(config: RoadAndRocksConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.map_seed);
        let distortions = (0..config.grid * config.grid)
            .map(|_| {
                let scale = rng.random_range(config.scale_range[0]..=config.scale_range[1]);
                let theta = rng.random_range(config.angle_range[0]..=config.angle_range[1]);
                let (sin, cos) = theta.sin_cos();
                [scale * cos, -scale * sin, scale * sin, scale * cos]
            })
            .collect();
        let spec = EnvSpec {
            state_dim: 2,
            action_dim: 2,
            action_low: vec![-config.max_action; 2],
            action_high: vec![config.max_action; 2],
            gamma: config.gamma,
            reward_range: (config.reward_floor, 1.0),
        };
        Self {
            config,
            distortions,
            clip_warnings: ClipCounter::default(),
            spec,
        }
    }

    pub fn is_on_road(&self, state: &[f64]) -> bool {
        let [x0, x1, y0, y1] = self.config.road;
        (x0..=x1).contains(&state[0]) && (y0..=y1).contains(&state[1])
    }

    pub fn cell(&self, state: &[f64]) -> usize {
        let g = self.config.grid;
        let idx = |v: f64| ((v.clamp(0.0, 1.0) * g as f64) as usize).min(g - 1);
        idx(state[1]) * g + idx(state[0])
    }

    /// Noise-free displacement produced by `action` at `state`.
    pub fn displacement(&self, state: &[f64], action: &[f64]) -> [f64; 2] {
        if self.is_on_road(state) {
            [action[0], action[1]]
        } else {
            let m = self.distortions[self.cell(state)];
            [m[0] * action[0] + m[1] * action[1], m[2] * action[0] + m[3] * action[1]]
        }
    }

    pub fn goal_distance(&self, state: &[f64]) -> f64 {
        let [gx, gy] = self.config.goal;
        ((state[0] - gx).powi(2) + (state[1] - gy).powi(2)).sqrt()
    }

    pub fn at_goal(&self, state: &[f64]) -> bool {
        self.goal_distance(state) <= self.config.goal_tolerance
    }

    pub fn state_reward(&self, state: &[f64]) -> f64 {
        (1.0 - self.goal_distance(state)).max(self.config.reward_floor)
    }
}

impl Default for RoadAndRocks {
    fn default() -> Self {
        Self::new(RoadAndRocksConfig::default())
    }
}

impl Environment for RoadAndRocks {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let [_, _, y0, y1] = self.config.road;
        vec![
            rng.random_range(self.config.start_x[0]..=self.config.start_x[1]),
            rng.random_range(y0..=y1),
        ]
    }

    fn step(&self, state: &[f64], action: &[f64], rng: &mut dyn RngCore) -> Step {
        let action = self.clip_warnings.clip(&self.spec, action);
        let d = self.displacement(state, &action);
        let next_state = (0..2)
            .map(|k| {
                let eps = if self.config.noise_std > 0.0 {
                    Normal::new(0.0, self.config.noise_std).expect("positive std").sample(rng)
                } else {
                    0.0
                };
                (state[k] + d[k] + eps).clamp(0.0, 1.0)
            })
            .collect();
        Step {
            next_state,
            reward: self.state_reward(state),
            done: false,
        }
    }

    fn reward(&self, state: &[f64], _action: &[f64]) -> f64 {
        self.state_reward(state)
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }
}

/// Heads straight for a goal with the largest allowed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedExpert {
    pub goal: Vec<f64>,
    pub max_action: f64,
}

impl ScriptedExpert {
    pub fn for_road(env: &RoadAndRocks) -> Self {
        Self {
            goal: env.config.goal.to_vec(),
            max_action: env.config.max_action,
        }
    }
}

impl Policy for ScriptedExpert {
    fn sample_action(&self, state: &[f64], _rng: &mut dyn RngCore) -> Vec<f64> {
        self.mean_action(state)
    }

    fn mean_action(&self, state: &[f64]) -> Vec<f64> {
        self.goal
            .iter()
            .zip(state)
            .map(|(g, s)| (g - s).clamp(-self.max_action, self.max_action))
            .collect()
    }
}

/// Offline data for road-and-rocks: random single steps over the whole map
/// followed by expert trajectories.
#[derive(Debug, Clone)]
pub struct OfflineDataset {
    pub buffer: ReplayBuffer,
    /// The expert transitions alone, standing in for the current policy's footprint.
    pub expert: ReplayBuffer,
    pub n_random: usize,
}

impl OfflineDataset {
    pub fn is_expert(&self, position: usize) -> bool {
        position >= self.n_random
    }
}

pub fn make_offline_dataset(
    env: &RoadAndRocks,
    n_random: usize,
    n_expert_traj: usize,
    rng: &mut dyn RngCore,
) -> Result<OfflineDataset> {
    let mut transitions = Vec::with_capacity(n_random + n_expert_traj * 32);
    let explorer = UniformRandomPolicy::for_spec(env.spec());
    for _ in 0..n_random {
        let s = vec![rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)];
        let a = explorer.sample_action(&s, rng);
        let step = env.step(&s, &a, rng);
        transitions.push(Transition::new(s, a, step.next_state, step.reward, false));
    }
    let expert_policy = ScriptedExpert::for_road(env);
    let mut expert_steps = Vec::new();
    for _ in 0..n_expert_traj {
        let mut s = env.reset(rng);
        for t in 0..env.horizon() {
            let a = expert_policy.mean_action(&s);
            let step = env.step(&s, &a, rng);
            let reached = env.at_goal(&step.next_state);
            expert_steps.push(Transition::new(s, a, step.next_state.clone(), step.reward, t == 0));
            if reached {
                break;
            }
            s = step.next_state;
        }
    }
    let total = transitions.len() + expert_steps.len();
    let mut buffer = ReplayBuffer::new(total.max(1), 2, 2);
    let mut expert = ReplayBuffer::new(expert_steps.len().max(1), 2, 2);
    buffer.extend(transitions)?;
    for t in expert_steps {
        let index = buffer.push(t.clone())?;
        let mut tagged = t;
        tagged.insertion_index = index;
        expert.push_indexed(tagged)?;
    }
    Ok(OfflineDataset {
        buffer,
        expert,
        n_random,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointMassConfig {
    pub drag: f64,
    pub dt: f64,
    pub position_bound: f64,
    pub velocity_bound: f64,
    pub force_bound: f64,
    pub goal: [f64; 2],
    pub start: [f64; 2],
    pub start_spread: f64,
    pub noise_std: f64,
    pub reward_scale: f64,
    pub reward_floor: f64,
    pub horizon: usize,
    pub gamma: f64,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        Self {
            drag: 0.05,
            dt: 0.05,
            position_bound: 1.0,
            velocity_bound: 2.0,
            force_bound: 1.0,
            goal: [0.5, 0.5],
            start: [-0.5, -0.5],
            start_spread: 0.1,
            noise_std: 0.001,
            reward_scale: 2.0,
            reward_floor: 0.01,
            horizon: 200,
            gamma: 0.99,
        }
    }
}

/// Double integrator `(x, y, vx, vy)` driven by a bounded 2-D force.
#[derive(Debug, Clone)]
pub struct PointMassReach {
    pub config: PointMassConfig,
    pub clip_warnings: ClipCounter,
    spec: EnvSpec,
}

impl PointMassReach {
    pub fn new(config: PointMassConfig) -> Self {
        let spec = EnvSpec {
            state_dim: 4,
            action_dim: 2,
            action_low: vec![-config.force_bound; 2],
            action_high: vec![config.force_bound; 2],
            gamma: config.gamma,
            reward_range: (config.reward_floor, 1.0),
        };
        Self {
            config,
            clip_warnings: ClipCounter::default(),
            spec,
        }
    }

    pub fn goal_distance(&self, state: &[f64]) -> f64 {
        let [gx, gy] = self.config.goal;
        ((state[0] - gx).powi(2) + (state[1] - gy).powi(2)).sqrt()
    }

    /// Noise-free successor.
    pub fn mean_next(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let c = &self.config;
        let mut next = vec![0.0; 4];
        for k in 0..2 {
            let v = ((1.0 - c.drag) * state[2 + k] + c.dt * action[k]).clamp(-c.velocity_bound, c.velocity_bound);
            next[2 + k] = v;
            next[k] = (state[k] + c.dt * v).clamp(-c.position_bound, c.position_bound);
        }
        next
    }
}

impl Default for PointMassReach {
    fn default() -> Self {
        Self::new(PointMassConfig::default())
    }
}

impl Environment for PointMassReach {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let c = &self.config;
        vec![
            c.start[0] + rng.random_range(-c.start_spread..=c.start_spread),
            c.start[1] + rng.random_range(-c.start_spread..=c.start_spread),
            0.0,
            0.0,
        ]
    }

    fn step(&self, state: &[f64], action: &[f64], rng: &mut dyn RngCore) -> Step {
        let action = self.clip_warnings.clip(&self.spec, action);
        let c = &self.config;
        let mut next = self.mean_next(state, &action);
        if c.noise_std > 0.0 {
            let noise = Normal::new(0.0, c.noise_std).expect("positive std");
            for (k, v) in next.iter_mut().enumerate() {
                let bound = if k < 2 { c.position_bound } else { c.velocity_bound };
                *v = (*v + noise.sample(rng)).clamp(-bound, bound);
            }
        }
        Step {
            next_state: next,
            reward: self.reward(state, &action),
            done: false,
        }
    }

    fn reward(&self, state: &[f64], _action: &[f64]) -> f64 {
        (1.0 - self.goal_distance(state) / self.config.reward_scale).clamp(self.config.reward_floor, 1.0)
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fit_linear_gaussian_closed_form, mean_prediction_error};

    #[test]
    fn chain_is_a_valid_mdp() {
        GridChain::standard().mdp.validate().unwrap();
        for seed in 0..100 {
            GridChain::random(5, 2, seed).unwrap().mdp.validate().unwrap();
        }
    }

    #[test]
    fn chain_reset_frequencies() {
        let env = GridChain::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            counts[env.reset(&mut rng)[0] as usize] += 1;
        }
        for (c, p) in counts.iter().zip(&env.mdp.initial) {
            assert!((*c as f64 / 1e4 - p).abs() < 0.02);
        }
    }

    #[test]
    fn road_resets_on_road_and_reproducibly() {
        let env = RoadAndRocks::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            assert!(env.is_on_road(&env.reset(&mut rng)));
        }
        let a = env.reset(&mut ChaCha8Rng::seed_from_u64(5));
        let b = env.reset(&mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn road_dynamics() {
        let mut cfg = RoadAndRocksConfig::default();
        cfg.noise_std = 0.0;
        let env = RoadAndRocks::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = [0.3, 0.5];
        let step = env.step(&s, &[0.02, -0.01], &mut rng);
        assert_eq!(step.next_state, vec![0.3 + 0.02, 0.5 - 0.01]);
        let rock = [0.3, 0.1];
        let a = env.step(&rock, &[0.03, 0.01], &mut rng).next_state;
        let b = env.step(&rock, &[0.03, 0.01], &mut rng).next_state;
        assert_eq!(a, b);
        assert_ne!(a, vec![0.33, 0.11]);
        assert_eq!(env.state_reward(&[0.9, 0.5]), 1.0);
        assert_eq!(env.state_reward(&[0.0, 0.0]), 0.01);
        env.step(&s, &[0.5, 0.0], &mut rng);
        assert_eq!(env.clip_warnings.get(), 1);
    }

    #[test]
    fn road_membership() {
        let env = RoadAndRocks::default();
        assert!(env.is_on_road(&[0.5, 0.5]));
        assert!(!env.is_on_road(&[0.0, 0.0]));
        assert!(env.is_on_road(&[0.5, 0.4]));
        assert!(env.is_on_road(&[1.0, 0.6]));
        assert!(!env.is_on_road(&[0.5, 0.6 + 1e-12]));
    }

    #[test]
    fn offline_dataset_shape() {
        let env = RoadAndRocks::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = make_offline_dataset(&env, 2000, 5, &mut rng).unwrap();
        assert_eq!(data.buffer.len(), 2000 + data.expert.len());
        let off = data.buffer.iter().take(2000).filter(|t| !env.is_on_road(&t.state)).count();
        assert!(off as f64 / 2000.0 >= 0.6);
        let mut ends = 0;
        for (i, t) in data.expert.iter().enumerate() {
            let last = data.expert.get(i + 1).is_none_or(|n| n.episode_start);
            if last {
                assert!(env.at_goal(&t.next_state));
                ends += 1;
            }
            assert!(env.is_on_road(&t.state));
        }
        assert_eq!(ends, 5);
        let expert_ids: Vec<u64> = data.expert.iter().map(|t| t.insertion_index).collect();
        let tail: Vec<u64> = data.buffer.iter().skip(2000).map(|t| t.insertion_index).collect();
        assert_eq!(expert_ids, tail);
    }

    #[test]
    fn linear_model_suffices_only_on_road() {
        let env = RoadAndRocks::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = make_offline_dataset(&env, 5000, 5, &mut rng).unwrap();
        let all: Vec<&Transition> = data.buffer.iter().collect();
        let road: Vec<&Transition> = all.iter().copied().filter(|t| env.is_on_road(&t.state)).collect();
        let road_fit = fit_linear_gaussian_closed_form(&road, &vec![1.0; road.len()]).unwrap();
        let all_fit = fit_linear_gaussian_closed_form(&all, &vec![1.0; all.len()]).unwrap();
        let road_err = mean_prediction_error(&road_fit, road.iter().copied()).unwrap();
        let all_err = mean_prediction_error(&all_fit, road.iter().copied()).unwrap();
        assert!(road_err < 0.005, "{road_err}");
        assert!(all_err > 0.01, "{all_err}");
        let b = road_fit.b_matrix();
        assert!((b - nalgebra::DMatrix::identity(2, 2)).abs().max() < 0.05);
    }

    #[test]
    fn point_mass_dynamics_and_reward() {
        let mut cfg = PointMassConfig::default();
        cfg.noise_std = 0.0;
        let env = PointMassReach::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = [0.0, 0.0, 1.0, -1.0];
        let n = env.step(&s, &[1.0, 0.0], &mut rng).next_state;
        let vx = 0.95 * 1.0 + 0.05;
        assert!((n[2] - vx).abs() < 1e-15);
        assert!((n[0] - 0.05 * vx).abs() < 1e-15);
        assert_eq!(env.reward(&[0.5, 0.5, 0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(env.reward(&[-1.0, -1.0, 0.0, 0.0], &[0.0, 0.0]), 0.01);
        let edge = env.step(&[1.0, 1.0, 2.0, 2.0], &[1.0, 1.0], &mut rng).next_state;
        assert_eq!(edge, vec![1.0, 1.0, 1.95, 1.95]);
        for _ in 0..100 {
            let r = env.step(&env.reset(&mut rng), &[0.3, -0.2], &mut rng).reward;
            assert!(r > 0.0 && r <= 1.0);
        }
    }
}
