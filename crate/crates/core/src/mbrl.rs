//! Training loops: online model-based RL with weighted model learning, the
//! offline variant with a closed-form linear model, and the weight
//! progression analysis over a curated buffer.

use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::AdamState;
use crate::envs::ScriptedExpert;
use crate::error::{Error, Result};
use crate::fdiv::FDivergence;
use crate::mdp::{
    evaluate_episode, CurrentPolicyBuffer, Environment, EpisodeCursor, Policy, ReplayBuffer, Transition,
    UniformRandomPolicy, DEFAULT_POLICY_BUFFER_CAPACITY, DEFAULT_REPLAY_CAPACITY,
};
use crate::model::{
    compute_weights, fit_linear_gaussian_closed_form, mean_nll, mean_prediction_error, model_rollout,
    weighted_mle_step, DynamicsModel, GaussianMlpModel, LinearGaussianModel, WeightScheme, DEFAULT_PMAC_DECAY,
};
use crate::policy::{policy_update, CriticPair, SacOptimizers, StochasticPolicy};
use crate::tom::{
    buffer_importance_weights, train_discriminator, train_dual_q, Discriminator, DualQ, DualTrainConfig,
    TRAIN_VALUE_SAMPLES, WEIGHT_VALUE_SAMPLES,
};

pub const METRICS_CSV_VERSION: &str = "tom-metrics v1";
pub const DECILES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Uniform,
    #[default]
    Tom,
    Pmac,
}

impl SchemeKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::Uniform => "uniform",
            SchemeKind::Tom => "tom",
            SchemeKind::Pmac => "pmac",
        }
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SchemeKind::Uniform),
            "tom" => Ok(SchemeKind::Tom),
            "pmac" => Ok(SchemeKind::Pmac),
            other => Err(Error::InvalidArgument(format!("unknown weighting scheme {other:?}"))),
        }
    }
}

/// How model-learning minibatches use the transition weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Minibatches drawn with probability proportional to the weight.
    #[default]
    Sampling,
    /// Uniform minibatches with the weights multiplying each log-likelihood term.
    Loss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Random-policy environment steps collected before the first epoch.
    pub initial_random_steps: usize,
    pub rollout_batch: usize,
    pub rollout_length: usize,
    /// Environment steps between two model rollout batches.
    pub rollout_interval: usize,
    pub model_buffer_capacity: usize,
    pub replay_capacity: usize,
    pub policy_buffer_capacity: usize,
    pub policy_updates_per_step: usize,
    pub discriminator_steps: usize,
    pub discriminator_batch: usize,
    pub dual_steps: usize,
    pub dual_batch: usize,
    pub model_steps: usize,
    pub model_batch: usize,
    pub policy_batch: usize,
    pub learning_rate: f64,
    pub model_learning_rate: f64,
    pub model_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub scheme: SchemeKind,
    pub pmac_decay: f64,
    pub divergence: FDivergence,
    pub weight_mode: WeightMode,
    /// Draw rollout start states with the transition weights instead of uniformly.
    pub start_state_weighting: bool,
    /// Replace the learned importance weights by ones. Diagnostic.
    pub force_unit_weights: bool,
    pub train_value_samples: usize,
    pub weight_value_samples: usize,
    pub alpha: f64,
    pub polyak: f64,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            steps_per_epoch: 1000,
            initial_random_steps: 1000,
            rollout_batch: 4000,
            rollout_length: 1,
            rollout_interval: 250,
            model_buffer_capacity: 16_000,
            replay_capacity: DEFAULT_REPLAY_CAPACITY,
            policy_buffer_capacity: DEFAULT_POLICY_BUFFER_CAPACITY,
            policy_updates_per_step: 20,
            discriminator_steps: 100,
            discriminator_batch: 256,
            dual_steps: 1000,
            dual_batch: 256,
            model_steps: 30,
            model_batch: 256,
            policy_batch: 256,
            learning_rate: 3e-4,
            model_learning_rate: 3e-4,
            model_hidden: vec![64; 4],
            value_hidden: vec![64, 64],
            discriminator_hidden: vec![64, 64],
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            scheme: SchemeKind::Tom,
            pmac_decay: DEFAULT_PMAC_DECAY,
            divergence: FDivergence::ChiSquared,
            weight_mode: WeightMode::Sampling,
            start_state_weighting: true,
            force_unit_weights: false,
            train_value_samples: TRAIN_VALUE_SAMPLES,
            weight_value_samples: WEIGHT_VALUE_SAMPLES,
            alpha: 0.2,
            polyak: 0.995,
            eval_episodes: 10,
            seed: 0,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("rollout_batch", self.rollout_batch),
            ("rollout_length", self.rollout_length),
            ("rollout_interval", self.rollout_interval),
            ("model_buffer_capacity", self.model_buffer_capacity),
            ("replay_capacity", self.replay_capacity),
            ("policy_buffer_capacity", self.policy_buffer_capacity),
            ("policy_updates_per_step", self.policy_updates_per_step),
            ("discriminator_steps", self.discriminator_steps),
            ("discriminator_batch", self.discriminator_batch),
            ("dual_steps", self.dual_steps),
            ("dual_batch", self.dual_batch),
            ("model_steps", self.model_steps),
            ("model_batch", self.model_batch),
            ("policy_batch", self.policy_batch),
            ("train_value_samples", self.train_value_samples),
            ("weight_value_samples", self.weight_value_samples),
            ("eval_episodes", self.eval_episodes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("model_learning_rate", self.model_learning_rate)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(self.pmac_decay > 0.0 && self.pmac_decay < 1.0) {
            return Err(Error::InvalidArgument(format!("pmac_decay {} outside (0, 1)", self.pmac_decay)));
        }
        if !(self.polyak >= 0.0 && self.polyak < 1.0) {
            return Err(Error::InvalidArgument(format!("polyak {} outside [0, 1)", self.polyak)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha {} must be nonnegative", self.alpha)));
        }
        for (name, h) in [
            ("model_hidden", &self.model_hidden),
            ("value_hidden", &self.value_hidden),
            ("discriminator_hidden", &self.discriminator_hidden),
            ("actor_hidden", &self.actor_hidden),
            ("critic_hidden", &self.critic_hidden),
        ] {
            if h.contains(&0) {
                return Err(Error::InvalidArgument(format!("{name} has a zero-width layer")));
            }
        }
        Ok(())
    }

    pub fn weight_scheme(&self) -> WeightScheme {
        match self.scheme {
            SchemeKind::Uniform => WeightScheme::Uniform,
            SchemeKind::Tom => WeightScheme::Tom,
            SchemeKind::Pmac => WeightScheme::Pmac {
                decay_rate: self.pmac_decay,
            },
        }
    }
}

/// Independent random streams, one per consumer, so that switching a learner
/// on or off leaves every other stream untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
enum Stream {
    Env = 1,
    Policy,
    Model,
    DiscriminatorInit,
    Discriminator,
    DualInit,
    Dual,
    Weights,
    Rollout,
    Sac,
    Eval,
}

fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Logical sequence of phase executions within a run.
#[derive(Debug, Default)]
struct PhaseLog {
    counter: u64,
    entries: Vec<String>,
}

impl PhaseLog {
    fn mark(&mut self, phase: &str) {
        self.counter += 1;
        self.entries.push(format!("{phase}@{}", self.counter));
    }
    fn take(&mut self) -> String {
        std::mem::take(&mut self.entries).join(";")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub env_steps: u64,
    pub eval_return_mean: f64,
    pub eval_return_max_so_far: f64,
    pub model_nll: f64,
    pub weight_mean: f64,
    pub weight_max: f64,
    pub weight_deciles: Vec<f64>,
    pub policy_buffer_refreshes: usize,
    /// `phase@sequence` entries in execution order.
    pub phases: String,
    pub status: String,
}

impl MetricsRow {
    pub fn is_failed(&self) -> bool {
        self.status != "ok"
    }
}

fn metrics_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "epoch",
        "env_steps",
        "eval_return_mean",
        "eval_return_max_so_far",
        "model_nll",
        "weight_mean",
        "weight_max",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..DECILES).map(|d| format!("weight_decile_{d}")));
    h.extend(["policy_buffer_refreshes", "phases", "status"].iter().map(|s| s.to_string()));
    h
}

/// Versioned CSV with one row per epoch.
pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut writer: W) -> Result<()> {
    writeln!(writer, "# {METRICS_CSV_VERSION}")?;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(metrics_header())?;
    for r in rows {
        let mut rec = vec![
            r.epoch.to_string(),
            r.env_steps.to_string(),
            r.eval_return_mean.to_string(),
            r.eval_return_max_so_far.to_string(),
            r.model_nll.to_string(),
            r.weight_mean.to_string(),
            r.weight_max.to_string(),
        ];
        for d in 0..DECILES {
            rec.push(r.weight_deciles.get(d).copied().unwrap_or(f64::NAN).to_string());
        }
        rec.push(r.policy_buffer_refreshes.to_string());
        rec.push(r.phases.clone());
        rec.push(r.status.clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean weight over ten contiguous, equally sized slices in buffer order.
/// The last slice absorbs the remainder.
pub fn decile_means(weights: &[f64]) -> Vec<f64> {
    if weights.is_empty() {
        return vec![f64::NAN; DECILES];
    }
    let n = weights.len();
    (0..DECILES)
        .map(|d| {
            let lo = d * n / DECILES;
            let hi = ((d + 1) * n / DECILES).max(lo + 1).min(n);
            let lo = lo.min(hi - 1);
            weights[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = 0.5 * (i + j) as f64 + 1.0;
        for k in i..=j {
            ranks[order[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with tied values sharing their average rank.
/// Zero when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Fixed policies that can stand in for the learner when evaluating state values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferencePolicy {
    Learned(StochasticPolicy),
    Scripted(ScriptedExpert),
    Uniform(UniformRandomPolicy),
}

impl Policy for ReferencePolicy {
    fn sample_action(&self, state: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        match self {
            ReferencePolicy::Learned(p) => p.sample_action(state, rng),
            ReferencePolicy::Scripted(p) => p.sample_action(state, rng),
            ReferencePolicy::Uniform(p) => p.sample_action(state, rng),
        }
    }
    fn mean_action(&self, state: &[f64]) -> Vec<f64> {
        match self {
            ReferencePolicy::Learned(p) => p.mean_action(state),
            ReferencePolicy::Scripted(p) => p.mean_action(state),
            ReferencePolicy::Uniform(p) => p.mean_action(state),
        }
    }
}

fn weight_stats(weights: &[f64]) -> (f64, f64, Vec<f64>) {
    if weights.is_empty() {
        return (f64::NAN, f64::NAN, vec![f64::NAN; DECILES]);
    }
    let mean = weights.iter().sum::<f64>() / weights.len() as f64;
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, max, decile_means(weights))
}

/// Trainable pieces shared by the online and offline loops.
struct Learners {
    policy: StochasticPolicy,
    critics: CriticPair,
    sac_opt: SacOptimizers,
    disc: Option<(Discriminator, AdamState)>,
    dual: Option<(DualQ, AdamState)>,
}

impl Learners {
    fn new(config: &LoopConfig, spec: &crate::mdp::EnvSpec) -> Result<Self> {
        let (sd, ad) = (spec.state_dim, spec.action_dim);
        let mut policy_rng = stream(config.seed, Stream::Policy);
        let policy = StochasticPolicy::new(
            sd,
            spec.action_low.clone(),
            spec.action_high.clone(),
            &config.actor_hidden,
            &mut policy_rng,
        )?;
        let mut critics = CriticPair::new(sd, ad, &config.critic_hidden, spec.gamma, &mut policy_rng)?;
        critics.alpha = config.alpha;
        critics.polyak = config.polyak;
        let sac_opt = SacOptimizers::new(&policy, &critics, config.learning_rate);
        let (disc, dual) = if config.scheme == SchemeKind::Tom {
            let d = Discriminator::new(
                sd,
                ad,
                &config.discriminator_hidden,
                &mut stream(config.seed, Stream::DiscriminatorInit),
            )?;
            let da = AdamState::with_learning_rate(d.params.len(), config.learning_rate);
            let mut q = DualQ::new(sd, ad, &config.value_hidden, spec.gamma, &mut stream(config.seed, Stream::DualInit))?;
            q.value_samples = config.train_value_samples;
            let qa = AdamState::with_learning_rate(q.params.len(), config.learning_rate);
            (Some((d, da)), Some((q, qa)))
        } else {
            (None, None)
        };
        Ok(Self {
            policy,
            critics,
            sac_opt,
            disc,
            dual,
        })
    }
}

/// Discriminator, then dual Q, then importance weights over `replay`.
#[allow(clippy::too_many_arguments)]
fn tom_weights(
    config: &LoopConfig,
    disc: &mut (Discriminator, AdamState),
    dual: &mut (DualQ, AdamState),
    reference: &dyn Policy,
    policy_data: &ReplayBuffer,
    replay: &ReplayBuffer,
    rngs: &mut [ChaCha8Rng; 3],
    log: &mut PhaseLog,
) -> Result<Vec<f64>> {
    let [disc_rng, dual_rng, weight_rng] = rngs;
    train_discriminator(
        &mut disc.0,
        policy_data,
        replay,
        config.discriminator_steps,
        config.discriminator_batch,
        &mut disc.1,
        disc_rng,
    )?;
    log.mark("discriminator");
    train_dual_q(
        &mut dual.0,
        reference,
        config.divergence,
        replay,
        &disc.0,
        DualTrainConfig {
            steps: config.dual_steps,
            batch: config.dual_batch,
        },
        &mut dual.1,
        dual_rng,
    )?;
    log.mark("dual_q");
    let w = buffer_importance_weights(
        &dual.0,
        reference,
        &disc.0,
        replay,
        config.divergence,
        config.weight_value_samples,
        weight_rng,
    )?;
    log.mark("weights");
    Ok(w)
}

fn ensure_positive_mass(weights: &[f64], phase: &'static str) -> Result<()> {
    if weights.iter().sum::<f64>() > 0.0 {
        Ok(())
    } else {
        Err(Error::Diverged {
            phase,
            detail: "every transition weight is zero".into(),
        })
    }
}

/// Rollout start-state weights for `replay`, extending `weights` (computed
/// when the buffer began at insertion index `first_index`) over transitions
/// appended since and dropping evicted ones. New transitions get the mean weight.
fn aligned_weights(weights: &[f64], first_index: u64, replay: &ReplayBuffer) -> Vec<f64> {
    let front = replay.get(0).map(|t| t.insertion_index).unwrap_or(first_index);
    let drop = (front.saturating_sub(first_index) as usize).min(weights.len());
    let kept = &weights[drop..];
    let fill = if weights.is_empty() {
        1.0
    } else {
        weights.iter().sum::<f64>() / weights.len() as f64
    };
    let mut out = kept.to_vec();
    out.resize(replay.len(), fill);
    out.truncate(replay.len());
    out
}

fn rollout_starts(replay: &ReplayBuffer, weights: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    Ok(replay
        .sample_indices(n, Some(weights), rng)?
        .into_iter()
        .map(|i| replay.get(i).expect("sampled index in range").state.clone())
        .collect())
}

fn push_rollouts<E: Environment + ?Sized>(
    env: &E,
    model: &dyn DynamicsModel,
    policy: &StochasticPolicy,
    starts: &[Vec<f64>],
    k: usize,
    model_buffer: &mut ReplayBuffer,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let rollout = model_rollout(model, policy, starts, k, |s, a| env.reward(s, a), rng)?;
    if rollout.truncated {
        return Err(Error::Diverged {
            phase: "rollout",
            detail: "model produced a non-finite state".into(),
        });
    }
    model_buffer.extend(rollout.transitions)
}

fn sac_updates(
    learners: &mut Learners,
    model_buffer: &ReplayBuffer,
    config: &LoopConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for _ in 0..config.policy_updates_per_step {
        let batch = model_buffer.sample(config.policy_batch, None, rng)?;
        policy_update(&mut learners.policy, &mut learners.critics, &batch, &mut learners.sac_opt, rng)?;
    }
    Ok(())
}

fn evaluate<E: Environment + ?Sized>(
    env: &E,
    policy: &StochasticPolicy,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, Vec<Transition>) {
    let mut total = 0.0;
    let mut seen = Vec::new();
    for _ in 0..episodes {
        let (ret, steps) = evaluate_episode(env, policy, rng);
        total += ret;
        seen.extend(steps);
    }
    (total / episodes as f64, seen)
}

fn failed_row(epoch: usize, env_steps: u64, max_so_far: f64, refreshes: usize, phases: String, err: &Error) -> MetricsRow {
    MetricsRow {
        epoch,
        env_steps,
        eval_return_mean: f64::NAN,
        eval_return_max_so_far: max_so_far,
        model_nll: f64::NAN,
        weight_mean: f64::NAN,
        weight_max: f64::NAN,
        weight_deciles: vec![f64::NAN; DECILES],
        policy_buffer_refreshes: refreshes,
        phases,
        status: format!("failed: {err}").replace(['\n', ','], " "),
    }
}

/// Everything an online run produces.
#[derive(Debug, Clone)]
pub struct OnlineRun {
    pub metrics: Vec<MetricsRow>,
    pub failed: bool,
    pub policy: StochasticPolicy,
    pub critics: CriticPair,
    pub model: GaussianMlpModel,
    pub discriminator: Option<Discriminator>,
    pub dual_q: Option<DualQ>,
    pub replay: ReplayBuffer,
    /// Weights used for model learning in the last completed epoch, aligned
    /// with the replay buffer as it stood then.
    pub last_weights: Vec<f64>,
}

/// Online loop. Each epoch trains the discriminator and dual Q (tom scheme
/// only), computes transition weights, fits the model on weighted
/// minibatches, then interacts with the environment while rolling out the
/// model and updating the policy, and finally refreshes the current-policy
/// buffer. Deterministic for a fixed `config.seed`.
pub fn run_online<E: Environment + ?Sized>(config: &LoopConfig, env: &E) -> Result<OnlineRun> {
    config.validate()?;
    let spec = env.spec().clone();
    let (sd, ad) = (spec.state_dim, spec.action_dim);
    let scheme = config.weight_scheme();

    let mut env_rng = stream(config.seed, Stream::Env);
    let mut model_rng = stream(config.seed, Stream::Model);
    let mut rollout_rng = stream(config.seed, Stream::Rollout);
    let mut sac_rng = stream(config.seed, Stream::Sac);
    let mut eval_rng = stream(config.seed, Stream::Eval);
    let mut tom_rngs = [
        stream(config.seed, Stream::Discriminator),
        stream(config.seed, Stream::Dual),
        stream(config.seed, Stream::Weights),
    ];

    let mut learners = Learners::new(config, &spec)?;
    let mut model = GaussianMlpModel::new(sd, ad, &config.model_hidden, &mut model_rng)?;
    let mut model_adam = AdamState::with_learning_rate(model.params.len(), config.model_learning_rate);

    let mut replay = ReplayBuffer::new(config.replay_capacity, sd, ad);
    let mut model_buffer = ReplayBuffer::new(config.model_buffer_capacity, sd, ad);
    let mut recent = CurrentPolicyBuffer::new(config.policy_buffer_capacity, sd, ad);
    let mut cursor = EpisodeCursor::new();
    let mut env_steps = 0u64;

    replay.begin_round(0);
    let explorer = UniformRandomPolicy::for_spec(&spec);
    for _ in 0..config.initial_random_steps {
        let mut t = cursor.step(env, &explorer, &mut env_rng);
        t.insertion_index = replay.push(t.clone())?;
        recent.observe(&t)?;
        env_steps += 1;
    }
    if replay.is_empty() {
        return Err(Error::EmptyBuffer("online loop needs initial environment data"));
    }
    let mut policy_data = recent.snapshot();

    let mut log = PhaseLog::default();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut max_so_far = f64::NEG_INFINITY;
    let mut refreshes = 0usize;
    let mut failed = false;
    let mut last_weights = Vec::new();

    for epoch in 0..config.epochs {
        let result = (|| -> Result<MetricsRow> {
            let mut weights = match (&mut learners.disc, &mut learners.dual) {
                (Some(disc), Some(dual)) => {
                    let reference = learners.policy.clone();
                    tom_weights(config, disc, dual, &reference, &policy_data, &replay, &mut tom_rngs, &mut log)?
                }
                _ => compute_weights(scheme, &replay, None)?,
            };
            if config.force_unit_weights {
                weights.iter_mut().for_each(|w| *w = 1.0);
            }
            ensure_positive_mass(&weights, "weights")?;
            let first_index = replay.get(0).map(|t| t.insertion_index).unwrap_or(0);

            let ones = vec![1.0; replay.len()];
            for _ in 0..config.model_steps {
                let (idx, batch_weights) = match config.weight_mode {
                    WeightMode::Sampling => (
                        replay.sample_indices(config.model_batch, Some(&weights), &mut model_rng)?,
                        vec![1.0; config.model_batch],
                    ),
                    WeightMode::Loss => {
                        let idx = replay.sample_indices(config.model_batch, Some(&ones), &mut model_rng)?;
                        let bw: Vec<f64> = idx.iter().map(|i| weights[*i]).collect();
                        (idx, bw)
                    }
                };
                if batch_weights.iter().all(|w| *w == 0.0) {
                    continue;
                }
                let batch: Vec<&Transition> = idx.iter().map(|i| replay.get(*i).expect("index in range")).collect();
                weighted_mle_step(&mut model, &batch, &batch_weights, &mut model_adam)?;
            }
            log.mark("model");

            let start_weights = if config.start_state_weighting {
                weights.clone()
            } else {
                vec![1.0; weights.len()]
            };
            replay.begin_round(epoch as u32 + 1);
            for step in 0..config.steps_per_epoch {
                let mut t = cursor.step(env, &learners.policy, &mut env_rng);
                t.insertion_index = replay.push(t.clone())?;
                recent.observe(&t)?;
                env_steps += 1;
                if step % config.rollout_interval == 0 {
                    let w = aligned_weights(&start_weights, first_index, &replay);
                    let starts = rollout_starts(&replay, &w, config.rollout_batch, &mut rollout_rng)?;
                    push_rollouts(
                        env,
                        &model,
                        &learners.policy,
                        &starts,
                        config.rollout_length,
                        &mut model_buffer,
                        &mut rollout_rng,
                    )?;
                }
                sac_updates(&mut learners, &model_buffer, config, &mut sac_rng)?;
            }
            log.mark("interaction");

            policy_data = recent.snapshot();
            refreshes += 1;
            log.mark("policy_buffer_refresh");

            let (eval_return, seen) = evaluate(env, &learners.policy, config.eval_episodes, &mut eval_rng);
            let nll = mean_nll(&model, seen.iter())?;
            max_so_far = max_so_far.max(eval_return);
            let (wm, wx, deciles) = weight_stats(&weights);
            last_weights = weights;
            Ok(MetricsRow {
                epoch,
                env_steps,
                eval_return_mean: eval_return,
                eval_return_max_so_far: max_so_far,
                model_nll: nll,
                weight_mean: wm,
                weight_max: wx,
                weight_deciles: deciles,
                policy_buffer_refreshes: refreshes,
                phases: log.take(),
                status: "ok".into(),
            })
        })();
        match result {
            Ok(row) => metrics.push(row),
            Err(e) if e.is_numerical() => {
                metrics.push(failed_row(epoch, env_steps, max_so_far, refreshes, log.take(), &e));
                failed = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }

    Ok(OnlineRun {
        metrics,
        failed,
        policy: learners.policy,
        critics: learners.critics,
        model,
        discriminator: learners.disc.map(|d| d.0),
        dual_q: learners.dual.map(|d| d.0),
        replay,
        last_weights,
    })
}

/// Everything an offline run produces.
#[derive(Debug, Clone)]
pub struct OfflineRun {
    pub metrics: Vec<MetricsRow>,
    pub failed: bool,
    pub policy: StochasticPolicy,
    pub model: LinearGaussianModel,
    pub discriminator: Option<Discriminator>,
    pub dual_q: Option<DualQ>,
    /// Transition weights of the last completed epoch, in dataset order.
    pub weights: Vec<f64>,
}

/// Offline loop over a fixed dataset. The model is the closed-form weighted
/// linear-Gaussian fit; the policy is trained on model rollouts only and the
/// environment is used for evaluation alone. State values in the dual use
/// `reference` when given, otherwise the policy being trained.
pub fn run_offline<E: Environment + ?Sized>(
    config: &LoopConfig,
    dataset: &ReplayBuffer,
    current_policy_data: &ReplayBuffer,
    env: &E,
    reference: Option<&ReferencePolicy>,
) -> Result<OfflineRun> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyBuffer("offline dataset is empty"));
    }
    if config.scheme == SchemeKind::Tom && current_policy_data.is_empty() {
        return Err(Error::EmptyBuffer("tom scheme needs current-policy transitions"));
    }
    let spec = env.spec().clone();
    if dataset.state_dim() != spec.state_dim || dataset.action_dim() != spec.action_dim {
        return Err(Error::dims("dataset state", spec.state_dim, dataset.state_dim()));
    }
    let scheme = config.weight_scheme();
    let mut rollout_rng = stream(config.seed, Stream::Rollout);
    let mut sac_rng = stream(config.seed, Stream::Sac);
    let mut eval_rng = stream(config.seed, Stream::Eval);
    let mut tom_rngs = [
        stream(config.seed, Stream::Discriminator),
        stream(config.seed, Stream::Dual),
        stream(config.seed, Stream::Weights),
    ];

    let mut learners = Learners::new(config, &spec)?;
    let mut model_buffer = ReplayBuffer::new(config.model_buffer_capacity, spec.state_dim, spec.action_dim);
    let all: Vec<&Transition> = dataset.iter().collect();
    let mut model = LinearGaussianModel::identity(spec.state_dim, spec.action_dim, 1.0);
    let mut log = PhaseLog::default();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut max_so_far = f64::NEG_INFINITY;
    let mut failed = false;
    let mut last_weights = Vec::new();

    for epoch in 0..config.epochs {
        let result = (|| -> Result<MetricsRow> {
            let mut weights = match (&mut learners.disc, &mut learners.dual) {
                (Some(disc), Some(dual)) => {
                    let learned = ReferencePolicy::Learned(learners.policy.clone());
                    let r = reference.unwrap_or(&learned);
                    tom_weights(config, disc, dual, r, current_policy_data, dataset, &mut tom_rngs, &mut log)?
                }
                _ => compute_weights(scheme, dataset, None)?,
            };
            if config.force_unit_weights {
                weights.iter_mut().for_each(|w| *w = 1.0);
            }
            ensure_positive_mass(&weights, "weights")?;
            model = fit_linear_gaussian_closed_form(&all, &weights)?;
            log.mark("model");

            let start_weights = if config.start_state_weighting {
                weights.clone()
            } else {
                vec![1.0; weights.len()]
            };
            for step in 0..config.steps_per_epoch {
                if step % config.rollout_interval == 0 {
                    let starts = rollout_starts(dataset, &start_weights, config.rollout_batch, &mut rollout_rng)?;
                    push_rollouts(
                        env,
                        &model,
                        &learners.policy,
                        &starts,
                        config.rollout_length,
                        &mut model_buffer,
                        &mut rollout_rng,
                    )?;
                }
                sac_updates(&mut learners, &model_buffer, config, &mut sac_rng)?;
            }
            log.mark("policy_optimization");

            let (eval_return, seen) = evaluate(env, &learners.policy, config.eval_episodes, &mut eval_rng);
            let nll = mean_nll(&model, seen.iter())?;
            max_so_far = max_so_far.max(eval_return);
            let (wm, wx, deciles) = weight_stats(&weights);
            last_weights = weights;
            Ok(MetricsRow {
                epoch,
                env_steps: 0,
                eval_return_mean: eval_return,
                eval_return_max_so_far: max_so_far,
                model_nll: nll,
                weight_mean: wm,
                weight_max: wx,
                weight_deciles: deciles,
                policy_buffer_refreshes: 0,
                phases: log.take(),
                status: "ok".into(),
            })
        })();
        match result {
            Ok(row) => metrics.push(row),
            Err(e) if e.is_numerical() => {
                metrics.push(failed_row(epoch, 0, max_so_far, 0, log.take(), &e));
                failed = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }

    Ok(OfflineRun {
        metrics,
        failed,
        policy: learners.policy,
        model,
        discriminator: learners.disc.map(|d| d.0),
        dual_q: learners.dual.map(|d| d.0),
        weights: last_weights,
    })
}

/// Mean one-step prediction error of a model over the transitions selected by `keep`.
pub fn prediction_error_where<F: Fn(&Transition) -> bool>(
    model: &dyn DynamicsModel,
    data: &ReplayBuffer,
    keep: F,
) -> Result<f64> {
    mean_prediction_error(model, data.iter().filter(|t| keep(t)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightProgression {
    /// Importance weight per curated-buffer transition, in buffer order.
    pub weights: Vec<f64>,
    pub decile_means: Vec<f64>,
    pub first_half_mean: f64,
    pub second_half_mean: f64,
    /// Rank correlation between decile index and decile mean over the second half.
    pub second_half_spearman: f64,
}

/// Trains a discriminator and dual Q offline on `curated` against
/// `policy_data` (transitions of the policy of interest), with state values
/// taken under `policy`, and reports the resulting weights by buffer decile.
pub fn run_weight_progression<P: Policy + ?Sized>(
    config: &LoopConfig,
    curated: &ReplayBuffer,
    policy_data: &ReplayBuffer,
    policy: &P,
    gamma: f64,
) -> Result<WeightProgression> {
    config.validate()?;
    if curated.is_empty() || policy_data.is_empty() {
        return Err(Error::EmptyBuffer("weight progression needs both buffers"));
    }
    let (sd, ad) = (curated.state_dim(), curated.action_dim());
    let mut disc_rng = stream(config.seed, Stream::Discriminator);
    let mut dual_rng = stream(config.seed, Stream::Dual);
    let mut weight_rng = stream(config.seed, Stream::Weights);
    let mut disc = Discriminator::new(
        sd,
        ad,
        &config.discriminator_hidden,
        &mut stream(config.seed, Stream::DiscriminatorInit),
    )?;
    let mut disc_adam = AdamState::with_learning_rate(disc.params.len(), config.learning_rate);
    train_discriminator(
        &mut disc,
        policy_data,
        curated,
        config.discriminator_steps,
        config.discriminator_batch,
        &mut disc_adam,
        &mut disc_rng,
    )?;
    let mut q = DualQ::new(sd, ad, &config.value_hidden, gamma, &mut stream(config.seed, Stream::DualInit))?;
    q.value_samples = config.train_value_samples;
    let mut q_adam = AdamState::with_learning_rate(q.params.len(), config.learning_rate);
    train_dual_q(
        &mut q,
        policy,
        config.divergence,
        curated,
        &disc,
        DualTrainConfig {
            steps: config.dual_steps,
            batch: config.dual_batch,
        },
        &mut q_adam,
        &mut dual_rng,
    )?;
    let weights = buffer_importance_weights(
        &q,
        policy,
        &disc,
        curated,
        config.divergence,
        config.weight_value_samples,
        &mut weight_rng,
    )?;
    Ok(summarize_progression(weights))
}

pub fn summarize_progression(weights: Vec<f64>) -> WeightProgression {
    let n = weights.len();
    let half = n / 2;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    let deciles = decile_means(&weights);
    let upper = &deciles[DECILES / 2..];
    let index: Vec<f64> = (0..upper.len()).map(|i| i as f64).collect();
    WeightProgression {
        first_half_mean: mean(&weights[..half]),
        second_half_mean: mean(&weights[half..]),
        second_half_spearman: spearman(&index, upper),
        decile_means: deciles,
        weights,
    }
}

/// Settings for the actor-critic run that produces checkpoints of increasing quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    /// Transitions in each half of the curated buffer.
    pub half_size: usize,
    pub checkpoints: usize,
    /// Environment steps of actor-critic training between checkpoints.
    pub steps_per_checkpoint: usize,
    pub warmup_steps: usize,
    pub batch: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            half_size: 10_000,
            checkpoints: 5,
            steps_per_checkpoint: 4000,
            warmup_steps: 1000,
            batch: 128,
            hidden: vec![64, 64],
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CuratedBuffer {
    /// Random-policy transitions followed by checkpoint transitions in training order.
    pub buffer: ReplayBuffer,
    /// Policy snapshots in training order; the last one is the most trained.
    pub checkpoints: Vec<StochasticPolicy>,
    /// Mean deterministic evaluation return of each checkpoint.
    pub checkpoint_returns: Vec<f64>,
    /// Fresh transitions of the final checkpoint, for use as current-policy data.
    pub final_policy_data: ReplayBuffer,
    /// Fresh transitions of the random policy.
    pub random_policy_data: ReplayBuffer,
}

/// Trains a model-free actor-critic on the real environment, snapshots it at
/// regular intervals, and assembles a buffer of random transitions followed by
/// equal shares of transitions from each snapshot in order.
pub fn build_curated_buffer<E: Environment + ?Sized>(
    env: &E,
    config: &CurationConfig,
    policy_data_size: usize,
) -> Result<CuratedBuffer> {
    if config.half_size == 0 || config.checkpoints == 0 || config.batch == 0 || policy_data_size == 0 {
        return Err(Error::InvalidArgument("curation sizes must be positive".into()));
    }
    let spec = env.spec().clone();
    let (sd, ad) = (spec.state_dim, spec.action_dim);
    let mut env_rng = stream(config.seed, Stream::Env);
    let mut init_rng = stream(config.seed, Stream::Policy);
    let mut sac_rng = stream(config.seed, Stream::Sac);
    let mut eval_rng = stream(config.seed, Stream::Eval);

    let mut policy = StochasticPolicy::new(
        sd,
        spec.action_low.clone(),
        spec.action_high.clone(),
        &config.hidden,
        &mut init_rng,
    )?;
    let mut critics = CriticPair::new(sd, ad, &config.hidden, spec.gamma, &mut init_rng)?;
    let mut opt = SacOptimizers::new(&policy, &critics, config.learning_rate);
    let explorer = UniformRandomPolicy::for_spec(&spec);

    let mut train_buffer = ReplayBuffer::new(DEFAULT_REPLAY_CAPACITY, sd, ad);
    let mut cursor = EpisodeCursor::new();
    for _ in 0..config.warmup_steps.max(1) {
        train_buffer.push(cursor.step(env, &explorer, &mut env_rng))?;
    }
    let mut checkpoints = Vec::with_capacity(config.checkpoints);
    let mut checkpoint_returns = Vec::with_capacity(config.checkpoints);
    for _ in 0..config.checkpoints {
        for _ in 0..config.steps_per_checkpoint {
            train_buffer.push(cursor.step(env, &policy, &mut env_rng))?;
            let batch = train_buffer.sample(config.batch, None, &mut sac_rng)?;
            policy_update(&mut policy, &mut critics, &batch, &mut opt, &mut sac_rng)?;
        }
        let (ret, _) = evaluate(env, &policy, 3, &mut eval_rng);
        checkpoint_returns.push(ret);
        checkpoints.push(policy.clone());
    }

    let mut buffer = ReplayBuffer::new(2 * config.half_size, sd, ad);
    buffer.begin_round(0);
    buffer.extend(crate::mdp::collect_rollout(env, &explorer, config.half_size, &mut env_rng))?;
    let per = config.half_size / config.checkpoints;
    for (i, ckpt) in checkpoints.iter().enumerate() {
        let n = if i + 1 == config.checkpoints {
            config.half_size - per * (config.checkpoints - 1)
        } else {
            per
        };
        buffer.begin_round(i as u32 + 1);
        buffer.extend(crate::mdp::collect_rollout(env, ckpt, n, &mut env_rng))?;
    }
    let final_policy = checkpoints.last().expect("at least one checkpoint");
    let mut final_policy_data = ReplayBuffer::new(policy_data_size, sd, ad);
    final_policy_data.extend(crate::mdp::collect_rollout(env, final_policy, policy_data_size, &mut env_rng))?;
    let mut random_policy_data = ReplayBuffer::new(policy_data_size, sd, ad);
    random_policy_data.extend(crate::mdp::collect_rollout(env, &explorer, policy_data_size, &mut env_rng))?;
    Ok(CuratedBuffer {
        buffer,
        checkpoints,
        checkpoint_returns,
        final_policy_data,
        random_policy_data,
    })
}
