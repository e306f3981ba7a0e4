//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! `TOM_ACCEPTANCE=1,2,5` restricts the run to the listed criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use tom_core::approximator::AdamState;
use tom_core::envs::{make_offline_dataset, PointMassReach, RoadAndRocks, ScriptedExpert};
use tom_core::mbrl::{
    build_curated_buffer, run_offline, run_online, run_weight_progression, CurationConfig, LoopConfig,
    ReferencePolicy, SchemeKind,
};
use tom_core::mdp::{Environment, ReplayBuffer, Transition, UniformRandomPolicy};
use tom_core::model::GaussianMlpModel;
use tom_core::occupancy::{
    bellman_flow_residual, bellman_transition_flow_residual, exact_occupancy, primal_tom_solve, random_simplex,
    recover_transition, transition_occupancy, verify_lower_bound, OccupancyTable, TabularMdp, TabularPolicy,
};
use tom_core::policy::{actor_loss_and_gradient, critic_loss_and_gradient, soft_targets, CriticPair, StochasticPolicy};
use tom_core::tom::{
    dual_loss_and_gradient, relevance_reward, total_variation, train_discriminator, Discriminator, DualBatch, DualQ,
    TabularDual, TabularDualProblem,
};
use tom_core::FDivergence;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn mins(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn random_problem(rng: &mut ChaCha8Rng) -> (TabularMdp, TabularPolicy) {
    let ns = rng.random_range(1..=8);
    let na = rng.random_range(1..=4);
    let gamma = rng.random_range(0.5..0.99);
    (TabularMdp::random(ns, na, gamma, rng), TabularPolicy::random(ns, na, rng))
}

/// Occupancy by iterating the flow equation from zero until the geometric
/// tail is below 1e-14.
fn iterated_occupancy(mdp: &TabularMdp, pi: &TabularPolicy) -> Vec<f64> {
    let (ns, na, g) = (mdp.n_states, mdp.n_actions, mdp.gamma);
    let mut d = vec![0.0; ns * na];
    let iters = ((1e-14f64).ln() / g.ln()).ceil() as usize + 1;
    for _ in 0..iters {
        let mut inflow = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                for (sp, v) in inflow.iter_mut().enumerate() {
                    *v += mdp.t(s, a, sp) * d[s * na + a];
                }
            }
        }
        for s in 0..ns {
            for a in 0..na {
                d[s * na + a] = pi.p(s, a) * ((1.0 - g) * mdp.initial[s] + g * inflow[s]);
            }
        }
    }
    d
}

fn flow_residual(d: &OccupancyTable, mdp: &TabularMdp, pi: &TabularPolicy) -> f64 {
    let (ns, na, g) = (mdp.n_states, mdp.n_actions, mdp.gamma);
    let mut worst = 0.0f64;
    for s in 0..ns {
        let inflow: f64 = (0..ns)
            .flat_map(|st| (0..na).map(move |at| (st, at)))
            .map(|(st, at)| mdp.t(st, at, s) * d.get(st, at))
            .sum();
        for a in 0..na {
            let rhs = pi.p(s, a) * ((1.0 - g) * mdp.initial[s] + g * inflow);
            worst = worst.max((d.get(s, a) - rhs).abs());
        }
    }
    worst
}

fn occupancy_correctness() -> Outcome {
    let (mut residual, mut mass, mut iterate_gap) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mdp, pi) = random_problem(&mut rng);
        let d = exact_occupancy(&mdp, &pi).expect("solvable");
        residual = residual.max(flow_residual(&d, &mdp, &pi)).max(bellman_flow_residual(&d, &mdp));
        mass = mass.max((d.d.iter().sum::<f64>() - 1.0).abs());
        let it = iterated_occupancy(&mdp, &pi);
        iterate_gap = iterate_gap.max(d.d.iter().zip(&it).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Outcome::new(
        residual < 1e-8 && mass <= 1e-9 && iterate_gap < 1e-8,
        format!("100 MDPs: flow residual {residual:.2e} (< 1e-8), mass error {mass:.2e} (<= 1e-9), fixed-point gap {iterate_gap:.2e}"),
    )
}

fn transition_identities() -> Outcome {
    let (mut marginal, mut product, mut recovery, mut flow) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (mdp, pi) = random_problem(&mut rng);
        let (ns, na, g) = (mdp.n_states, mdp.n_actions, mdp.gamma);
        let d = exact_occupancy(&mdp, &pi).expect("solvable");
        let tod = transition_occupancy(&d, &mdp);
        let rec = recover_transition(&tod);
        for s in 0..ns {
            for a in 0..na {
                let sum: f64 = (0..ns).map(|sp| tod.get(s, a, sp)).sum();
                marginal = marginal.max((sum - d.get(s, a)).abs());
                for sp in 0..ns {
                    product = product.max((tod.get(s, a, sp) - mdp.t(s, a, sp) * d.get(s, a)).abs());
                }
                if d.get(s, a) > 0.0 {
                    let row = rec.row(s, a).expect("positive support row");
                    for sp in 0..ns {
                        recovery = recovery.max((row[sp] - mdp.t(s, a, sp)).abs());
                    }
                }
            }
        }
        let inflow: Vec<f64> = (0..ns)
            .map(|s| (0..ns).flat_map(|st| (0..na).map(move |at| (st, at))).map(|(st, at)| tod.get(st, at, s)).sum())
            .collect();
        for s in 0..ns {
            for a in 0..na {
                for sp in 0..ns {
                    let tp = mdp.t(s, a, sp) * pi.p(s, a);
                    let rhs = (1.0 - g) * mdp.initial[s] * tp + g * tp * inflow[s];
                    flow = flow.max((tod.get(s, a, sp) - rhs).abs());
                }
            }
        }
        flow = flow.max(bellman_transition_flow_residual(&tod, &mdp, &pi));
    }
    Outcome::new(
        marginal <= 1e-12 && product <= 1e-12 && recovery <= 1e-12 && flow < 1e-8,
        format!(
            "100 MDPs: marginalization {marginal:.2e}, product form {product:.2e}, recovery {recovery:.2e} (<= 1e-12), transition flow {flow:.2e} (< 1e-8)"
        ),
    )
}

fn chi_squared(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(_, q)| **q > 0.0).map(|(p, q)| q * (p / q - 1.0).powi(2)).sum()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(p, _)| **p > 0.0).map(|(p, q)| p * (p / q).ln()).sum()
}

fn lower_bound() -> Outcome {
    let mut worst = 0.0f64;
    let mut route_gap = 0.0f64;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (mdp, pi) = random_problem(&mut rng);
        let mdp = mdp.rescale_rewards(0.1, 1.0);
        let ns = mdp.n_states;
        let mix = rng.random_range(0.0..1.0);
        let model_t: Vec<f64> = mdp
            .transition
            .chunks(ns)
            .flat_map(|row| {
                let noise = random_simplex(ns, &mut rng);
                row.iter().zip(noise).map(|(p, n)| (1.0 - mix) * p + mix * n).collect::<Vec<_>>()
            })
            .collect();
        let model = mdp.with_transition(model_t.clone()).expect("valid kernel");
        let true_tod = transition_occupancy(&exact_occupancy(&mdp, &pi).unwrap(), &mdp);
        let model_tod = transition_occupancy(&exact_occupancy(&model, &pi).unwrap(), &model);
        let reward_of = |k: usize| mdp.reward[k / ns];
        let lhs = true_tod.d.iter().enumerate().map(|(k, d)| d * reward_of(k)).sum::<f64>().ln();
        let log_r: f64 = model_tod.d.iter().enumerate().map(|(k, d)| d * reward_of(k).ln()).sum();
        for div in [FDivergence::Kl, FDivergence::ChiSquared] {
            let dist = match div {
                FDivergence::Kl => kl(&model_tod.d, &true_tod.d),
                FDivergence::ChiSquared => chi_squared(&model_tod.d, &true_tod.d),
            };
            let rhs = -dist + log_r;
            worst = worst.max(rhs - lhs);
            let b = verify_lower_bound(&mdp, &pi, &model_t, div).expect("positive rewards");
            worst = worst.max(b.violation());
            route_gap = route_gap.max((b.lhs - lhs).abs()).max((b.rhs - rhs).abs());
        }
    }
    Outcome::new(
        worst <= 1e-9 && route_gap < 1e-9,
        format!("100 triples x {{KL, chi2}}: max violation {worst:.2e} (<= 1e-9), library vs direct gap {route_gap:.2e}"),
    )
}

fn fenchel() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    let (mut young, mut tight, mut fd_err, mut dominance) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for div in [FDivergence::Kl, FDivergence::ChiSquared] {
        for _ in 0..10_000 {
            let x = rng.random_range(0.0..6.0);
            let y = rng.random_range(-6.0..4.0);
            young = young.max(x * y - div.f_value(x).unwrap() - div.conjugate(y));
            // the maximizer x* = f*'(y) attains the supremum
            let xs = div.conjugate_prime(y);
            tight = tight.max((xs * y - div.f_value(xs).unwrap() - div.conjugate(y)).abs());
            if div == FDivergence::ChiSquared && (y + 2.0).abs() < 1e-3 {
                continue;
            }
            let h = 1e-5;
            let fd = (div.conjugate(y + h) - div.conjugate(y - h)) / (2.0 * h);
            let exact = div.conjugate_prime(y);
            fd_err = fd_err.max((fd - exact).abs() / exact.abs().max(1.0));
        }
    }
    for _ in 0..10_000 {
        let n = rng.random_range(2..=12);
        let p = random_simplex(n, &mut rng);
        let q = random_simplex(n, &mut rng);
        let (c, k) = (chi_squared(&p, &q), kl(&p, &q));
        let (lc, lk) = (
            FDivergence::ChiSquared.divergence(&p, &q).unwrap(),
            FDivergence::Kl.divergence(&p, &q).unwrap(),
        );
        dominance = dominance.max(k - c).max(lk - lc);
    }
    Outcome::new(
        young <= 1e-12 && tight <= 1e-9 && fd_err <= 1e-6 && dominance <= 0.0,
        format!(
            "Fenchel-Young excess {young:.2e}, equality gap at f*' {tight:.2e}, conjugate derivative FD error {fd_err:.2e} (<= 1e-6), max KL - chi2 over 1e4 pairs {dominance:.2e} (<= 0)"
        ),
    )
}

fn dual_primal() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4000);
    let mdp = TabularMdp::random(3, 2, 0.9, &mut rng);
    let pi = TabularPolicy::random(3, 2, &mut rng);
    let replay = transition_occupancy(&exact_occupancy(&mdp, &TabularPolicy::uniform(3, 2)).unwrap(), &mdp);
    let mut worst = 0.0f64;
    for div in [FDivergence::ChiSquared, FDivergence::Kl] {
        let problem = TabularDualProblem::from_occupancies(&mdp, &pi, &replay, div).unwrap();
        let dual = TabularDual::fit(&problem, 20_000);
        let implied = problem.weighted_occupancy(&dual.q).unwrap();
        let sol = primal_tom_solve(&mdp, &pi, &replay, div).unwrap();
        let total = sol.dtod.total();
        let primal: Vec<f64> = sol.dtod.d.iter().map(|v| v / total).collect();
        worst = worst.max(total_variation(&implied, &primal));
    }
    Outcome::new(worst <= 0.05, format!("3x2 MDP, chi2 and KL: TV(dual-weighted, primal) = {worst:.3e} (<= 0.05)"))
}

fn gaussian_log_pdf(x: f64, mean: f64, std: f64) -> f64 {
    -0.5 * ((x - mean) / std).powi(2) - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn discriminator_ratio() -> Outcome {
    let (mp, sp, mq, sq) = (0.5, 1.0, -0.5, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5000);
    let n = 4000;
    let mut pol = ReplayBuffer::new(n, 1, 1);
    let mut rep = ReplayBuffer::new(n, 1, 1);
    let (np, nq) = (Normal::new(mp, sp).unwrap(), Normal::new(mq, sq).unwrap());
    let point = |x: f64| Transition::new(vec![x], vec![0.0], vec![0.0], 0.0, false);
    for _ in 0..n {
        pol.push(point(np.sample(&mut rng))).unwrap();
        rep.push(point(nq.sample(&mut rng))).unwrap();
    }
    let mut disc = Discriminator::new(1, 1, &[16], &mut rng).unwrap();
    let mut adam = AdamState::with_learning_rate(disc.params.len(), 1e-2);
    train_discriminator(&mut disc, &pol, &rep, 2000, 256, &mut adam, &mut rng).unwrap();
    // both 2-sigma regions
    let (lo, hi) = ((mp - 2.0 * sp).max(mq - 2.0 * sq), (mp + 2.0 * sp).min(mq + 2.0 * sq));
    let probes = 61;
    let mae = (0..probes)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / (probes - 1) as f64;
            let truth = gaussian_log_pdf(x, mp, sp) - gaussian_log_pdf(x, mq, sq);
            (relevance_reward(&disc, &point(x)).unwrap() - truth).abs()
        })
        .sum::<f64>()
        / probes as f64;
    Outcome::new(mae <= 0.15, format!("MAE of r vs analytic log-ratio on [{lo}, {hi}]: {mae:.4} (<= 0.15)"))
}

/// Largest relative error between `grad` and central differences of `loss`
/// over every coordinate.
fn fd_error(loss: impl Fn(&[f64]) -> f64, grad: &[f64], params: &[f64]) -> f64 {
    let h = 1e-6;
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let up = loss(&probe);
        probe[i] = params[i] - h;
        let down = loss(&probe);
        probe[i] = params[i];
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((grad[i] - numeric).abs() / (grad[i].abs() + numeric.abs()).max(1e-6));
    }
    worst
}

fn random_transitions(rng: &mut ChaCha8Rng, n: usize, sd: usize, ad: usize) -> Vec<Transition> {
    (0..n)
        .map(|_| {
            let mut v = |k: usize, b: f64| (0..k).map(|_| rng.random_range(-b..b)).collect::<Vec<f64>>();
            let (s, a, sp) = (v(sd, 1.0), v(ad, 0.9), v(sd, 1.0));
            Transition::new(s, a, sp, rng.random_range(0.0..1.0), false)
        })
        .collect()
}

fn gradient_suite() -> Outcome {
    let names = ["discriminator", "dual chi2", "dual KL", "weighted NLL", "actor", "critic"];
    let mut worst = [0.0f64; 6];
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
        let (sd, ad) = (2, 1);
        let ts = random_transitions(&mut rng, 8, sd, ad);
        let refs: Vec<&Transition> = ts.iter().collect();
        let (pos, neg) = refs.split_at(4);

        let disc = Discriminator::new(sd, ad, &[6, 5], &mut rng).unwrap();
        let (_, g) = disc.loss_and_gradient(&disc.params, pos, neg).unwrap();
        worst[0] = worst[0].max(fd_error(|p| disc.loss_and_gradient(p, pos, neg).unwrap().0, &g, &disc.params));

        let q = DualQ::new(sd, ad, &[5, 4], 0.9, &mut rng).unwrap();
        let r: Vec<f64> = (0..refs.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let init = vec![vec![0.1, 0.2], vec![-0.3, 0.4]];
        let uniform = UniformRandomPolicy {
            low: vec![-1.0],
            high: vec![1.0],
        };
        let batch = DualBatch::new(&uniform, &refs, &r, &init, 3, &mut rng).unwrap();
        for (k, div) in [(1, FDivergence::ChiSquared), (2, FDivergence::Kl)] {
            let (_, g) = dual_loss_and_gradient(&q.spec, &q.params, q.gamma, div, &batch).unwrap();
            let e = fd_error(|p| dual_loss_and_gradient(&q.spec, p, q.gamma, div, &batch).unwrap().0, &g, &q.params);
            worst[k] = worst[k].max(e);
        }

        let model = GaussianMlpModel::new(sd, ad, &[6, 5], &mut rng).unwrap();
        let w: Vec<f64> = (0..refs.len()).map(|_| rng.random_range(0.0..2.0)).collect();
        let (_, g) = model.nll_and_gradient(&model.params, &refs, &w).unwrap();
        worst[3] = worst[3].max(fd_error(|p| model.nll_and_gradient(p, &refs, &w).unwrap().0, &g, &model.params));

        let policy = StochasticPolicy::new(sd, vec![-1.0], vec![1.0], &[6], &mut rng).unwrap();
        let critics = CriticPair::new(sd, ad, &[6], 0.9, &mut rng).unwrap();
        let states: Vec<&[f64]> = refs.iter().map(|t| t.state.as_slice()).collect();
        let eps: Vec<f64> = (0..refs.len() * ad).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (_, g) = actor_loss_and_gradient(&policy, &policy.params, &critics, &states, &eps).unwrap();
        let e = fd_error(
            |p| actor_loss_and_gradient(&policy, p, &critics, &states, &eps).unwrap().0,
            &g,
            &policy.params,
        );
        worst[4] = worst[4].max(e);

        let y = soft_targets(&policy, &critics, &refs, &mut rng).unwrap();
        let critic = &critics.critics[0];
        let (_, g) = critic_loss_and_gradient(critic, &critic.params, &refs, &y).unwrap();
        worst[5] = worst[5].max(fd_error(|p| critic_loss_and_gradient(critic, p, &refs, &y).unwrap().0, &g, &critic.params));
    }
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(worst.iter().all(|w| *w < 1e-4), format!("10 seeds, max relative error (< 1e-4): {detail}"))
}

fn road_config(scheme: SchemeKind, seed: u64) -> LoopConfig {
    LoopConfig {
        epochs: 4,
        steps_per_epoch: 1500,
        rollout_batch: 1000,
        rollout_interval: 250,
        model_buffer_capacity: 6000,
        policy_updates_per_step: 1,
        discriminator_steps: 300,
        discriminator_batch: 128,
        dual_steps: 300,
        dual_batch: 128,
        policy_batch: 128,
        learning_rate: 1e-3,
        eval_episodes: 5,
        scheme,
        seed,
        ..LoopConfig::default()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn road_and_rocks() -> Outcome {
    let env = RoadAndRocks::default();
    let reference = ReferencePolicy::Scripted(ScriptedExpert::for_road(&env));
    let (mut tom, mut uniform, mut on, mut off) = (vec![], vec![], vec![], vec![]);
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let data = make_offline_dataset(&env, 5000, 20, &mut rng).unwrap();
        for scheme in [SchemeKind::Tom, SchemeKind::Uniform] {
            let run = run_offline(&road_config(scheme, seed), &data.buffer, &data.expert, &env, Some(&reference)).unwrap();
            assert!(!run.failed, "seed {seed} {scheme:?} failed");
            let last = run.metrics.last().unwrap().eval_return_mean;
            if scheme == SchemeKind::Tom {
                tom.push(last);
                for (t, w) in data.buffer.iter().zip(&run.weights) {
                    if env.is_on_road(&t.state) { on.push(*w) } else { off.push(*w) }
                }
            } else {
                uniform.push(last);
            }
        }
    }
    let (rt, ru, won, woff) = (mean(&tom), mean(&uniform), mean(&on), mean(&off));
    Outcome::new(
        rt >= 2.0 * ru && won >= 3.0 * woff,
        format!(
            "4 seeds: final return tom {rt:.1} vs uniform {ru:.1} (ratio {:.2}, >= 2); weight on-road {won:.3} vs rocks {woff:.3} (ratio {:.2}, >= 3)",
            rt / ru,
            won / woff
        ),
    )
}

fn weight_progression() -> Outcome {
    let env = PointMassReach::default();
    let curated = build_curated_buffer(
        &env,
        &CurationConfig {
            half_size: 10_000,
            checkpoints: 5,
            steps_per_checkpoint: 3000,
            seed: 1,
            ..CurationConfig::default()
        },
        1000,
    )
    .unwrap();
    let config = LoopConfig {
        discriminator_steps: 500,
        discriminator_batch: 128,
        dual_steps: 500,
        dual_batch: 128,
        learning_rate: 1e-3,
        seed: 1,
        ..LoopConfig::default()
    };
    let final_policy = ReferencePolicy::Learned(curated.checkpoints.last().unwrap().clone());
    let random_policy = ReferencePolicy::Uniform(UniformRandomPolicy::for_spec(env.spec()));
    let target = run_weight_progression(&config, &curated.buffer, &curated.final_policy_data, &final_policy, 0.99).unwrap();
    let control = run_weight_progression(&config, &curated.buffer, &curated.random_policy_data, &random_policy, 0.99).unwrap();
    let halves = target.first_half_mean < target.second_half_mean;
    let trend = target.second_half_spearman >= 0.6;
    let flat = control.second_half_spearman.abs() <= 0.3;
    Outcome::new(
        halves && trend && flat,
        format!(
            "final checkpoint: half means {:.3} < {:.3} [{}], second-half rho {:.2} (>= 0.6) [{}]; random-policy control rho {:.2} (|rho| <= 0.3) [{}]",
            target.first_half_mean,
            target.second_half_mean,
            ok(halves),
            target.second_half_spearman,
            ok(trend),
            control.second_half_spearman,
            ok(flat)
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b { "ok" } else { "FAIL" }
}

fn online_config(scheme: SchemeKind, seed: u64) -> LoopConfig {
    LoopConfig {
        epochs: 24,
        steps_per_epoch: 2000,
        initial_random_steps: 2000,
        rollout_batch: 2000,
        rollout_interval: 250,
        model_buffer_capacity: 32_000,
        policy_updates_per_step: 1,
        discriminator_steps: 100,
        discriminator_batch: 128,
        dual_steps: 200,
        dual_batch: 128,
        model_steps: 300,
        model_batch: 256,
        policy_batch: 128,
        learning_rate: 1e-3,
        model_learning_rate: 1e-3,
        eval_episodes: 10,
        scheme,
        seed,
        ..LoopConfig::default()
    }
}

fn small_online_config(scheme: SchemeKind, seed: u64) -> LoopConfig {
    LoopConfig {
        epochs: 4,
        steps_per_epoch: 300,
        initial_random_steps: 300,
        rollout_batch: 200,
        rollout_interval: 100,
        model_buffer_capacity: 2000,
        policy_updates_per_step: 1,
        discriminator_steps: 20,
        discriminator_batch: 64,
        dual_steps: 20,
        dual_batch: 64,
        model_steps: 20,
        model_batch: 64,
        policy_batch: 64,
        eval_episodes: 2,
        scheme,
        seed,
        ..LoopConfig::default()
    }
}

/// Largest deviation of the per-round weight mass from the geometric
/// schedule: oldest round `d^(R-1)`, round `j >= 1` `(1 - d) d^(R-1-j)`.
fn pmac_schedule_error(rounds: &[u32], weights: &[f64], decay: f64) -> (usize, f64) {
    let mut ids: Vec<u32> = rounds.to_vec();
    ids.dedup();
    let r = ids.len();
    let mut worst = 0.0f64;
    for (j, id) in ids.iter().enumerate() {
        let mass: f64 = rounds.iter().zip(weights).filter(|(x, _)| *x == id).map(|(_, w)| w).sum();
        let expected = if j == 0 {
            decay.powi(r as i32 - 1)
        } else {
            (1.0 - decay) * decay.powi((r - 1 - j) as i32)
        };
        worst = worst.max((mass - expected).abs());
    }
    (r, worst)
}

fn online_comparison() -> Outcome {
    let env = PointMassReach::default();
    let (mut tom, mut uniform) = (vec![], vec![]);
    for seed in 0..4u64 {
        for scheme in [SchemeKind::Tom, SchemeKind::Uniform] {
            let run = run_online(&online_config(scheme, seed), &env).unwrap();
            assert!(!run.failed, "seed {seed} {scheme:?} failed");
            let best = run.metrics.last().unwrap().eval_return_max_so_far;
            assert_eq!(run.metrics.last().unwrap().env_steps, 50_000);
            if scheme == SchemeKind::Tom { tom.push(best) } else { uniform.push(best) }
        }
    }
    let pmac = run_online(&small_online_config(SchemeKind::Pmac, 0), &env).unwrap();
    let rounds: Vec<u32> = pmac.replay.rounds().iter().copied().take(pmac.last_weights.len()).collect();
    let (n_rounds, err) = pmac_schedule_error(&rounds, &pmac.last_weights, 0.996);
    let (mt, mu) = (mean(&tom), mean(&uniform));
    Outcome::new(
        mt >= mu && err <= 1e-12 && n_rounds >= 3,
        format!(
            "4 seeds x 50k steps: final max-so-far return tom {mt:.1} {tom:.1?} vs uniform {mu:.1} {uniform:.1?}; pmac mass over {n_rounds} rounds off 0.996 schedule by {err:.1e} (<= 1e-12)"
        ),
    )
}

fn reduction_identity() -> Outcome {
    let env = PointMassReach::default();
    let mut forced = small_online_config(SchemeKind::Tom, 3);
    forced.force_unit_weights = true;
    let a = run_online(&forced, &env).unwrap();
    let b = run_online(&small_online_config(SchemeKind::Uniform, 3), &env).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let eval = |r: &tom_core::mbrl::OnlineRun| {
        r.metrics
            .iter()
            .flat_map(|m| [m.eval_return_mean, m.eval_return_max_so_far, m.model_nll, m.weight_mean, m.weight_max])
            .collect::<Vec<_>>()
    };
    let same_eval = bits(&eval(&a)) == bits(&eval(&b));
    let same_model = bits(&a.model.params) == bits(&b.model.params);
    let same_policy = bits(&a.policy.params) == bits(&b.policy.params);
    let same_replay = a.replay.iter().zip(b.replay.iter()).all(|(x, y)| x == y) && a.replay.len() == b.replay.len();
    Outcome::new(
        same_eval && same_model && same_policy && same_replay,
        format!(
            "tom with unit weights vs uniform, seed 3: metrics [{}], model params [{}], policy params [{}], replay [{}] bitwise",
            ok(same_eval),
            ok(same_model),
            ok(same_policy),
            ok(same_replay)
        ),
    )
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "occupancy correctness", limit: Duration::from_secs(10), run: occupancy_correctness },
        Criterion { id: 2, name: "transition-occupancy identities", limit: Duration::from_secs(10), run: transition_identities },
        Criterion { id: 3, name: "log-return lower bound", limit: Duration::from_secs(30), run: lower_bound },
        Criterion { id: 4, name: "Fenchel properties", limit: Duration::from_secs(10), run: fenchel },
        Criterion { id: 5, name: "dual-primal consistency", limit: mins(2), run: dual_primal },
        Criterion { id: 6, name: "discriminator ratio recovery", limit: mins(1), run: discriminator_ratio },
        Criterion { id: 7, name: "gradient suite", limit: mins(2), run: gradient_suite },
        Criterion { id: 8, name: "road-and-rocks", limit: mins(15), run: road_and_rocks },
        Criterion { id: 9, name: "weight progression", limit: mins(10), run: weight_progression },
        Criterion { id: 10, name: "online comparison", limit: mins(60), run: online_comparison },
        Criterion { id: 11, name: "reduction identity", limit: Duration::MAX, run: reduction_identity },
    ];
    let selected: Option<Vec<u32>> = std::env::var("TOM_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&c.id)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.limit;
        let pass = outcome.pass && in_time;
        let budget = if c.limit == Duration::MAX { String::new() } else { format!(" (limit {:.0}s)", c.limit.as_secs_f64()) };
        println!(
            "{} [{}] {}: {}; {:.1}s{}",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            outcome.detail,
            elapsed.as_secs_f64(),
            budget
        );
        if !pass {
            failed += 1;
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
