//! Property suites over random tabular problems, runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tom_core::occupancy::{
    bellman_flow_residual, bellman_transition_flow_residual, exact_occupancy, primal_tom_solve, random_simplex,
    transition_occupancy, verify_lower_bound, TabularMdp, TabularPolicy,
};
use tom_core::tom::{total_variation, TabularDual, TabularDualProblem};
use tom_core::FDivergence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    BellmanFlow,
    LowerBound,
    DualPrimal,
    Fenchel,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::BellmanFlow => "bellman-flow",
            Suite::LowerBound => "lower-bound",
            Suite::DualPrimal => "dual-primal",
            Suite::Fenchel => "fenchel",
        }
    }

    /// Largest residual a passing case may have.
    pub fn tolerance(self) -> f64 {
        match self {
            Suite::BellmanFlow => 1e-8,
            Suite::LowerBound => 1e-9,
            Suite::DualPrimal => 0.05,
            Suite::Fenchel => 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub cases: usize,
    pub failures: usize,
    pub worst: f64,
    /// Seed of the worst case.
    pub worst_seed: u64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl std::fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} suite={} cases={} failures={} worst={:.3e} worst_seed={} tolerance={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite.name(),
            self.cases,
            self.failures,
            self.worst,
            self.worst_seed,
            self.suite.tolerance()
        )
    }
}

fn random_problem(rng: &mut ChaCha8Rng) -> (TabularMdp, TabularPolicy) {
    let ns = rng.random_range(1..=8);
    let na = rng.random_range(1..=4);
    let gamma = rng.random_range(0.5..0.99);
    (TabularMdp::random(ns, na, gamma, rng), TabularPolicy::random(ns, na, rng))
}

/// Flow residuals of the exact occupancy: state-action, transition level and
/// total mass, worst of the three.
fn bellman_flow_case(rng: &mut ChaCha8Rng) -> f64 {
    let (mdp, pi) = random_problem(rng);
    let Ok(d) = exact_occupancy(&mdp, &pi) else {
        return f64::INFINITY;
    };
    let tod = transition_occupancy(&d, &mdp);
    let mass = (d.d.iter().sum::<f64>() - 1.0).abs();
    bellman_flow_residual(&d, &mdp)
        .max(bellman_transition_flow_residual(&tod, &mdp, &pi))
        .max(mass)
}

fn perturbed_transition(mdp: &TabularMdp, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let ns = mdp.n_states;
    let mix = rng.random_range(0.0..1.0);
    mdp.transition
        .chunks(ns)
        .flat_map(|row| {
            let noise = random_simplex(ns, rng);
            row.iter()
                .zip(noise)
                .map(|(p, n)| (1.0 - mix) * p + mix * n)
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Worst violation of the log-return bound over both divergences.
fn lower_bound_case(rng: &mut ChaCha8Rng) -> f64 {
    let (mdp, pi) = random_problem(rng);
    let mdp = mdp.rescale_rewards(0.1, 1.0);
    let model = perturbed_transition(&mdp, rng);
    [FDivergence::Kl, FDivergence::ChiSquared]
        .into_iter()
        .map(|div| match verify_lower_bound(&mdp, &pi, &model, div) {
            Ok(b) => b.violation(),
            Err(_) => f64::INFINITY,
        })
        .fold(0.0, f64::max)
}

/// Total variation between dual-implied and primal transition occupancies
/// on a random 3-state, 2-action problem with uniform behaviour data.
fn dual_primal_case(rng: &mut ChaCha8Rng) -> f64 {
    let mdp = TabularMdp::random(3, 2, 0.9, rng);
    let pi = TabularPolicy::random(3, 2, rng);
    let Ok(replay) = exact_occupancy(&mdp, &TabularPolicy::uniform(3, 2)) else {
        return f64::INFINITY;
    };
    let replay = transition_occupancy(&replay, &mdp);
    let div = FDivergence::ChiSquared;
    let (Ok(sol), Ok(problem)) = (
        primal_tom_solve(&mdp, &pi, &replay, div),
        TabularDualProblem::from_occupancies(&mdp, &pi, &replay, div),
    ) else {
        return f64::INFINITY;
    };
    let dual = TabularDual::fit(&problem, 20_000);
    let Ok(implied) = problem.weighted_occupancy(&dual.q) else {
        return f64::INFINITY;
    };
    let total = sol.dtod.total();
    let primal: Vec<f64> = sol.dtod.d.iter().map(|v| v / total).collect();
    total_variation(&implied, &primal)
}

/// Fenchel-Young gap violations, conjugate derivative against central
/// differences, and divergence dominance on random distribution pairs.
fn fenchel_case(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst = 0.0f64;
    for div in [FDivergence::Kl, FDivergence::ChiSquared] {
        for _ in 0..100 {
            let x = rng.random_range(1e-3..5.0);
            let y = rng.random_range(-5.0..3.0);
            let fx = div.f_value(x).unwrap_or(f64::INFINITY);
            worst = worst.max(x * y - fx - div.conjugate(y));
            // chi-squared conjugate has a kink at -2
            if div == FDivergence::ChiSquared && (y + 2.0).abs() < 1e-3 {
                continue;
            }
            let h = 1e-5;
            let fd = (div.conjugate(y + h) - div.conjugate(y - h)) / (2.0 * h);
            worst = worst.max((fd - div.conjugate_prime(y)).abs());
        }
    }
    let n = rng.random_range(2..=10);
    let p = random_simplex(n, rng);
    let q = random_simplex(n, rng);
    let chi = FDivergence::ChiSquared.divergence(&p, &q).unwrap_or(f64::NAN);
    let kl = FDivergence::Kl.divergence(&p, &q).unwrap_or(f64::NAN);
    if !(chi + 1e-12 >= kl) {
        worst = worst.max(if chi.is_nan() || kl.is_nan() { f64::INFINITY } else { kl - chi });
    }
    worst
}

pub fn run(suite: Suite, seeds: u64, first_seed: u64) -> SuiteReport {
    let mut report = SuiteReport {
        suite,
        cases: 0,
        failures: 0,
        worst: 0.0,
        worst_seed: first_seed,
    };
    for seed in first_seed..first_seed + seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual = match suite {
            Suite::BellmanFlow => bellman_flow_case(&mut rng),
            Suite::LowerBound => lower_bound_case(&mut rng),
            Suite::DualPrimal => dual_primal_case(&mut rng),
            Suite::Fenchel => fenchel_case(&mut rng),
        };
        report.cases += 1;
        // NaN counts as a failure
        if !(residual <= suite.tolerance()) {
            report.failures += 1;
        }
        if !(residual <= report.worst) {
            report.worst = residual;
            report.worst_seed = seed;
        }
    }
    report
}
