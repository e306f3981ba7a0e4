//! Exact tabular occupancy machinery.
//!
//! State-action occupancies come from a direct linear solve of the transpose
//! Bellman equation. Transition occupancies `d((s,a),s') = T(s'|s,a) d(s,a)`
//! are built on top, together with flow-constraint residuals, the log-return
//! lower bound check, and a constrained primal solver used as ground truth
//! for the dual weight computation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::fdiv::FDivergence;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `T[s][a][s']`, flattened as `(s * n_actions + a) * n_states + s'`.
    pub transition: Vec<f64>,
    /// `R[s][a]`, flattened as `s * n_actions + a`.
    pub reward: Vec<f64>,
    pub initial: Vec<f64>,
    pub gamma: f64,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let mdp = Self {
            n_states,
            n_actions,
            transition,
            reward,
            initial,
            gamma,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(Error::InvalidArgument("empty state or action space".into()));
        }
        if self.transition.len() != ns * na * ns {
            return Err(Error::dims("transition tensor", ns * na * ns, self.transition.len()));
        }
        if self.reward.len() != ns * na {
            return Err(Error::dims("reward table", ns * na, self.reward.len()));
        }
        if self.initial.len() != ns {
            return Err(Error::dims("initial distribution", ns, self.initial.len()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::SingularSystem("discount must lie strictly inside (0, 1)"));
        }
        check_rows(&self.transition, ns, "transition row")?;
        check_rows(&self.initial, ns, "initial distribution")?;
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidArgument("rewards must be finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn t(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s_next]
    }

    #[inline]
    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn with_transition(&self, transition: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            transition,
            self.reward.clone(),
            self.initial.clone(),
            self.gamma,
        )
    }

    /// Affine map of the rewards onto `[lo, hi]` (constant rewards go to `hi`).
    pub fn rescale_rewards(&self, lo: f64, hi: f64) -> Self {
        let min = self.reward.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.reward.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let reward = if max - min < 1e-15 {
            vec![hi; self.reward.len()]
        } else {
            self.reward
                .iter()
                .map(|r| lo + (hi - lo) * (r - min) / (max - min))
                .collect()
        };
        Self {
            reward,
            ..self.clone()
        }
    }

    /// Random dense MDP: rows drawn uniformly then normalized, rewards in [0, 1).
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> Self {
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            transition.extend(random_simplex(n_states, rng));
        }
        let reward = (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect();
        Self {
            n_states,
            n_actions,
            transition,
            reward,
            initial: random_simplex(n_states, rng),
            gamma,
        }
    }
}

fn check_rows(values: &[f64], width: usize, what: &'static str) -> Result<()> {
    for row in values.chunks(width) {
        if row.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidArgument(format!("{what} has a negative entry")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("{what} sums to {sum}")));
        }
    }
    Ok(())
}

pub fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// `pi(a|s)`, flattened as `s * n_actions + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::dims("policy table", n_states * n_actions, probs.len()));
        }
        check_rows(&probs, n_actions, "policy row")?;
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        let probs = (0..n_states).flat_map(|_| random_simplex(n_actions, rng)).collect();
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }
}

impl crate::mdp::Policy for TabularPolicy {
    fn sample_action(&self, state: &[f64], rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let s = crate::mdp::tabular_index(state);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in self.row(s).iter().enumerate() {
            acc += p;
            if u < acc {
                return vec![a as f64];
            }
        }
        vec![(self.n_actions - 1) as f64]
    }

    fn mean_action(&self, state: &[f64]) -> Vec<f64> {
        let s = crate::mdp::tabular_index(state);
        let row = self.row(s);
        let best = (0..row.len())
            .max_by(|&i, &j| row[i].total_cmp(&row[j]))
            .unwrap_or(0);
        vec![best as f64]
    }
}

/// `d(s, a)`, flattened as `s * n_actions + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub d: Vec<f64>,
}

impl OccupancyTable {
    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.d[s * self.n_actions + a]
    }

    pub fn state_marginal(&self) -> Vec<f64> {
        self.d.chunks(self.n_actions).map(|row| row.iter().sum()).collect()
    }
}

/// `d((s, a), s')`, flattened as `(s * n_actions + a) * n_states + s'`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionOccupancyTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub d: Vec<f64>,
}

impl TransitionOccupancyTable {
    pub fn new(n_states: usize, n_actions: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n_states * n_actions * n_states {
            return Err(Error::dims("transition occupancy", n_states * n_actions * n_states, d.len()));
        }
        Ok(Self {
            n_states,
            n_actions,
            d,
        })
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.d[(s * self.n_actions + a) * self.n_states + s_next]
    }

    /// `sum_{s'} d((s, a), s')`
    pub fn pair_marginal(&self) -> OccupancyTable {
        OccupancyTable {
            n_states: self.n_states,
            n_actions: self.n_actions,
            d: self.d.chunks(self.n_states).map(|row| row.iter().sum()).collect(),
        }
    }

    /// `sum_{s~, a~} d((s~, a~), s)`: mass flowing into each state.
    pub fn inflow(&self) -> Vec<f64> {
        let mut inflow = vec![0.0; self.n_states];
        for row in self.d.chunks(self.n_states) {
            for (acc, v) in inflow.iter_mut().zip(row) {
                *acc += v;
            }
        }
        inflow
    }

    pub fn total(&self) -> f64 {
        self.d.iter().sum()
    }
}

fn check_policy(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<()> {
    if policy.n_states != mdp.n_states || policy.n_actions != mdp.n_actions {
        return Err(Error::dims(
            "policy shape",
            mdp.n_states * mdp.n_actions,
            policy.n_states * policy.n_actions,
        ));
    }
    Ok(())
}

/// Solves `(I - gamma P_pi^T) d = (1 - gamma) mu0 (x) pi` over state-action pairs.
pub fn exact_occupancy(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<OccupancyTable> {
    mdp.validate()?;
    check_policy(mdp, policy)?;
    let (ns, na, g) = (mdp.n_states, mdp.n_actions, mdp.gamma);
    let n = ns * na;
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for s in 0..ns {
        for a in 0..na {
            let row = s * na + a;
            let pi = policy.p(s, a);
            rhs[row] = (1.0 - g) * mdp.initial[s] * pi;
            for sp in 0..ns {
                for ap in 0..na {
                    m[(row, sp * na + ap)] -= g * pi * mdp.t(sp, ap, s);
                }
            }
        }
    }
    let d = m
        .lu()
        .solve(&rhs)
        .ok_or(Error::SingularSystem("occupancy system is singular"))?;
    Ok(OccupancyTable {
        n_states: ns,
        n_actions: na,
        d: d.iter().copied().collect(),
    })
}

/// Max-norm residual of the per-pair transpose Bellman equation.
pub fn occupancy_residual(d: &OccupancyTable, mdp: &TabularMdp, policy: &TabularPolicy) -> f64 {
    let (ns, na, g) = (mdp.n_states, mdp.n_actions, mdp.gamma);
    let inflow = state_inflow(d, mdp);
    let mut worst = 0.0f64;
    for s in 0..ns {
        for a in 0..na {
            let pi = policy.p(s, a);
            let rhs = (1.0 - g) * mdp.initial[s] * pi + g * pi * inflow[s];
            worst = worst.max((d.get(s, a) - rhs).abs());
        }
    }
    worst
}

/// Max-norm residual of the state-level flow constraint
/// `sum_a d(s,a) = (1-gamma) mu0(s) + gamma sum T(s|s~,a~) d(s~,a~)`.
pub fn bellman_flow_residual(d: &OccupancyTable, mdp: &TabularMdp) -> f64 {
    let inflow = state_inflow(d, mdp);
    d.state_marginal()
        .iter()
        .enumerate()
        .map(|(s, m)| (m - (1.0 - mdp.gamma) * mdp.initial[s] - mdp.gamma * inflow[s]).abs())
        .fold(0.0, f64::max)
}

fn state_inflow(d: &OccupancyTable, mdp: &TabularMdp) -> Vec<f64> {
    let mut inflow = vec![0.0; mdp.n_states];
    for sp in 0..mdp.n_states {
        for ap in 0..mdp.n_actions {
            let w = d.get(sp, ap);
            for (s, acc) in inflow.iter_mut().enumerate() {
                *acc += mdp.t(sp, ap, s) * w;
            }
        }
    }
    inflow
}

pub fn transition_occupancy(d: &OccupancyTable, mdp: &TabularMdp) -> TransitionOccupancyTable {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut out = Vec::with_capacity(ns * na * ns);
    for s in 0..ns {
        for a in 0..na {
            let w = d.get(s, a);
            out.extend((0..ns).map(|sp| mdp.t(s, a, sp) * w));
        }
    }
    TransitionOccupancyTable {
        n_states: ns,
        n_actions: na,
        d: out,
    }
}

/// Transition kernel backed out of a transition occupancy. Rows with zero
/// mass are left undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredTransition {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
    pub defined: Vec<bool>,
}

impl RecoveredTransition {
    pub fn row(&self, s: usize, a: usize) -> Result<&[f64]> {
        let k = s * self.n_actions + a;
        if !self.defined[k] {
            return Err(Error::UndefinedRow { state: s, action: a });
        }
        Ok(&self.probs[k * self.n_states..(k + 1) * self.n_states])
    }

    /// Fill undefined rows with `fallback` to obtain a complete kernel.
    pub fn complete_with(&self, fallback: &[f64]) -> Vec<f64> {
        let mut out = self.probs.clone();
        for (k, ok) in self.defined.iter().enumerate() {
            if !ok {
                let span = k * self.n_states..(k + 1) * self.n_states;
                out[span.clone()].copy_from_slice(&fallback[span]);
            }
        }
        out
    }
}

pub fn recover_transition(dtod: &TransitionOccupancyTable) -> RecoveredTransition {
    let ns = dtod.n_states;
    let mut probs = vec![0.0; dtod.d.len()];
    let mut defined = Vec::with_capacity(dtod.n_states * dtod.n_actions);
    for (k, row) in dtod.d.chunks(ns).enumerate() {
        let mass: f64 = row.iter().sum();
        if mass > 0.0 {
            for (out, v) in probs[k * ns..(k + 1) * ns].iter_mut().zip(row) {
                *out = v / mass;
            }
            defined.push(true);
        } else {
            defined.push(false);
        }
    }
    RecoveredTransition {
        n_states: ns,
        n_actions: dtod.n_actions,
        probs,
        defined,
    }
}

/// Max-norm residual of
/// `d((s,a),s') = (1-gamma) mu0(s) T(s'|s,a) pi(a|s) + gamma T(s'|s,a) pi(a|s) sum d((s~,a~),s)`.
pub fn bellman_transition_flow_residual(
    dtod: &TransitionOccupancyTable,
    mdp: &TabularMdp,
    policy: &TabularPolicy,
) -> f64 {
    let (ns, na, g) = (mdp.n_states, mdp.n_actions, mdp.gamma);
    let inflow = dtod.inflow();
    let mut worst = 0.0f64;
    for s in 0..ns {
        for a in 0..na {
            let pi = policy.p(s, a);
            for sp in 0..ns {
                let t = mdp.t(s, a, sp);
                let rhs = (1.0 - g) * mdp.initial[s] * t * pi + g * t * pi * inflow[s];
                worst = worst.max((dtod.get(s, a, sp) - rhs).abs());
            }
        }
    }
    worst
}

/// `J = E_d[R] / (1 - gamma)`
pub fn return_from_occupancy(d: &OccupancyTable, mdp: &TabularMdp) -> f64 {
    d.d.iter().zip(&mdp.reward).map(|(w, r)| w * r).sum::<f64>() / (1.0 - mdp.gamma)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowerBound {
    /// `log E_{d_T}[R]`
    pub lhs: f64,
    /// `-D_f(d_model || d_T) + E_{d_model}[log R]`
    pub rhs: f64,
}

impl LowerBound {
    pub fn violation(&self) -> f64 {
        (self.rhs - self.lhs).max(0.0)
    }
}

/// Both sides of the log-return lower bound, computed from exact transition
/// occupancies of `policy` under the true dynamics and under `model_transition`.
pub fn verify_lower_bound(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    model_transition: &[f64],
    divergence: FDivergence,
) -> Result<LowerBound> {
    if let Some(r) = mdp.reward.iter().find(|r| **r <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rewards must be strictly positive for log R, found {r}"
        )));
    }
    let model = mdp.with_transition(model_transition.to_vec())?;
    let true_tod = transition_occupancy(&exact_occupancy(mdp, policy)?, mdp);
    let model_tod = transition_occupancy(&exact_occupancy(&model, policy)?, &model);
    let (ns, na) = (mdp.n_states, mdp.n_actions);

    let mut expected_reward = 0.0;
    let mut expected_log_reward = 0.0;
    for s in 0..ns {
        for a in 0..na {
            let r = mdp.r(s, a);
            for sp in 0..ns {
                expected_reward += true_tod.get(s, a, sp) * r;
                expected_log_reward += model_tod.get(s, a, sp) * r.ln();
            }
        }
    }
    let div = divergence.divergence(&model_tod.d, &true_tod.d)?;
    Ok(LowerBound {
        lhs: expected_reward.ln(),
        rhs: -div + expected_log_reward,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalSolution {
    pub dtod: TransitionOccupancyTable,
    /// Multipliers of the flow constraints, one per state-action pair. At the
    /// optimum these coincide with the dual Q-function.
    pub multipliers: Vec<f64>,
    pub objective: f64,
    pub constraint_residual: f64,
    pub outer_iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PrimalSolverOptions {
    pub residual_tol: f64,
    pub objective_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for PrimalSolverOptions {
    fn default() -> Self {
        Self {
            residual_tol: 1e-5,
            objective_tol: 1e-8,
            max_outer: 400,
            max_inner: 20_000,
        }
    }
}

/// Regularized transition-occupancy matching primal, solved directly:
///
/// maximize `E_d[r] - D_f(d || d_replay)` with `r = log(d_pi / d_replay)`
/// subject to the pair-level flow constraints
/// `sum_{s'} d((s,a),s') = (1-gamma) mu0(s) pi(a|s) + gamma pi(a|s) sum d((s~,a~),s)`
/// and `d >= 0` on the support of `d_replay`.
///
/// Solved by an augmented Lagrangian whose penalty weight climbs through
/// `10^k, k = 0..6`, with accelerated projected gradient inner solves.
pub fn primal_tom_solve(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    replay_dtod: &TransitionOccupancyTable,
    divergence: FDivergence,
) -> Result<PrimalSolution> {
    primal_tom_solve_with(mdp, policy, replay_dtod, divergence, PrimalSolverOptions::default())
}

pub fn primal_tom_solve_with(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    replay_dtod: &TransitionOccupancyTable,
    divergence: FDivergence,
    opts: PrimalSolverOptions,
) -> Result<PrimalSolution> {
    mdp.validate()?;
    check_policy(mdp, policy)?;
    let (ns, na, g) = (mdp.n_states, mdp.n_actions, mdp.gamma);
    if replay_dtod.n_states != ns || replay_dtod.n_actions != na {
        return Err(Error::dims("replay occupancy", ns * na * ns, replay_dtod.d.len()));
    }
    let target = transition_occupancy(&exact_occupancy(mdp, policy)?, mdp);
    let q = &replay_dtod.d;
    if q.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument("replay occupancy must be nonnegative".into()));
    }
    let support: Vec<usize> = (0..q.len()).filter(|&i| q[i] > 0.0).collect();
    if support.is_empty() {
        return Err(Error::Infeasible("replay occupancy has empty support".into()));
    }
    let relevance: Vec<f64> = support
        .iter()
        .map(|&i| (target.d[i].max(1e-300) / q[i]).ln())
        .collect();
    let base: Vec<f64> = support.iter().map(|&i| q[i]).collect();

    // constraint rows: (s, a); C x - b with
    // (C x)_{s,a} = sum_{s'} x(s,a,s') - gamma pi(a|s) sum_{s~,a~} x(s~,a~,s)
    let n_cons = ns * na;
    let mut rhs = vec![0.0; n_cons];
    for s in 0..ns {
        for a in 0..na {
            rhs[s * na + a] = (1.0 - g) * mdp.initial[s] * policy.p(s, a);
        }
    }
    let coords: Vec<(usize, usize, usize)> = support
        .iter()
        .map(|&i| (i / (na * ns), (i / ns) % na, i % ns))
        .collect();
    let apply = |x: &[f64]| -> Vec<f64> {
        let mut inflow = vec![0.0; ns];
        let mut out = vec![0.0; n_cons];
        for (xv, &(s, a, sp)) in x.iter().zip(&coords) {
            out[s * na + a] += xv;
            inflow[sp] += xv;
        }
        for s in 0..ns {
            for a in 0..na {
                out[s * na + a] -= g * policy.p(s, a) * inflow[s] + rhs[s * na + a];
            }
        }
        out
    };
    // C^T y
    let apply_t = |y: &[f64]| -> Vec<f64> {
        let mut pulled = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                pulled[s] += g * policy.p(s, a) * y[s * na + a];
            }
        }
        coords
            .iter()
            .map(|&(s, a, sp)| y[s * na + a] - pulled[sp])
            .collect()
    };
    let objective = |x: &[f64]| -> f64 {
        x.iter()
            .zip(&relevance)
            .zip(&base)
            .map(|((xv, r), qv)| xv * r - qv * divergence.f_value(xv / qv).unwrap_or(f64::INFINITY))
            .sum()
    };
    let objective_grad = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(&relevance)
            .zip(&base)
            .map(|((xv, r), qv)| r - divergence.f_prime(xv / qv))
            .collect()
    };

    let mut x = base.clone();
    let mut lambda = vec![0.0; n_cons];
    let mut rho = 1.0;
    let mut prev_obj = objective(&x);
    let mut prev_res = f64::INFINITY;
    let mut residual = f64::INFINITY;
    let mut outer = 0;
    let mut converged = false;
    while outer < opts.max_outer {
        outer += 1;
        // maximize L(x) = phi(x) - lambda^T h(x) - rho/2 |h(x)|^2 over x >= 0
        let lagrangian = |x: &[f64]| -> f64 {
            let h = apply(x);
            objective(x)
                - h.iter().zip(&lambda).map(|(a, b)| a * b).sum::<f64>()
                - 0.5 * rho * h.iter().map(|v| v * v).sum::<f64>()
        };
        let lagrangian_grad = |x: &[f64]| -> Vec<f64> {
            let h = apply(x);
            let y: Vec<f64> = h.iter().zip(&lambda).map(|(hv, l)| l + rho * hv).collect();
            let ct = apply_t(&y);
            objective_grad(x).iter().zip(&ct).map(|(a, b)| a - b).collect()
        };
        x = accelerated_ascent(&x, lagrangian, lagrangian_grad, clamp_nonnegative, opts.max_inner);
        let h = apply(&x);
        for (l, hv) in lambda.iter_mut().zip(&h) {
            *l += rho * hv;
        }
        residual = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let obj = objective(&x);
        if residual < opts.residual_tol && (obj - prev_obj).abs() < opts.objective_tol {
            converged = true;
            break;
        }
        if residual > 0.25 * prev_res && rho < 1e6 {
            rho *= 10.0;
        }
        prev_res = residual;
        prev_obj = obj;
    }
    if !converged && residual >= opts.residual_tol {
        return Err(Error::Infeasible(format!(
            "flow constraints unmet on the replay support (residual {residual:.3e})"
        )));
    }
    let mut full = vec![0.0; q.len()];
    for (&i, v) in support.iter().zip(&x) {
        full[i] = *v;
    }
    Ok(PrimalSolution {
        objective: objective(&x),
        dtod: TransitionOccupancyTable {
            n_states: ns,
            n_actions: na,
            d: full,
        },
        multipliers: lambda,
        constraint_residual: residual,
        outer_iterations: outer,
    })
}

/// Value of the regularized primal objective `E_d[r] - D_f(d || q)` for an
/// arbitrary candidate, with `r = log(d_pi / q)`.
pub fn primal_objective(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    replay_dtod: &TransitionOccupancyTable,
    candidate: &TransitionOccupancyTable,
    divergence: FDivergence,
) -> Result<f64> {
    let target = transition_occupancy(&exact_occupancy(mdp, policy)?, mdp);
    let mut total = 0.0;
    for ((&x, &q), &p) in candidate.d.iter().zip(&replay_dtod.d).zip(&target.d) {
        if q > 0.0 {
            total += x * (p.max(1e-300) / q).ln() - q * divergence.f_value(x / q)?;
        } else if x > 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
    }
    Ok(total)
}

pub(crate) fn clamp_nonnegative(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// Maximizes a smooth concave `f` over a convex set given by `project`, using
/// FISTA with backtracking and adaptive restart.
pub(crate) fn accelerated_ascent<F, G, P>(start: &[f64], f: F, grad: G, project: P, max_iter: usize) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
    P: Fn(&mut [f64]),
{
    let project = |mut v: Vec<f64>| -> Vec<f64> {
        project(&mut v);
        v
    };
    let mut x = start.to_vec();
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut step = 1.0f64;
    let mut fx = f(&x);
    for _ in 0..max_iter {
        let gy = grad(&y);
        let fy = f(&y);
        let mut candidate;
        loop {
            candidate = project(y.iter().zip(&gy).map(|(a, b)| a + step * b).collect());
            let diff: Vec<f64> = candidate.iter().zip(&y).map(|(a, b)| a - b).collect();
            let lin: f64 = diff.iter().zip(&gy).map(|(d, gv)| d * gv).sum();
            let quad: f64 = diff.iter().map(|d| d * d).sum::<f64>() / (2.0 * step);
            let fc = f(&candidate);
            if fc.is_finite() && fc >= fy + lin - quad - 1e-15 * fy.abs() {
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                break;
            }
        }
        let fc = f(&candidate);
        let moved: f64 = candidate
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if fc < fx {
            // restart momentum
            t = 1.0;
            y = x.clone();
            step *= 2.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = candidate
            .iter()
            .zip(&x)
            .map(|(c, p)| c + (t - 1.0) / t_next * (c - p))
            .collect();
        x = candidate;
        fx = fc;
        t = t_next;
        step *= 1.25;
        if moved < 1e-14 {
            break;
        }
    }
    x
}
