//! Exact representation and evaluation of finite MDPs and tabular policies.
//!
//! Everything in this module is computed by direct dense linear solves, so
//! the quantities (`V`, `Q`, `A`, the discounted visitation `rho`, and the
//! total expected reward `eta`) are exact up to floating point. The
//! deterministic trust-region track builds its improvement bounds on top of
//! these.

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating probability vectors on construction.
pub const PROB_TOL: f64 = 1e-12;

/// A finite MDP `(S, A, P, r, rho0, gamma)` with exact dynamics.
///
/// Rows of the transition tensor and the initial distribution are validated
/// to sum to one within [`PROB_TOL`] and then renormalized exactly, so long
/// runs cannot drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpData", into = "MdpData")]
pub struct Mdp {
    n_states: usize,
    n_actions: usize,
    /// Row-major `[s][a][s']`.
    transition: Vec<f64>,
    /// Row-major `[s][a]`.
    reward: Vec<f64>,
    initial_dist: Vec<f64>,
    discount: f64,
}

/// Serialization schema: `{n_states, n_actions, transition (row-major),
/// reward, initial_dist, discount}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MdpData {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    initial_dist: Vec<f64>,
    discount: f64,
}

impl TryFrom<MdpData> for Mdp {
    type Error = Error;
    fn try_from(d: MdpData) -> Result<Self> {
        Mdp::new(
            d.n_states,
            d.n_actions,
            d.transition,
            d.reward,
            d.initial_dist,
            d.discount,
        )
    }
}

impl From<Mdp> for MdpData {
    fn from(m: Mdp) -> Self {
        MdpData {
            n_states: m.n_states,
            n_actions: m.n_actions,
            transition: m.transition,
            reward: m.reward,
            initial_dist: m.initial_dist,
            discount: m.discount,
        }
    }
}

fn normalize_in_place(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    for p in row {
        *p /= sum;
    }
}

impl Mdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        mut transition: Vec<f64>,
        reward: Vec<f64>,
        mut initial_dist: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp("zero states or actions".into()));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::ShapeMismatch(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if reward.len() != n_states * n_actions {
            return Err(Error::ShapeMismatch(format!(
                "reward has {} entries, expected {}",
                reward.len(),
                n_states * n_actions
            )));
        }
        if initial_dist.len() != n_states {
            return Err(Error::ShapeMismatch(format!(
                "initial_dist has {} entries, expected {}",
                initial_dist.len(),
                n_states
            )));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::InvalidMdp(format!(
                "discount {discount} must lie strictly inside (0, 1)"
            )));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidMdp("non-finite reward".into()));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &mut transition[(s * n_actions + a) * n_states..][..n_states];
                if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(Error::InvalidMdp(format!(
                        "transition row ({s},{a}) has a negative or non-finite entry"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(Error::InvalidMdp(format!(
                        "transition row ({s},{a}) sums to {sum}"
                    )));
                }
                normalize_in_place(row);
            }
        }
        if initial_dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidMdp(
                "initial_dist has a negative or non-finite entry".into(),
            ));
        }
        let sum: f64 = initial_dist.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidMdp(format!("initial_dist sums to {sum}")));
        }
        normalize_in_place(&mut initial_dist);
        Ok(Mdp {
            n_states,
            n_actions,
            transition,
            reward,
            initial_dist,
            discount,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// `P(s' | s, a)`.
    pub fn p(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + next]
    }

    /// The transition distribution `P(. | s, a)` as a slice.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[(s * self.n_actions + a) * self.n_states..][..self.n_states]
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// Smallest initial-state probability, the `p0` of the ratio bound.
    pub fn min_initial_prob(&self) -> f64 {
        self.initial_dist.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("mdp serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// A tabular stochastic policy `pi(a|s)`; rows validated and renormalized on
/// construction like the MDP distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    /// Row-major `[s][a]`.
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, mut probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::ShapeMismatch(format!(
                "policy has {} entries, expected {}",
                probs.len(),
                n_states * n_actions
            )));
        }
        for s in 0..n_states {
            let row = &mut probs[s * n_actions..][..n_actions];
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidPolicy(format!(
                    "row {s} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                return Err(Error::InvalidPolicy(format!("row {s} sums to {sum}")));
            }
            normalize_in_place(row);
        }
        Ok(TabularPolicy {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// A deterministic policy taking `actions[s]` at each state.
    pub fn deterministic(n_states: usize, n_actions: usize, actions: &[usize]) -> Result<Self> {
        if actions.len() != n_states {
            return Err(Error::ShapeMismatch("one action per state".into()));
        }
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::InvalidPolicy(format!("action {a} out of range")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(TabularPolicy {
            n_states,
            n_actions,
            probs,
        })
    }

    /// A strictly positive random policy, rows drawn uniformly then
    /// normalized.
    pub fn random(n_states: usize, n_actions: usize, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut probs = vec![0.0; n_states * n_actions];
        for row in probs.chunks_mut(n_actions) {
            for p in row.iter_mut() {
                *p = rng.random_range(0.1..1.1);
            }
            normalize_in_place(row);
        }
        TabularPolicy {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..][..self.n_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Mean total-variation step to another policy, weighted by `weights`:
    /// `sum_s w(s) * D_TV(self(.|s), other(.|s))`.
    pub fn weighted_tv_distance(&self, other: &TabularPolicy, weights: &[f64]) -> f64 {
        let mut total = 0.0;
        for s in 0..self.n_states {
            let mut tv = 0.0;
            for a in 0..self.n_actions {
                tv += (self.prob(s, a) - other.prob(s, a)).abs();
            }
            total += weights[s] * 0.5 * tv;
        }
        total
    }
}

/// Exact evaluation of a tabular policy: value functions, advantages,
/// discounted visitation and total expected reward.
#[derive(Debug, Clone)]
pub struct EvalResult {
    /// `V_pi[s]`.
    pub v: Vec<f64>,
    /// `Q_pi[s][a]`, row-major.
    pub q: Vec<f64>,
    /// `A_pi[s][a] = Q - V`, row-major.
    pub adv: Vec<f64>,
    /// Unnormalized discounted visitation `rho_pi[s]`; sums to `1/(1-gamma)`.
    pub visit: Vec<f64>,
    /// `eta(pi) = sum_s rho0(s) V(s)`.
    pub eta: f64,
    n_actions: usize,
}

impl EvalResult {
    pub fn q_at(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    pub fn adv_at(&self, s: usize, a: usize) -> f64 {
        self.adv[s * self.n_actions + a]
    }

    /// `max_a A(s, a)` together with the lowest-index maximizing action.
    pub fn best_advantage(&self, s: usize) -> (usize, f64) {
        let row = &self.adv[s * self.n_actions..][..self.n_actions];
        let mut best = (0, row[0]);
        for (a, &v) in row.iter().enumerate().skip(1) {
            if v > best.1 {
                best = (a, v);
            }
        }
        best
    }

    /// `max_{s,a} |A(s,a)|`, the `A-bar` of the ratio bound.
    pub fn max_abs_advantage(&self) -> f64 {
        self.adv.iter().fold(0.0, |m, a| m.max(a.abs()))
    }
}

fn check_shapes(mdp: &Mdp, policy: &TabularPolicy) -> Result<()> {
    if policy.n_states != mdp.n_states || policy.n_actions != mdp.n_actions {
        return Err(Error::ShapeMismatch(format!(
            "policy is {}x{}, MDP is {}x{}",
            policy.n_states, policy.n_actions, mdp.n_states, mdp.n_actions
        )));
    }
    Ok(())
}

/// Evaluate a policy exactly by direct dense solves:
/// `(I - gamma P_pi) V = r_pi` and `(I - gamma P_pi^T) rho = rho0`.
pub fn evaluate(mdp: &Mdp, policy: &TabularPolicy) -> Result<EvalResult> {
    check_shapes(mdp, policy)?;
    let n = mdp.n_states;
    let gamma = mdp.discount;

    let mut p_pi = DMatrix::<f64>::zeros(n, n);
    let mut r_pi = DVector::<f64>::zeros(n);
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let w = policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            r_pi[s] += w * mdp.r(s, a);
            for (next, &p) in mdp.transition_row(s, a).iter().enumerate() {
                p_pi[(s, next)] += w * p;
            }
        }
    }

    let system = DMatrix::<f64>::identity(n, n) - gamma * &p_pi;
    let v = system
        .clone()
        .lu()
        .solve(&r_pi)
        .ok_or_else(|| Error::SingularSystem("(I - gamma P_pi) V = r_pi".into()))?;

    let rho0 = DVector::from_column_slice(mdp.initial_dist());
    let visit = system
        .transpose()
        .lu()
        .solve(&rho0)
        .ok_or_else(|| Error::SingularSystem("(I - gamma P_pi^T) rho = rho0".into()))?;

    let mut q = vec![0.0; n * mdp.n_actions];
    let mut adv = vec![0.0; n * mdp.n_actions];
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let mut qa = mdp.r(s, a);
            for (next, &p) in mdp.transition_row(s, a).iter().enumerate() {
                qa += gamma * p * v[next];
            }
            q[s * mdp.n_actions + a] = qa;
            adv[s * mdp.n_actions + a] = qa - v[s];
        }
    }

    let eta = rho0.dot(&v);
    Ok(EvalResult {
        v: v.as_slice().to_vec(),
        q,
        adv,
        visit: visit.as_slice().to_vec(),
        eta,
        n_actions: mdp.n_actions,
    })
}

/// The surrogate objective
/// `L_base(candidate) = eta(base) + sum_s rho_base(s) sum_a candidate(a|s) A_base(s,a)`.
pub fn surrogate_l(
    mdp: &Mdp,
    base: &TabularPolicy,
    base_eval: &EvalResult,
    candidate: &TabularPolicy,
) -> Result<f64> {
    check_shapes(mdp, base)?;
    check_shapes(mdp, candidate)?;
    Ok(base_eval.eta + policy_advantage(mdp, base_eval, candidate)?)
}

/// The policy advantage of `candidate` with respect to the evaluated base:
/// `sum_s rho_base(s) sum_a candidate(a|s) A_base(s,a)`.
pub fn policy_advantage(
    mdp: &Mdp,
    base_eval: &EvalResult,
    candidate: &TabularPolicy,
) -> Result<f64> {
    check_shapes(mdp, candidate)?;
    let mut total = 0.0;
    for s in 0..mdp.n_states {
        let mut inner = 0.0;
        for a in 0..mdp.n_actions {
            inner += candidate.prob(s, a) * base_eval.adv_at(s, a);
        }
        total += base_eval.visit[s] * inner;
    }
    Ok(total)
}

/// The optimal policy advantage `A* = sum_s rho(s) max_a A(s,a)`.
///
/// Nonnegative for every policy, and zero exactly at an optimal policy.
pub fn optimal_advantage(mdp: &Mdp, base_eval: &EvalResult) -> f64 {
    (0..mdp.n_states)
        .map(|s| base_eval.visit[s] * base_eval.best_advantage(s).1)
        .sum()
}

/// The greedy (argmax-advantage) policy of an evaluation, ties broken by the
/// lowest action index.
pub fn greedy_policy(mdp: &Mdp, base_eval: &EvalResult) -> TabularPolicy {
    let actions: Vec<usize> = (0..mdp.n_states)
        .map(|s| base_eval.best_advantage(s).0)
        .collect();
    TabularPolicy::deterministic(mdp.n_states, mdp.n_actions, &actions)
        .expect("greedy actions in range")
}

/// Value iteration to tolerance `tol` on the sup-norm change, returning the
/// greedy policy of the converged value function and its exact `eta` (via
/// [`evaluate`], not the iterate).
pub fn value_iteration(mdp: &Mdp, tol: f64) -> Result<(TabularPolicy, f64)> {
    let n = mdp.n_states;
    let mut v = vec![0.0; n];
    // gamma < 1 contracts, so this bound is generous.
    let max_sweeps = 1_000_000;
    for _ in 0..max_sweeps {
        let mut v_new = vec![0.0; n];
        let mut delta: f64 = 0.0;
        for s in 0..n {
            let mut best = f64::NEG_INFINITY;
            for a in 0..mdp.n_actions {
                let mut qa = mdp.r(s, a);
                for (next, &p) in mdp.transition_row(s, a).iter().enumerate() {
                    qa += mdp.discount() * p * v[next];
                }
                if qa > best {
                    best = qa;
                }
            }
            v_new[s] = best;
            delta = delta.max((v_new[s] - v[s]).abs());
        }
        v = v_new;
        if delta < tol {
            break;
        }
    }
    // Greedy extraction with lowest-index tie breaking.
    let mut actions = vec![0usize; n];
    for s in 0..n {
        let mut best_a = 0;
        let mut best = f64::NEG_INFINITY;
        for a in 0..mdp.n_actions {
            let mut qa = mdp.r(s, a);
            for (next, &p) in mdp.transition_row(s, a).iter().enumerate() {
                qa += mdp.discount() * p * v[next];
            }
            if qa > best {
                best = qa;
                best_a = a;
            }
        }
        actions[s] = best_a;
    }
    let policy = TabularPolicy::deterministic(n, mdp.n_actions, &actions)?;
    let eta = evaluate(mdp, &policy)?.eta;
    Ok((policy, eta))
}

/// A seeded random MDP with well-mixed dynamics, rewards in `[-1, 1]` and a
/// strictly positive initial distribution.
pub fn random_mdp(n_states: usize, n_actions: usize, discount: f64, seed: u64) -> Mdp {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    for row in transition.chunks_mut(n_states) {
        for p in row.iter_mut() {
            *p = rng.random_range(0.05..1.05);
        }
        normalize_in_place(row);
    }
    let reward: Vec<f64> = (0..n_states * n_actions)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let mut initial_dist: Vec<f64> = (0..n_states).map(|_| rng.random_range(0.5..1.5)).collect();
    normalize_in_place(&mut initial_dist);
    Mdp::new(n_states, n_actions, transition, reward, initial_dist, discount)
        .expect("generated MDP is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_state_mdp() -> Mdp {
        Mdp::new(1, 1, vec![1.0], vec![1.0], vec![1.0], 0.9).unwrap()
    }

    #[test]
    fn single_state_geometric_series() {
        let mdp = single_state_mdp();
        let policy = TabularPolicy::uniform(1, 1);
        let eval = evaluate(&mdp, &policy).unwrap();
        assert!((eval.v[0] - 10.0).abs() < 1e-9);
        assert!((eval.eta - 10.0).abs() < 1e-9);
        assert!(eval.adv[0].abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Mdp::new(1, 1, vec![0.5], vec![1.0], vec![1.0], 0.9).is_err());
        assert!(Mdp::new(1, 1, vec![1.0], vec![f64::NAN], vec![1.0], 0.9).is_err());
        assert!(Mdp::new(1, 1, vec![1.0], vec![1.0], vec![1.0], 1.0).is_err());
        assert!(Mdp::new(1, 1, vec![1.0], vec![1.0], vec![0.99], 0.9).is_err());
        assert!(TabularPolicy::new(1, 2, vec![0.7, 0.2]).is_err());
        assert!(TabularPolicy::new(1, 2, vec![-0.1, 1.1]).is_err());
    }

    fn bellman_consistency(mdp: &Mdp, policy: &TabularPolicy, eval: &EvalResult) {
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                let mut expected = mdp.r(s, a);
                for (next, &p) in mdp.transition_row(s, a).iter().enumerate() {
                    expected += mdp.discount() * p * eval.v[next];
                }
                assert!((eval.q_at(s, a) - expected).abs() < 1e-9);
            }
            let v_from_q: f64 = (0..mdp.n_actions())
                .map(|a| policy.prob(s, a) * eval.q_at(s, a))
                .sum();
            assert!((eval.v[s] - v_from_q).abs() < 1e-9);
            let mean_adv: f64 = (0..mdp.n_actions())
                .map(|a| policy.prob(s, a) * eval.adv_at(s, a))
                .sum();
            assert!(mean_adv.abs() < 1e-9);
        }
        let visit_sum: f64 = eval.visit.iter().sum();
        assert!((visit_sum - 1.0 / (1.0 - mdp.discount())).abs() < 1e-9);
        for s in 0..mdp.n_states() {
            assert!(eval.visit[s] >= mdp.initial_dist()[s] - 1e-12);
        }
        let eta: f64 = mdp
            .initial_dist()
            .iter()
            .zip(&eval.v)
            .map(|(p, v)| p * v)
            .sum();
        assert!((eval.eta - eta).abs() < 1e-9);
    }

    #[test]
    fn evaluation_invariants_on_random_instances() {
        for seed in 0..20 {
            let mdp = random_mdp(6, 3, 0.9, seed);
            let policy = TabularPolicy::random(6, 3, seed + 100);
            let eval = evaluate(&mdp, &policy).unwrap();
            bellman_consistency(&mdp, &policy, &eval);
        }
    }

    #[test]
    fn monte_carlo_oracle_matches_exact_eta() {
        // Independent oracle: simulate the MDP directly, a million seeded
        // trajectories truncated where the discount tail is negligible.
        let mdp = random_mdp(5, 3, 0.9, 42);
        let policy = TabularPolicy::random(5, 3, 43);
        let exact = evaluate(&mdp, &policy).unwrap().eta;

        let mut rng = StdRng::seed_from_u64(7);
        let n_traj = 1_000_000usize;
        let horizon = 140; // 0.9^140 / (1 - 0.9) < 1e-5 with |r| <= 1
        let sample_from = |probs: &[f64], u: f64| -> usize {
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            probs.len() - 1
        };
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n_traj {
            let mut s = sample_from(mdp.initial_dist(), rng.random::<f64>());
            let mut ret = 0.0;
            let mut disc = 1.0;
            for _ in 0..horizon {
                let a = sample_from(policy.row(s), rng.random::<f64>());
                ret += disc * mdp.r(s, a);
                disc *= mdp.discount();
                s = sample_from(mdp.transition_row(s, a), rng.random::<f64>());
            }
            sum += ret;
            sum_sq += ret * ret;
        }
        let mean = sum / n_traj as f64;
        let var = (sum_sq - sum * sum / n_traj as f64) / (n_traj as f64 - 1.0);
        let se = (var / n_traj as f64).sqrt();
        assert!(
            (exact - mean).abs() <= 3.0 * se + 1e-4,
            "exact {exact} vs MC {mean} (se {se})"
        );
    }

    #[test]
    fn surrogate_at_base_is_eta() {
        let mdp = random_mdp(5, 3, 0.9, 1);
        let base = TabularPolicy::random(5, 3, 2);
        let eval = evaluate(&mdp, &base).unwrap();
        let l = surrogate_l(&mdp, &base, &eval, &base).unwrap();
        assert!((l - eval.eta).abs() < 1e-12 * eval.eta.abs().max(1.0));
    }

    #[test]
    fn surrogate_at_greedy_adds_optimal_advantage() {
        let mdp = random_mdp(5, 3, 0.9, 3);
        let base = TabularPolicy::random(5, 3, 4);
        let eval = evaluate(&mdp, &base).unwrap();
        let greedy = greedy_policy(&mdp, &eval);
        let l = surrogate_l(&mdp, &base, &eval, &greedy).unwrap();
        let astar = optimal_advantage(&mdp, &eval);
        assert!((l - (eval.eta + astar)).abs() < 1e-10);
        assert!(astar >= 0.0);
    }

    #[test]
    fn surrogate_matches_brute_force_double_sum() {
        let mdp = random_mdp(2, 2, 0.9, 5);
        let base = TabularPolicy::random(2, 2, 6);
        let candidate = TabularPolicy::random(2, 2, 7);
        let eval = evaluate(&mdp, &base).unwrap();
        // Brute-force oracle written against the definition.
        let mut expected = eval.eta;
        for s in 0..2 {
            for a in 0..2 {
                expected += eval.visit[s] * candidate.prob(s, a) * eval.adv_at(s, a);
            }
        }
        let l = surrogate_l(&mdp, &base, &eval, &candidate).unwrap();
        assert!((l - expected).abs() < 1e-12);
    }

    #[test]
    fn policy_advantage_identity() {
        let mdp = random_mdp(5, 3, 0.9, 8);
        let base = TabularPolicy::random(5, 3, 9);
        let eval = evaluate(&mdp, &base).unwrap();
        assert!(policy_advantage(&mdp, &eval, &base).unwrap().abs() < 1e-12);

        let candidate = TabularPolicy::random(5, 3, 10);
        let pa = policy_advantage(&mdp, &eval, &candidate).unwrap();
        let l = surrogate_l(&mdp, &base, &eval, &candidate).unwrap();
        assert!((pa - (l - eval.eta)).abs() < 1e-12);

        let greedy = greedy_policy(&mdp, &eval);
        assert!(policy_advantage(&mdp, &eval, &greedy).unwrap() >= 0.0);
    }

    #[test]
    fn optimal_advantage_zero_iff_optimal() {
        let mdp = random_mdp(5, 3, 0.9, 11);
        let (opt, _) = value_iteration(&mdp, 1e-13).unwrap();
        let eval = evaluate(&mdp, &opt).unwrap();
        assert!(optimal_advantage(&mdp, &eval).abs() < 1e-9);

        let uniform = TabularPolicy::uniform(5, 3);
        let eval_u = evaluate(&mdp, &uniform).unwrap();
        assert!(optimal_advantage(&mdp, &eval_u) > 1e-3);

        // Single-action MDP: the only policy is optimal.
        let mdp1 = random_mdp(4, 1, 0.9, 12);
        let only = TabularPolicy::uniform(4, 1);
        let eval1 = evaluate(&mdp1, &only).unwrap();
        assert!(optimal_advantage(&mdp1, &eval1).abs() < 1e-12);
    }

    #[test]
    fn value_iteration_dominates_random_policies() {
        let mdp = single_state_mdp();
        let (_, eta) = value_iteration(&mdp, 1e-12).unwrap();
        assert!((eta - 10.0).abs() < 1e-9);

        let mdp = random_mdp(5, 3, 0.9, 13);
        let (_, eta_star) = value_iteration(&mdp, 1e-13).unwrap();
        for seed in 0..100 {
            let policy = TabularPolicy::random(5, 3, 1000 + seed);
            let eta = evaluate(&mdp, &policy).unwrap().eta;
            assert!(eta <= eta_star + 1e-9, "seed {seed}: {eta} > {eta_star}");
        }
    }

    #[test]
    fn performance_difference_identity() {
        for seed in 0..10 {
            let mdp = random_mdp(5, 3, 0.9, 200 + seed);
            let pi = TabularPolicy::random(5, 3, 300 + seed);
            let pi_new = TabularPolicy::random(5, 3, 400 + seed);
            let eval = evaluate(&mdp, &pi).unwrap();
            let eval_new = evaluate(&mdp, &pi_new).unwrap();
            let mut rhs = 0.0;
            for s in 0..5 {
                for a in 0..3 {
                    rhs += eval_new.visit[s] * pi_new.prob(s, a) * eval.adv_at(s, a);
                }
            }
            assert!((eval_new.eta - eval.eta - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn first_order_matching_of_surrogate_under_softmax() {
        // Parameterize pi = softmax(logits) per state; the gradient of the
        // surrogate at the base logits must equal the gradient of eta there.
        let mdp = random_mdp(4, 3, 0.9, 21);
        let n = 4 * 3;
        let logits0: Vec<f64> = {
            let mut rng = StdRng::seed_from_u64(22);
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let softmax_policy = |logits: &[f64]| -> TabularPolicy {
            let mut probs = vec![0.0; n];
            for s in 0..4 {
                let row = &logits[s * 3..][..3];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for a in 0..3 {
                    probs[s * 3 + a] = exps[a] / sum;
                }
            }
            TabularPolicy::new(4, 3, probs).unwrap()
        };
        let base = softmax_policy(&logits0);
        let base_eval = evaluate(&mdp, &base).unwrap();

        let eta_of = |logits: &[f64]| evaluate(&mdp, &softmax_policy(logits)).unwrap().eta;
        let l_of = |logits: &[f64]| {
            surrogate_l(&mdp, &base, &base_eval, &softmax_policy(logits)).unwrap()
        };
        let h = 1e-6;
        for i in 0..n {
            let mut plus = logits0.clone();
            let mut minus = logits0.clone();
            plus[i] += h;
            minus[i] -= h;
            let g_eta = (eta_of(&plus) - eta_of(&minus)) / (2.0 * h);
            let g_l = (l_of(&plus) - l_of(&minus)) / (2.0 * h);
            assert!(
                (g_eta - g_l).abs() < 1e-5 * (1.0 + g_eta.abs()),
                "param {i}: {g_eta} vs {g_l}"
            );
        }
    }

    #[test]
    fn json_round_trip() {
        let mdp = random_mdp(3, 2, 0.95, 31);
        let json = mdp.to_json();
        let back = Mdp::from_json(&json).unwrap();
        // Construction renormalizes rows, so equality holds to the ulp level
        // rather than bitwise.
        assert_eq!(back.n_states(), 3);
        assert_eq!(back.n_actions(), 2);
        assert_eq!(back.discount(), 0.95);
        for s in 0..3 {
            for a in 0..2 {
                assert!((back.r(s, a) - mdp.r(s, a)).abs() < 1e-14);
                for next in 0..3 {
                    assert!((back.p(s, a, next) - mdp.p(s, a, next)).abs() < 1e-14);
                }
            }
        }
        // Schema fields are spelled out.
        for key in [
            "n_states",
            "n_actions",
            "transition",
            "reward",
            "initial_dist",
            "discount",
        ] {
            assert!(json.contains(key), "missing {key}");
        }
    }

    #[test]
    fn evaluate_is_deterministic() {
        let mdp = random_mdp(5, 3, 0.9, 77);
        let policy = TabularPolicy::random(5, 3, 78);
        let a = evaluate(&mdp, &policy).unwrap();
        let b = evaluate(&mdp, &policy).unwrap();
        assert_eq!(a.v, b.v);
        assert_eq!(a.visit, b.visit);
        assert_eq!(a.eta, b.eta);
    }
}
