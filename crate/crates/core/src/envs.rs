//! Built-in desk-scale environments with known exact solutions.
//!
//! Discrete environments export their exact MDP so sampled runs can be
//! checked against the dense evaluator; the linear-dynamics environments
//! ship a moment recursion that evaluates any linear-Gaussian policy in
//! closed form.

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::mdp::Mdp;

/// Observation handed to policies: a state index for discrete tasks, a
/// feature vector for continuous ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Obs {
    Discrete(usize),
    Vector(DVector<f64>),
}

impl Obs {
    pub fn as_discrete(&self) -> Option<usize> {
        match self {
            Obs::Discrete(s) => Some(*s),
            Obs::Vector(_) => None,
        }
    }

    pub fn as_vector(&self) -> Option<&DVector<f64>> {
        match self {
            Obs::Discrete(_) => None,
            Obs::Vector(v) => Some(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(usize),
    Vector(DVector<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_obs: Obs,
    pub reward: f64,
    /// Set when the environment itself terminates the episode (absorbing
    /// state reached). Horizon truncation is applied by the collector.
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Chain,
    Gridworld,
    #[serde(rename = "point_mass_1d")]
    PointMass1d,
    #[serde(rename = "point_mass_2d")]
    PointMass2d,
    LqScalar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    /// Number of states for discrete tasks, state dimension otherwise.
    pub obs_dim: usize,
    /// Number of actions for discrete tasks, action dimension otherwise.
    pub action_dim: usize,
    pub horizon: usize,
    pub discount: f64,
}

impl EnvSpec {
    pub fn is_discrete(&self) -> bool {
        matches!(self.kind, EnvKind::Chain | EnvKind::Gridworld)
    }
}

/// A stepping interface shared by both tracks. Environments are pure
/// transition functions plus an owned RNG for their stochasticity; episode
/// bookkeeping (horizon, resets) lives in the collector.
pub trait Env {
    fn spec(&self) -> &EnvSpec;
    fn reseed(&mut self, seed: u64);
    /// Draw an initial state from `rho0`.
    fn reset(&mut self) -> Obs;
    fn step(&mut self, obs: &Obs, action: &Action) -> StepResult;
    /// Discrete environments export their exact MDP (terminal states become
    /// absorbing with zero reward; rewards are expectations over next
    /// states).
    fn exact_mdp(&self) -> Option<Mdp> {
        None
    }
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

// ---------------------------------------------------------------------------
// Chain
// ---------------------------------------------------------------------------

/// A line of `length` states. Action 1 moves right, action 0 moves left,
/// each slipping to the opposite direction with probability `slip`; moves
/// off the ends stay in place. Arriving at the last state pays +1 and ends
/// the episode. Episodes always start at state 0.
pub struct ChainEnv {
    spec: EnvSpec,
    length: usize,
    mdp: Mdp,
    rng: StdRng,
}

impl ChainEnv {
    pub fn new(seed: u64) -> Self {
        Self::with_params(8, 0.1, 0.9, 64, seed)
    }

    pub fn with_params(length: usize, slip: f64, discount: f64, horizon: usize, seed: u64) -> Self {
        assert!(length >= 2, "chain needs at least two states");
        let goal = length - 1;
        let n = length;
        let mut transition = vec![0.0; n * 2 * n];
        let mut reward = vec![0.0; n * 2];
        for s in 0..n {
            for a in 0..2 {
                let row = &mut transition[(s * 2 + a) * n..][..n];
                if s == goal {
                    row[s] = 1.0; // absorbing terminal
                    continue;
                }
                let right = (s + 1).min(goal);
                let left = s.saturating_sub(1);
                let (intended, slipped) = if a == 1 { (right, left) } else { (left, right) };
                row[intended] += 1.0 - slip;
                row[slipped] += slip;
                // Expected arrival reward.
                let mut r = 0.0;
                if intended == goal {
                    r += 1.0 - slip;
                }
                if slipped == goal {
                    r += slip;
                }
                reward[s * 2 + a] = r;
            }
        }
        let mut initial = vec![0.0; n];
        initial[0] = 1.0;
        let mdp = Mdp::new(n, 2, transition, reward, initial, discount).expect("valid chain MDP");
        ChainEnv {
            spec: EnvSpec {
                kind: EnvKind::Chain,
                obs_dim: n,
                action_dim: 2,
                horizon,
                discount,
            },
            length,
            mdp,
            rng: StdRng::seed_from_u64(seed),
        }
    }

    pub fn goal(&self) -> usize {
        self.length - 1
    }
}

impl Env for ChainEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = StdRng::seed_from_u64(seed);
    }

    fn reset(&mut self) -> Obs {
        Obs::Discrete(0)
    }

    fn step(&mut self, obs: &Obs, action: &Action) -> StepResult {
        let s = obs.as_discrete().expect("chain state");
        let a = match action {
            Action::Discrete(a) => *a,
            Action::Vector(_) => panic!("chain takes discrete actions"),
        };
        let u: f64 = self.rng.random();
        let next = sample_index(self.mdp.transition_row(s, a), u);
        let reward = if next == self.goal() && s != self.goal() {
            1.0
        } else {
            0.0
        };
        StepResult {
            next_obs: Obs::Discrete(next),
            reward,
            done: next == self.goal(),
        }
    }

    fn exact_mdp(&self) -> Option<Mdp> {
        Some(self.mdp.clone())
    }
}

// ---------------------------------------------------------------------------
// Gridworld
// ---------------------------------------------------------------------------

/// Deterministic 4x4 gridworld. Actions: 0 up, 1 down, 2 left, 3 right
/// (row 0 at the top). Bumping a wall leaves the position unchanged. Every
/// move costs 0.05; arriving at the goal (bottom-right cell) pays +1 and
/// ends the episode. Episodes start uniformly over the three non-goal
/// corners.
pub struct GridworldEnv {
    spec: EnvSpec,
    side: usize,
    next_cell: Vec<usize>, // [s * 4 + a]
    starts: Vec<usize>,
    mdp: Mdp,
    rng: StdRng,
}

impl GridworldEnv {
    pub const STEP_PENALTY: f64 = -0.05;

    pub fn new(seed: u64) -> Self {
        let side = 4usize;
        let n = side * side;
        let goal = n - 1;
        let mut next_cell = vec![0usize; n * 4];
        for s in 0..n {
            let (row, col) = (s / side, s % side);
            for a in 0..4 {
                let (nr, nc) = match a {
                    0 => (row.saturating_sub(1), col),
                    1 => ((row + 1).min(side - 1), col),
                    2 => (row, col.saturating_sub(1)),
                    _ => (row, (col + 1).min(side - 1)),
                };
                next_cell[s * 4 + a] = if s == goal { goal } else { nr * side + nc };
            }
        }
        let starts = vec![0, side - 1, n - side];
        let mut transition = vec![0.0; n * 4 * n];
        let mut reward = vec![0.0; n * 4];
        for s in 0..n {
            for a in 0..4 {
                let next = next_cell[s * 4 + a];
                transition[(s * 4 + a) * n + next] = 1.0;
                reward[s * 4 + a] = if s == goal {
                    0.0
                } else if next == goal {
                    1.0
                } else {
                    Self::STEP_PENALTY
                };
            }
        }
        let mut initial = vec![0.0; n];
        for &s in &starts {
            initial[s] = 1.0 / starts.len() as f64;
        }
        let discount = 0.9;
        let mdp = Mdp::new(n, 4, transition, reward, initial, discount).expect("valid gridworld");
        GridworldEnv {
            spec: EnvSpec {
                kind: EnvKind::Gridworld,
                obs_dim: n,
                action_dim: 4,
                horizon: 64,
                discount,
            },
            side,
            next_cell,
            starts,
            mdp,
            rng: StdRng::seed_from_u64(seed),
        }
    }

    pub fn goal(&self) -> usize {
        self.side * self.side - 1
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }
}

impl Env for GridworldEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = StdRng::seed_from_u64(seed);
    }

    fn reset(&mut self) -> Obs {
        let i = self.rng.random_range(0..self.starts.len());
        Obs::Discrete(self.starts[i])
    }

    fn step(&mut self, obs: &Obs, action: &Action) -> StepResult {
        let s = obs.as_discrete().expect("grid state");
        let a = match action {
            Action::Discrete(a) => *a,
            Action::Vector(_) => panic!("gridworld takes discrete actions"),
        };
        let next = self.next_cell[s * 4 + a];
        let reward = if s == self.goal() {
            0.0
        } else if next == self.goal() {
            1.0
        } else {
            Self::STEP_PENALTY
        };
        StepResult {
            next_obs: Obs::Discrete(next),
            reward,
            done: next == self.goal(),
        }
    }

    fn exact_mdp(&self) -> Option<Mdp> {
        Some(self.mdp.clone())
    }
}

// ---------------------------------------------------------------------------
// Linear-dynamics environments
// ---------------------------------------------------------------------------

/// `x' = A x + B a` with reward `-(x'x + c a'a)` over a fixed horizon;
/// initial states are standard normal. Evaluating a linear-Gaussian policy
/// `a = W x + diag(std) eps` reduces to a second-moment recursion, which
/// [`exact_eta_linear_gaussian`] computes exactly.
#[derive(Debug, Clone)]
pub struct LinearDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub action_cost: f64,
    pub horizon: usize,
    pub discount: f64,
    /// Multiplies the whole reward; zero turns the task into a reward-free
    /// environment for degenerate-path tests.
    pub reward_scale: f64,
}

/// Exact total expected reward of the policy `a = W x + diag(stds) eps` on
/// linear dynamics with quadratic rewards, episodes starting from `x0 ~
/// N(0, I)` and running exactly `horizon` steps.
pub fn exact_eta_linear_gaussian(
    dynamics: &LinearDynamics,
    weights: &DMatrix<f64>,
    stds: &[f64],
) -> f64 {
    let n = dynamics.a.nrows();
    let m = dynamics.b.ncols();
    assert_eq!(weights.nrows(), m, "weights are action_dim x state_dim");
    assert_eq!(weights.ncols(), n);
    assert_eq!(stds.len(), m);
    let closed = &dynamics.a + &dynamics.b * weights;
    let noise_cov = DMatrix::from_diagonal(&DVector::from_fn(m, |i, _| stds[i] * stds[i]));
    let noise_term = &dynamics.b * &noise_cov * dynamics.b.transpose();
    let mut cov = DMatrix::<f64>::identity(n, n);
    let mut eta = 0.0;
    let mut disc = 1.0;
    for _ in 0..dynamics.horizon {
        let state_cost = cov.trace();
        let action_second_moment = (weights * &cov * weights.transpose()).trace()
            + stds.iter().map(|s| s * s).sum::<f64>();
        eta -= disc
            * dynamics.reward_scale
            * (state_cost + dynamics.action_cost * action_second_moment);
        disc *= dynamics.discount;
        cov = &closed * &cov * closed.transpose() + &noise_term;
    }
    eta
}

/// Best exact eta over stationary linear deterministic policies `a = w x`
/// for scalar dynamics, found by grid search plus golden-section refinement
/// on the closed-form objective. Returns `(eta_star, w_star)`.
pub fn optimal_eta_scalar(dynamics: &LinearDynamics) -> (f64, f64) {
    assert_eq!(dynamics.a.nrows(), 1);
    let eval = |w: f64| {
        let weights = DMatrix::from_element(1, 1, w);
        exact_eta_linear_gaussian(dynamics, &weights, &[0.0])
    };
    let (lo, hi) = (-5.0, 5.0);
    let mut best_w = lo;
    let mut best = f64::NEG_INFINITY;
    let coarse = 2000;
    for i in 0..=coarse {
        let w = lo + (hi - lo) * i as f64 / coarse as f64;
        let v = eval(w);
        if v > best {
            best = v;
            best_w = w;
        }
    }
    let cell = (hi - lo) / coarse as f64;
    let (mut a, mut b) = (best_w - cell, best_w + cell);
    let phi = 0.5 * (5.0f64.sqrt() - 1.0);
    for _ in 0..200 {
        let x1 = b - phi * (b - a);
        let x2 = a + phi * (b - a);
        if eval(x1) < eval(x2) {
            a = x1;
        } else {
            b = x2;
        }
    }
    let w = 0.5 * (a + b);
    (eval(w), w)
}

macro_rules! linear_env {
    ($name:ident, $kind:expr, $dim:expr) => {
        pub struct $name {
            spec: EnvSpec,
            dynamics: LinearDynamics,
            rng: StdRng,
        }

        impl $name {
            pub fn dynamics(&self) -> &LinearDynamics {
                &self.dynamics
            }

            /// Exact eta of a linear-Gaussian policy on this task.
            pub fn exact_eta(&self, weights: &DMatrix<f64>, stds: &[f64]) -> f64 {
                exact_eta_linear_gaussian(&self.dynamics, weights, stds)
            }
        }

        impl Env for $name {
            fn spec(&self) -> &EnvSpec {
                &self.spec
            }

            fn reseed(&mut self, seed: u64) {
                self.rng = StdRng::seed_from_u64(seed);
            }

            fn reset(&mut self) -> Obs {
                let x = DVector::from_fn($dim, |_, _| self.rng.sample(StandardNormal));
                Obs::Vector(x)
            }

            fn step(&mut self, obs: &Obs, action: &Action) -> StepResult {
                let x = obs.as_vector().expect("vector state");
                let a = match action {
                    Action::Vector(a) => a,
                    Action::Discrete(_) => panic!("continuous action required"),
                };
                let next = &self.dynamics.a * x + &self.dynamics.b * a;
                let reward = -self.dynamics.reward_scale
                    * (x.norm_squared() + self.dynamics.action_cost * a.norm_squared());
                StepResult {
                    next_obs: Obs::Vector(next),
                    reward,
                    done: false,
                }
            }
        }
    };
}

linear_env!(PointMass1dEnv, EnvKind::PointMass1d, 1);
linear_env!(PointMass2dEnv, EnvKind::PointMass2d, 2);
linear_env!(LqScalarEnv, EnvKind::LqScalar, 1);

impl PointMass1dEnv {
    pub fn new(seed: u64) -> Self {
        let dynamics = LinearDynamics {
            a: DMatrix::identity(1, 1),
            b: DMatrix::identity(1, 1),
            action_cost: 0.1,
            horizon: 64,
            discount: 0.99,
            reward_scale: 1.0,
        };
        PointMass1dEnv {
            spec: EnvSpec {
                kind: EnvKind::PointMass1d,
                obs_dim: 1,
                action_dim: 1,
                horizon: dynamics.horizon,
                discount: dynamics.discount,
            },
            dynamics,
            rng: StdRng::seed_from_u64(seed),
        }
    }
}

impl PointMass2dEnv {
    pub fn new(seed: u64) -> Self {
        let dynamics = LinearDynamics {
            a: DMatrix::identity(2, 2),
            b: DMatrix::identity(2, 2),
            action_cost: 0.1,
            horizon: 64,
            discount: 0.99,
            reward_scale: 1.0,
        };
        PointMass2dEnv {
            spec: EnvSpec {
                kind: EnvKind::PointMass2d,
                obs_dim: 2,
                action_dim: 2,
                horizon: dynamics.horizon,
                discount: dynamics.discount,
            },
            dynamics,
            rng: StdRng::seed_from_u64(seed),
        }
    }
}

impl LqScalarEnv {
    pub fn new(seed: u64) -> Self {
        let dynamics = LinearDynamics {
            a: DMatrix::from_element(1, 1, 0.9),
            b: DMatrix::from_element(1, 1, 0.5),
            action_cost: 0.05,
            horizon: 64,
            discount: 0.99,
            reward_scale: 1.0,
        };
        LqScalarEnv {
            spec: EnvSpec {
                kind: EnvKind::LqScalar,
                obs_dim: 1,
                action_dim: 1,
                horizon: dynamics.horizon,
                discount: dynamics.discount,
            },
            dynamics,
            rng: StdRng::seed_from_u64(seed),
        }
    }
}

/// Optional parameter overrides for the built-in environments; fields that
/// do not apply to a kind are ignored.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EnvOverrides {
    pub horizon: Option<usize>,
    pub discount: Option<f64>,
    /// Chain only.
    pub slip: Option<f64>,
    /// Chain only.
    pub length: Option<usize>,
    /// Continuous tasks only.
    pub action_cost: Option<f64>,
}

/// Construct a built-in environment with its default parameters.
pub fn make_env(kind: EnvKind, seed: u64) -> Box<dyn Env> {
    make_env_with(kind, seed, &EnvOverrides::default())
}

/// Construct a built-in environment with parameter overrides.
pub fn make_env_with(kind: EnvKind, seed: u64, overrides: &EnvOverrides) -> Box<dyn Env> {
    let horizon = overrides.horizon;
    let discount = overrides.discount;
    match kind {
        EnvKind::Chain => Box::new(ChainEnv::with_params(
            overrides.length.unwrap_or(8),
            overrides.slip.unwrap_or(0.1),
            discount.unwrap_or(0.9),
            horizon.unwrap_or(64),
            seed,
        )),
        EnvKind::Gridworld => {
            let mut env = GridworldEnv::new(seed);
            if let Some(h) = horizon {
                env.spec.horizon = h;
            }
            // The exported MDP carries the discount, so it cannot change
            // after construction; gridworld keeps its default.
            Box::new(env)
        }
        EnvKind::PointMass1d => {
            let mut env = PointMass1dEnv::new(seed);
            apply_linear_overrides(&mut env.spec, &mut env.dynamics, overrides);
            Box::new(env)
        }
        EnvKind::PointMass2d => {
            let mut env = PointMass2dEnv::new(seed);
            apply_linear_overrides(&mut env.spec, &mut env.dynamics, overrides);
            Box::new(env)
        }
        EnvKind::LqScalar => {
            let mut env = LqScalarEnv::new(seed);
            apply_linear_overrides(&mut env.spec, &mut env.dynamics, overrides);
            Box::new(env)
        }
    }
}

fn apply_linear_overrides(spec: &mut EnvSpec, dynamics: &mut LinearDynamics, o: &EnvOverrides) {
    if let Some(h) = o.horizon {
        spec.horizon = h;
        dynamics.horizon = h;
    }
    if let Some(g) = o.discount {
        spec.discount = g;
        dynamics.discount = g;
    }
    if let Some(c) = o.action_cost {
        dynamics.action_cost = c;
    }
}

/// A zero-reward variant of the 1-D point mass, used to exercise the
/// degenerate paths of the stochastic driver.
pub fn zero_reward_point_mass(seed: u64) -> PointMass1dEnv {
    let mut env = PointMass1dEnv::new(seed);
    env.dynamics.reward_scale = 0.0;
    env
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::value_iteration;

    #[test]
    fn chain_reset_is_point_mass_at_zero() {
        let mut env = ChainEnv::new(3);
        for _ in 0..10 {
            assert_eq!(env.reset(), Obs::Discrete(0));
        }
    }

    #[test]
    fn chain_right_moves_up_without_slip() {
        let mut env = ChainEnv::with_params(8, 0.0, 0.9, 64, 1);
        for s in 0..6 {
            let r = env.step(&Obs::Discrete(s), &Action::Discrete(1));
            assert_eq!(r.next_obs, Obs::Discrete(s + 1));
            assert_eq!(r.done, s + 1 == 7);
            assert_eq!(r.reward, if s + 1 == 7 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn chain_export_matches_generator_tables() {
        let env = ChainEnv::new(0);
        let mdp = env.exact_mdp().unwrap();
        assert_eq!(mdp.n_states(), 8);
        assert_eq!(mdp.n_actions(), 2);
        // Right from 3: 0.9 to 4, 0.1 to 2.
        assert!((mdp.p(3, 1, 4) - 0.9).abs() < 1e-15);
        assert!((mdp.p(3, 1, 2) - 0.1).abs() < 1e-15);
        // Left from 0: 0.9 stay, 0.1 to 1.
        assert!((mdp.p(0, 0, 0) - 0.9).abs() < 1e-15);
        assert!((mdp.p(0, 0, 1) - 0.1).abs() < 1e-15);
        // Terminal absorbing.
        assert!((mdp.p(7, 0, 7) - 1.0).abs() < 1e-15);
        assert_eq!(mdp.r(7, 0), 0.0);
        // Expected arrival reward.
        assert!((mdp.r(6, 1) - 0.9).abs() < 1e-15);
        assert!((mdp.r(6, 0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn chain_optimum_matches_hand_solve() {
        // Independent oracle: under the always-right policy the values solve
        // a tridiagonal system; solve it with the Thomas algorithm instead
        // of the dense LU used by `evaluate`.
        let env = ChainEnv::new(0);
        let mdp = env.exact_mdp().unwrap();
        let g = mdp.discount();
        let n = 8;
        // V(s) = r(s,R) + g*(0.9 V(s+1) + 0.1 V(s-1)), V(7)=0, with the
        // s=0 slip staying put.
        let mut sub = vec![0.0; n - 1]; // below diagonal
        let mut diag = vec![0.0; n - 1];
        let mut sup = vec![0.0; n - 1];
        let mut rhs = vec![0.0; n - 1];
        for s in 0..n - 1 {
            diag[s] = 1.0;
            rhs[s] = mdp.r(s, 1);
            if s == 0 {
                diag[s] -= g * 0.1; // slip keeps us at state 0
            } else {
                sub[s] = -g * 0.1;
            }
            if s + 1 < n - 1 {
                sup[s] = -g * 0.9;
            } // V(7) = 0 contributes nothing
        }
        // Thomas algorithm.
        for s in 1..n - 1 {
            let w = sub[s] / diag[s - 1];
            diag[s] -= w * sup[s - 1];
            rhs[s] -= w * rhs[s - 1];
        }
        let mut v = vec![0.0; n - 1];
        v[n - 2] = rhs[n - 2] / diag[n - 2];
        for s in (0..n - 2).rev() {
            v[s] = (rhs[s] - sup[s] * v[s + 1]) / diag[s];
        }
        let hand_eta = v[0]; // rho0 is a point mass at state 0

        let (policy, eta_star) = value_iteration(&mdp, 1e-13).unwrap();
        // Always-right is optimal.
        for s in 0..7 {
            assert_eq!(policy.prob(s, 1), 1.0, "state {s}");
        }
        assert!((eta_star - hand_eta).abs() < 1e-9, "{eta_star} vs {hand_eta}");
    }

    #[test]
    fn chain_transition_frequencies_match_export() {
        let mut env = ChainEnv::new(11);
        let mdp = env.exact_mdp().unwrap();
        let n = 100_000;
        for (s, a) in [(3usize, 1usize), (0, 0), (5, 0)] {
            let mut counts = [0usize; 8];
            for _ in 0..n {
                let r = env.step(&Obs::Discrete(s), &Action::Discrete(a));
                counts[r.next_obs.as_discrete().unwrap()] += 1;
            }
            for next in 0..8 {
                let p = mdp.p(s, a, next);
                let freq = counts[next] as f64 / n as f64;
                let se = (p * (1.0 - p) / n as f64).sqrt();
                assert!(
                    (freq - p).abs() <= 3.0 * se + 1e-9,
                    "({s},{a})->{next}: freq {freq} vs p {p}"
                );
            }
        }
    }

    #[test]
    fn gridworld_wall_bump_and_hand_table() {
        let mut env = GridworldEnv::new(5);
        // Hand-specified expectations: (cell, action) -> next cell.
        let table = [
            (0usize, 0usize, 0usize), // up from top-left bumps
            (0, 2, 0),                // left from top-left bumps
            (0, 3, 1),
            (0, 1, 4),
            (3, 3, 3),  // right from top-right bumps
            (5, 0, 1),  // interior moves
            (5, 1, 9),
            (5, 2, 4),
            (5, 3, 6),
            (12, 1, 12), // down from bottom-left bumps
            (14, 3, 15), // into the goal
        ];
        for (s, a, expect) in table {
            let r = env.step(&Obs::Discrete(s), &Action::Discrete(a));
            assert_eq!(r.next_obs, Obs::Discrete(expect), "({s},{a})");
            if expect == 15 {
                assert_eq!(r.reward, 1.0);
                assert!(r.done);
            } else {
                assert_eq!(r.reward, GridworldEnv::STEP_PENALTY);
                assert!(!r.done);
            }
        }
        // Row-stochastic export.
        let mdp = env.exact_mdp().unwrap();
        for s in 0..16 {
            for a in 0..4 {
                let sum: f64 = mdp.transition_row(s, a).iter().sum();
                assert!((sum - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gridworld_start_distribution_matches_rho0() {
        let mut env = GridworldEnv::new(6);
        let n = 10_000;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..n {
            let s = env.reset().as_discrete().unwrap();
            *counts.entry(s).or_insert(0usize) += 1;
        }
        let p = 1.0 / 3.0;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        for s in env.starts().to_vec() {
            let freq = *counts.get(&s).unwrap_or(&0) as f64 / n as f64;
            assert!((freq - p).abs() <= 3.0 * se, "start {s}: {freq}");
        }
        assert_eq!(counts.len(), 3);
    }

    #[test]
    fn seeded_resets_are_reproducible() {
        let mut a = GridworldEnv::new(9);
        let mut b = GridworldEnv::new(9);
        for _ in 0..20 {
            assert_eq!(a.reset(), b.reset());
        }
    }

    #[test]
    fn point_mass_step_is_exact() {
        let mut env = PointMass1dEnv::new(0);
        let x = Obs::Vector(DVector::from_vec(vec![0.7]));
        let a = Action::Vector(DVector::from_vec(vec![-0.7]));
        let r = env.step(&x, &a);
        assert_eq!(r.next_obs, Obs::Vector(DVector::from_vec(vec![0.0])));
        assert!((r.reward - -(0.49 + 0.1 * 0.49)).abs() < 1e-15);
        assert!(!r.done);
    }

    #[test]
    fn exact_eta_matches_simulation_on_point_mass() {
        // Closed-form moment recursion vs a large seeded rollout.
        let mut env = PointMass1dEnv::new(123);
        let w = DMatrix::from_element(1, 1, -0.5);
        let sigma = 0.3;
        let exact = env.exact_eta(&w, &[sigma]);

        let mut rng = StdRng::seed_from_u64(7);
        let episodes = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..episodes {
            let mut x = env.reset();
            let mut ret = 0.0;
            let mut disc = 1.0;
            for _ in 0..env.spec().horizon {
                let xv = x.as_vector().unwrap().clone();
                let eps: f64 = rng.sample(StandardNormal);
                let a = DVector::from_vec(vec![-0.5 * xv[0] + sigma * eps]);
                let r = env.step(&x, &Action::Vector(a));
                ret += disc * r.reward;
                disc *= env.spec().discount;
                x = r.next_obs;
            }
            sum += ret;
            sumsq += ret * ret;
        }
        let mean = sum / episodes as f64;
        let var = (sumsq - sum * sum / episodes as f64) / (episodes as f64 - 1.0);
        let se = (var / episodes as f64).sqrt();
        assert!(
            (exact - mean).abs() <= 4.0 * se,
            "exact {exact} vs sim {mean} (se {se})"
        );
    }

    #[test]
    fn optimal_gain_beats_neighbours() {
        let env = PointMass1dEnv::new(0);
        let (eta_star, w_star) = optimal_eta_scalar(env.dynamics());
        for dw in [-0.05, 0.05] {
            let w = DMatrix::from_element(1, 1, w_star + dw);
            assert!(env.exact_eta(&w, &[0.0]) <= eta_star + 1e-12);
        }
        // The gain is attractive: |1 + w| < 1.
        assert!(w_star < 0.0 && w_star > -2.0);

        let lq = LqScalarEnv::new(0);
        let (eta_lq, w_lq) = optimal_eta_scalar(lq.dynamics());
        assert!(eta_lq > lq.exact_eta(&DMatrix::from_element(1, 1, 0.0), &[0.0]));
        assert!((0.9 + 0.5 * w_lq).abs() < 1.0);
    }
}
