//! Trajectory collection and the sampled estimators of the stochastic
//! track: empirical total reward and its spread, GAE advantages, the
//! surrogate / gradient / distance triple, value-baseline fitting and
//! sample-averaged entropy.

use nalgebra::DVector;
use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};

use crate::envs::{Action, Env, Obs};
use crate::error::{Error, Result};
use crate::policy::PolicyParams;

/// One environment transition, tagged with its episode and in-episode time.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub episode: usize,
    pub t: usize,
    pub obs: Obs,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Obs,
    /// True when this transition ends its episode (absorbing state or
    /// horizon cut).
    pub done: bool,
}

/// A batch of sampled transitions plus per-episode discounted returns.
///
/// Only completed episodes contribute returns: a trailing episode cut off by
/// the transition budget keeps its transitions (the estimators use them) but
/// is excluded from `eta_hat` and `sigma_eta_hat`, whose value would be
/// biased low.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub transitions: Vec<Transition>,
    /// Discounted return of each completed episode, discounting restarted at
    /// the episode start.
    pub episode_returns: Vec<f64>,
    /// Mean completed-episode return; zero when no episode completed.
    pub eta_hat: f64,
    /// Sample standard deviation (1/(n-1) normalization); defined for two or
    /// more completed episodes.
    pub sigma_eta_hat: Option<f64>,
    next_episode_id: usize,
}

impl TrajectoryBatch {
    pub fn from_parts(transitions: Vec<Transition>, episode_returns: Vec<f64>) -> Self {
        let next_episode_id = transitions.iter().map(|t| t.episode + 1).max().unwrap_or(0);
        let mut batch = TrajectoryBatch {
            transitions,
            episode_returns,
            eta_hat: 0.0,
            sigma_eta_hat: None,
            next_episode_id,
        };
        batch.refresh_stats();
        batch
    }

    fn refresh_stats(&mut self) {
        let n = self.episode_returns.len();
        self.eta_hat = if n == 0 {
            0.0
        } else {
            self.episode_returns.iter().sum::<f64>() / n as f64
        };
        self.sigma_eta_hat = if n >= 2 {
            let mean = self.eta_hat;
            let var = self
                .episode_returns
                .iter()
                .map(|r| (r - mean) * (r - mean))
                .sum::<f64>()
                / (n - 1) as f64;
            Some(var.sqrt())
        } else {
            None
        };
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn completed_episodes(&self) -> usize {
        self.episode_returns.len()
    }

    /// Append another batch sampled from the same policy, keeping episode
    /// ids disjoint so advantage recursions never cross batch boundaries.
    pub fn merge(&mut self, other: TrajectoryBatch) {
        let offset = self.next_episode_id;
        for mut tr in other.transitions {
            tr.episode += offset;
            self.transitions.push(tr);
        }
        self.episode_returns.extend(other.episode_returns);
        self.next_episode_id = offset + other.next_episode_id;
        self.refresh_stats();
    }

    /// CSV dump `(episode_id, t, state..., action..., reward, done)`.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("episode_id,t,state,action,reward,done\n");
        for tr in &self.transitions {
            let state = match &tr.obs {
                Obs::Discrete(s) => s.to_string(),
                Obs::Vector(v) => v
                    .iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
            };
            let action = match &tr.action {
                Action::Discrete(a) => a.to_string(),
                Action::Vector(v) => v
                    .iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                tr.episode, tr.t, state, action, tr.reward, tr.done as u8
            );
        }
        out
    }
}

/// Collect exactly `n` environment transitions under `policy`.
///
/// Episodes end on environment termination or at the environment's horizon;
/// both count as completed for the return statistics. Deterministic given
/// `(env kind, policy, n, seed)`: the seed drives both the environment and
/// the action noise.
pub fn collect<E: Env + ?Sized>(
    env: &mut E,
    policy: &PolicyParams,
    n: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    if n == 0 {
        return Err(Error::InvalidArgument("collect needs n >= 1".into()));
    }
    let horizon = env.spec().horizon;
    let gamma = env.spec().discount;
    let mut rng = StdRng::seed_from_u64(seed);
    env.reseed(rng.random());

    let mut transitions = Vec::with_capacity(n);
    let mut episode_returns = Vec::new();
    let mut episode = 0usize;
    let mut obs = env.reset();
    let mut t = 0usize;
    let mut ret = 0.0;
    let mut disc = 1.0;
    for _ in 0..n {
        let action = policy.sample(&obs, &mut rng);
        let step = env.step(&obs, &action);
        let done = step.done || t + 1 >= horizon;
        ret += disc * step.reward;
        disc *= gamma;
        transitions.push(Transition {
            episode,
            t,
            obs: obs.clone(),
            action,
            reward: step.reward,
            next_obs: step.next_obs.clone(),
            done,
        });
        if done {
            episode_returns.push(ret);
            episode += 1;
            obs = env.reset();
            t = 0;
            ret = 0.0;
            disc = 1.0;
        } else {
            obs = step.next_obs;
            t += 1;
        }
    }
    Ok(TrajectoryBatch::from_parts(transitions, episode_returns))
}

/// Parallel collection: each worker owns an independent environment and a
/// seed derived from `seed`, and the merged batch is assembled in worker
/// order, so the result is deterministic given `(seed, workers)`.
pub fn collect_parallel<F>(
    make_env: F,
    policy: &PolicyParams,
    n: usize,
    seed: u64,
    workers: usize,
) -> Result<TrajectoryBatch>
where
    F: Fn(usize) -> Box<dyn Env + Send> + Sync,
{
    if workers == 0 {
        return Err(Error::InvalidArgument("need at least one worker".into()));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let worker_seeds: Vec<u64> = (0..workers).map(|_| rng.random()).collect();
    let shares: Vec<usize> = (0..workers)
        .map(|w| n / workers + usize::from(w < n % workers))
        .collect();
    let mut results: Vec<Option<Result<TrajectoryBatch>>> = (0..workers).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (w, share) in shares.iter().enumerate() {
            if *share == 0 {
                continue;
            }
            let ws = worker_seeds[w];
            let make_env = &make_env;
            handles.push((
                w,
                scope.spawn(move || {
                    let mut env = make_env(w);
                    collect(env.as_mut(), policy, *share, ws)
                }),
            ));
        }
        for (w, h) in handles {
            results[w] = Some(h.join().expect("collector thread panicked"));
        }
    });
    let mut merged: Option<TrajectoryBatch> = None;
    for r in results.into_iter().flatten() {
        let batch = r?;
        match &mut merged {
            None => merged = Some(batch),
            Some(m) => m.merge(batch),
        }
    }
    merged.ok_or(Error::InvalidArgument("collect needs n >= 1".into()))
}

/// Per-transition GAE advantages, aligned with the batch's transitions.
#[derive(Debug, Clone)]
pub struct AdvantageTable {
    pub values: Vec<f64>,
    pub gamma: f64,
    pub lambda: f64,
}

impl AdvantageTable {
    /// Zero-mean unit-variance copy (optional batch normalization; off by
    /// default in the driver).
    pub fn normalized(&self) -> AdvantageTable {
        let n = self.values.len().max(1) as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        let var = self.values.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-8);
        AdvantageTable {
            values: self.values.iter().map(|a| (a - mean) / std).collect(),
            gamma: self.gamma,
            lambda: self.lambda,
        }
    }
}

/// Backward GAE recursion per episode:
/// `A_t = delta_t + gamma lambda A_{t+1}`, with the TD residual
/// bootstrapping zero past a done flag and `V(next)` at a budget cut.
pub fn gae(
    batch: &TrajectoryBatch,
    baseline: &ValueBaseline,
    gamma: f64,
    lambda: f64,
) -> Result<AdvantageTable> {
    let n = batch.len();
    let mut values = vec![0.0; n];
    let mut i = n;
    while i > 0 {
        // Find the contiguous episode segment ending at i-1.
        let episode = batch.transitions[i - 1].episode;
        let mut start = i;
        while start > 0 && batch.transitions[start - 1].episode == episode {
            start -= 1;
        }
        let mut running = 0.0;
        for idx in (start..i).rev() {
            let tr = &batch.transitions[idx];
            let next_v = if tr.done {
                0.0
            } else {
                baseline.value(&tr.next_obs)?
            };
            let delta = tr.reward + gamma * next_v - baseline.value(&tr.obs)?;
            running = delta + gamma * lambda * running;
            values[idx] = running;
        }
        i = start;
    }
    Ok(AdvantageTable {
        values,
        gamma,
        lambda,
    })
}

/// Empirical surrogate, its gradient at `new`, and the mean policy distance,
/// over the transitions selected by `indices`:
///
/// * `L = eta_hat(old) + mean[ ratio * A ]` with `ratio = pi_new / pi_old`,
/// * `g = mean[ ratio * grad log pi_new * A ]`,
/// * `D = mean[ KL(old || new) ]` over the visited states.
pub fn empirical_l_g_d(
    new: &PolicyParams,
    old: &PolicyParams,
    batch: &TrajectoryBatch,
    adv: &AdvantageTable,
    indices: &[usize],
) -> Result<(f64, DVector<f64>, f64)> {
    if indices.is_empty() {
        return Err(Error::EmptyBatch("empirical_l_g_d"));
    }
    check_adv_len(batch, adv)?;
    let m = indices.len() as f64;
    let mut l = 0.0;
    let mut g = DVector::zeros(new.n_params());
    let mut d = 0.0;
    for &idx in indices {
        let tr = &batch.transitions[idx];
        let lp_old = old.log_prob(&tr.obs, &tr.action);
        let lp_new = new.log_prob(&tr.obs, &tr.action);
        let ratio = (lp_new - lp_old).exp();
        if !ratio.is_finite() {
            return Err(Error::NonFinite("importance ratio"));
        }
        let a = adv.values[idx];
        l += ratio * a;
        new.accumulate_log_prob_grad(&tr.obs, &tr.action, ratio * a / m, &mut g);
        d += old.kl(new, &tr.obs);
    }
    Ok((batch.eta_hat + l / m, g, d / m))
}

/// The surrogate alone (no gradient); the line search calls this per trial
/// point.
pub fn empirical_l(
    new: &PolicyParams,
    old: &PolicyParams,
    batch: &TrajectoryBatch,
    adv: &AdvantageTable,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptyBatch("empirical_l"));
    }
    check_adv_len(batch, adv)?;
    let mut l = 0.0;
    for &idx in indices {
        let tr = &batch.transitions[idx];
        let ratio = (new.log_prob(&tr.obs, &tr.action) - old.log_prob(&tr.obs, &tr.action)).exp();
        if !ratio.is_finite() {
            return Err(Error::NonFinite("importance ratio"));
        }
        l += ratio * adv.values[idx];
    }
    Ok(batch.eta_hat + l / indices.len() as f64)
}

/// Mean exact KL over the selected visited states.
pub fn empirical_d(
    new: &PolicyParams,
    old: &PolicyParams,
    batch: &TrajectoryBatch,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptyBatch("empirical_d"));
    }
    let mut d = 0.0;
    for &idx in indices {
        d += old.kl(new, &batch.transitions[idx].obs);
    }
    Ok(d / indices.len() as f64)
}

fn check_adv_len(batch: &TrajectoryBatch, adv: &AdvantageTable) -> Result<()> {
    if batch.len() != adv.values.len() {
        return Err(Error::ShapeMismatch(format!(
            "batch has {} transitions but advantage table has {}",
            batch.len(),
            adv.values.len()
        )));
    }
    Ok(())
}

/// Sample-averaged policy entropy over the visited states.
pub fn sample_entropy(policy: &PolicyParams, batch: &TrajectoryBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("sample_entropy"));
    }
    let sum: f64 = batch
        .transitions
        .iter()
        .map(|tr| policy.entropy_at(&tr.obs))
        .sum();
    Ok(sum / batch.len() as f64)
}

// ---------------------------------------------------------------------------
// Value baseline
// ---------------------------------------------------------------------------

/// State-value baseline: a table over discrete states, or a linear model on
/// quadratic monomial features `[1, x_i, x_i x_j]` of the observation.
#[derive(Debug, Clone, PartialEq)]
pub enum ValueBaseline {
    Tabular { values: DVector<f64> },
    Quadratic { weights: DVector<f64>, obs_dim: usize },
}

impl ValueBaseline {
    pub fn tabular(n_states: usize) -> Self {
        ValueBaseline::Tabular {
            values: DVector::zeros(n_states),
        }
    }

    pub fn quadratic(obs_dim: usize) -> Self {
        ValueBaseline::Quadratic {
            weights: DVector::zeros(Self::quadratic_dim(obs_dim)),
            obs_dim,
        }
    }

    pub fn quadratic_dim(obs_dim: usize) -> usize {
        1 + obs_dim + obs_dim * (obs_dim + 1) / 2
    }

    pub fn quadratic_features(obs_dim: usize, x: &DVector<f64>) -> DVector<f64> {
        let mut phi = DVector::zeros(Self::quadratic_dim(obs_dim));
        phi[0] = 1.0;
        for i in 0..obs_dim {
            phi[1 + i] = x[i];
        }
        let mut k = 1 + obs_dim;
        for i in 0..obs_dim {
            for j in i..obs_dim {
                phi[k] = x[i] * x[j];
                k += 1;
            }
        }
        phi
    }

    pub fn value(&self, obs: &Obs) -> Result<f64> {
        match (self, obs) {
            (ValueBaseline::Tabular { values }, Obs::Discrete(s)) => {
                if *s >= values.len() {
                    return Err(Error::ShapeMismatch("state out of baseline range".into()));
                }
                Ok(values[*s])
            }
            (ValueBaseline::Quadratic { weights, obs_dim }, Obs::Vector(x)) => {
                if x.len() != *obs_dim {
                    return Err(Error::ShapeMismatch("baseline feature dimension".into()));
                }
                Ok(weights.dot(&Self::quadratic_features(*obs_dim, x)))
            }
            _ => Err(Error::ShapeMismatch(
                "baseline kind does not match observation kind".into(),
            )),
        }
    }

    pub fn params(&self) -> &DVector<f64> {
        match self {
            ValueBaseline::Tabular { values } => values,
            ValueBaseline::Quadratic { weights, .. } => weights,
        }
    }

    fn with_params(&self, p: DVector<f64>) -> ValueBaseline {
        match self {
            ValueBaseline::Tabular { .. } => ValueBaseline::Tabular { values: p },
            ValueBaseline::Quadratic { obs_dim, .. } => ValueBaseline::Quadratic {
                weights: p,
                obs_dim: *obs_dim,
            },
        }
    }
}

fn regression_targets(
    baseline: &ValueBaseline,
    batch: &TrajectoryBatch,
    adv: &AdvantageTable,
) -> Result<Vec<f64>> {
    check_adv_len(batch, adv)?;
    batch
        .transitions
        .iter()
        .zip(&adv.values)
        .map(|(tr, a)| Ok(baseline.value(&tr.obs)? + a))
        .collect()
}

/// Exact least-squares fit of the baseline to the targets
/// `V_old(s) + A(s,a)`. Tabular baselines average per state (unvisited
/// states keep their old value); quadratic baselines solve the normal
/// equations with a `1e-8` ridge fallback on rank deficiency.
pub fn fit_baseline(
    baseline: &ValueBaseline,
    batch: &TrajectoryBatch,
    adv: &AdvantageTable,
) -> Result<ValueBaseline> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("fit_baseline"));
    }
    let targets = regression_targets(baseline, batch, adv)?;
    match baseline {
        ValueBaseline::Tabular { values } => {
            let mut sums = DVector::<f64>::zeros(values.len());
            let mut counts = vec![0usize; values.len()];
            for (tr, t) in batch.transitions.iter().zip(&targets) {
                let s = tr.obs.as_discrete().ok_or_else(|| {
                    Error::ShapeMismatch("tabular baseline needs discrete states".into())
                })?;
                sums[s] += *t;
                counts[s] += 1;
            }
            let mut new_values = values.clone();
            for s in 0..values.len() {
                if counts[s] > 0 {
                    new_values[s] = sums[s] / counts[s] as f64;
                }
            }
            Ok(ValueBaseline::Tabular { values: new_values })
        }
        ValueBaseline::Quadratic { obs_dim, .. } => {
            let dim = ValueBaseline::quadratic_dim(*obs_dim);
            let mut gram = nalgebra::DMatrix::<f64>::zeros(dim, dim);
            let mut rhs = DVector::zeros(dim);
            for (tr, t) in batch.transitions.iter().zip(&targets) {
                let x = tr.obs.as_vector().ok_or_else(|| {
                    Error::ShapeMismatch("quadratic baseline needs vector states".into())
                })?;
                let phi = ValueBaseline::quadratic_features(*obs_dim, x);
                gram += &phi * phi.transpose();
                rhs += phi * *t;
            }
            let solved = gram
                .clone()
                .lu()
                .solve(&rhs)
                .filter(|w| w.iter().all(|x| x.is_finite()));
            let weights = match solved {
                Some(w) => w,
                None => {
                    let ridge = gram + nalgebra::DMatrix::identity(dim, dim) * 1e-8;
                    ridge
                        .lu()
                        .solve(&rhs)
                        .ok_or_else(|| Error::SingularSystem("baseline normal equations".into()))?
                }
            };
            Ok(baseline.with_params(weights))
        }
    }
}

/// Iterative fit with an adaptive-moment gradient method on the same
/// least-squares objective, safeguarded to be monotone: an epoch that
/// increases the objective is rolled back and the step size halved.
pub fn fit_baseline_iterative(
    baseline: &ValueBaseline,
    batch: &TrajectoryBatch,
    adv: &AdvantageTable,
    epochs: usize,
    step_size: f64,
) -> Result<ValueBaseline> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("fit_baseline_iterative"));
    }
    let targets = regression_targets(baseline, batch, adv)?;
    let m = batch.len() as f64;

    let objective = |b: &ValueBaseline| -> Result<f64> {
        let mut total = 0.0;
        for (tr, t) in batch.transitions.iter().zip(&targets) {
            let e = b.value(&tr.obs)? - t;
            total += e * e;
        }
        Ok(total / m)
    };
    let gradient = |b: &ValueBaseline| -> Result<DVector<f64>> {
        let mut g = DVector::zeros(b.params().len());
        for (tr, t) in batch.transitions.iter().zip(&targets) {
            let e = b.value(&tr.obs)? - t;
            match (b, &tr.obs) {
                (ValueBaseline::Tabular { .. }, Obs::Discrete(s)) => {
                    g[*s] += 2.0 * e / m;
                }
                (ValueBaseline::Quadratic { obs_dim, .. }, Obs::Vector(x)) => {
                    let phi = ValueBaseline::quadratic_features(*obs_dim, x);
                    g += phi * (2.0 * e / m);
                }
                _ => return Err(Error::ShapeMismatch("baseline/observation kind".into())),
            }
        }
        Ok(g)
    };

    let mut params = baseline.params().clone();
    let mut current = baseline.clone();
    let mut obj = objective(&current)?;
    let mut lr = step_size;
    let dim = params.len();
    let mut m1 = DVector::<f64>::zeros(dim);
    let mut m2 = DVector::<f64>::zeros(dim);
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    for epoch in 1..=epochs {
        let g = gradient(&current)?;
        m1 = b1 * &m1 + (1.0 - b1) * &g;
        m2 = DVector::from_fn(dim, |i, _| b2 * m2[i] + (1.0 - b2) * g[i] * g[i]);
        let c1 = 1.0 - b1.powi(epoch as i32);
        let c2 = 1.0 - b2.powi(epoch as i32);
        let step = DVector::from_fn(dim, |i, _| {
            lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps)
        });
        let candidate_params = &params - step;
        let candidate = current.with_params(candidate_params.clone());
        let candidate_obj = objective(&candidate)?;
        if candidate_obj <= obj {
            params = candidate_params;
            current = candidate;
            obj = candidate_obj;
        } else {
            lr *= 0.5;
        }
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{ChainEnv, Env, EnvKind, EnvSpec, StepResult};
    use crate::mdp::{evaluate, TabularPolicy};
    use crate::numerics::{fd_gradient, relative_diff};
    use crate::policy::{CategoricalPolicyParams, GaussianPolicyParams, MeanModelSpec};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    /// One-state, one-step environment paying reward 1 and terminating.
    struct OneStepEnv {
        spec: EnvSpec,
    }

    impl OneStepEnv {
        fn new() -> Self {
            OneStepEnv {
                spec: EnvSpec {
                    kind: EnvKind::PointMass1d,
                    obs_dim: 1,
                    action_dim: 1,
                    horizon: 64,
                    discount: 0.9,
                },
            }
        }
    }

    impl Env for OneStepEnv {
        fn spec(&self) -> &EnvSpec {
            &self.spec
        }
        fn reseed(&mut self, _seed: u64) {}
        fn reset(&mut self) -> Obs {
            Obs::Vector(DVector::zeros(1))
        }
        fn step(&mut self, _obs: &Obs, _action: &Action) -> StepResult {
            StepResult {
                next_obs: Obs::Vector(DVector::zeros(1)),
                reward: 1.0,
                done: true,
            }
        }
    }

    fn gaussian_policy() -> PolicyParams {
        PolicyParams::Gaussian(GaussianPolicyParams::new(MeanModelSpec::linear(1, 1), 0.0))
    }

    #[test]
    fn one_step_env_statistics() {
        let mut env = OneStepEnv::new();
        let batch = collect(&mut env, &gaussian_policy(), 10, 0).unwrap();
        assert_eq!(batch.len(), 10);
        assert_eq!(batch.completed_episodes(), 10);
        assert_eq!(batch.eta_hat, 1.0);
        assert_eq!(batch.sigma_eta_hat, Some(0.0));
    }

    #[test]
    fn collect_is_deterministic() {
        let mut env1 = ChainEnv::new(0);
        let mut env2 = ChainEnv::new(99); // reseeded inside collect
        let policy = PolicyParams::Categorical(CategoricalPolicyParams::new(8, 2));
        let a = collect(&mut env1, &policy, 300, 42).unwrap();
        let b = collect(&mut env2, &policy, 300, 42).unwrap();
        assert_eq!(a, b);
        let c = collect(&mut env1, &policy, 300, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn eta_hat_matches_exact_evaluation_on_chain() {
        let mut env = ChainEnv::new(1);
        let policy = PolicyParams::Categorical(CategoricalPolicyParams::new(8, 2));
        let batch = collect(&mut env, &policy, 30_000, 7).unwrap();
        let mdp = env.exact_mdp().unwrap();
        let exact = evaluate(&mdp, &TabularPolicy::uniform(8, 2)).unwrap().eta;
        let se = batch.sigma_eta_hat.unwrap() / (batch.completed_episodes() as f64).sqrt();
        assert!(
            (batch.eta_hat - exact).abs() <= 3.0 * se + 2e-3,
            "eta_hat {} vs exact {exact} (se {se})",
            batch.eta_hat
        );
    }

    #[test]
    fn trailing_incomplete_episode_is_excluded_from_returns() {
        let mut env = ChainEnv::with_params(8, 0.0, 0.9, 64, 0);
        // Deterministic right-moving policy: each episode takes exactly 7
        // transitions, so 10 transitions leave a 3-step tail.
        let mut logits = DMatrix::zeros(8, 2);
        for s in 0..8 {
            logits[(s, 1)] = 40.0;
        }
        let policy =
            PolicyParams::Categorical(CategoricalPolicyParams::from_logits(logits).unwrap());
        let batch = collect(&mut env, &policy, 10, 3).unwrap();
        assert_eq!(batch.len(), 10);
        assert_eq!(batch.completed_episodes(), 1);
        // One full episode: reward 1 at the 7th step, discounted from the
        // episode start.
        assert!((batch.episode_returns[0] - 0.9f64.powi(6)).abs() < 1e-12);
        let tail: Vec<_> = batch.transitions[7..].iter().collect();
        assert!(tail.iter().all(|tr| !tr.done));
    }

    #[test]
    fn parallel_collection_is_deterministic_and_ordered() {
        let policy = PolicyParams::Categorical(CategoricalPolicyParams::new(8, 2));
        let make = |w: usize| -> Box<dyn Env + Send> { Box::new(ChainEnv::new(w as u64)) };
        let a = collect_parallel(make, &policy, 1000, 5, 4).unwrap();
        let b = collect_parallel(make, &policy, 1000, 5, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1000);
        // Worker shares arrive in worker order with disjoint episode ids.
        for w in a.transitions.windows(2) {
            assert!(w[1].episode >= w[0].episode);
        }
    }

    fn synthetic_batch(
        rewards: &[f64],
        episode_len: usize,
        n_states: usize,
        seed: u64,
    ) -> TrajectoryBatch {
        // Discrete observations cycling through states; episodes of fixed
        // length, the last one truncated (no done).
        let mut rng = StdRng::seed_from_u64(seed);
        let mut transitions = Vec::new();
        let mut returns = Vec::new();
        let mut episode = 0;
        let mut t = 0;
        let mut ret = 0.0;
        let mut disc = 1.0;
        let gamma = 0.9;
        for (i, &r) in rewards.iter().enumerate() {
            let s = rng.random_range(0..n_states);
            let next = rng.random_range(0..n_states);
            let done = (t + 1) % episode_len == 0 && i + 1 < rewards.len();
            ret += disc * r;
            disc *= gamma;
            transitions.push(Transition {
                episode,
                t,
                obs: Obs::Discrete(s),
                action: Action::Discrete(0),
                reward: r,
                next_obs: Obs::Discrete(next),
                done,
            });
            if done {
                returns.push(ret);
                episode += 1;
                t = 0;
                ret = 0.0;
                disc = 1.0;
            } else {
                t += 1;
            }
        }
        TrajectoryBatch::from_parts(transitions, returns)
    }

    /// O(T^2) forward-sum oracle: `A_t = sum_j (gamma lambda)^j delta_{t+j}`
    /// within each episode.
    fn gae_forward_oracle(
        batch: &TrajectoryBatch,
        baseline: &ValueBaseline,
        gamma: f64,
        lambda: f64,
    ) -> Vec<f64> {
        let n = batch.len();
        let mut deltas = vec![0.0; n];
        for (i, tr) in batch.transitions.iter().enumerate() {
            let next_v = if tr.done {
                0.0
            } else {
                baseline.value(&tr.next_obs).unwrap()
            };
            deltas[i] = tr.reward + gamma * next_v - baseline.value(&tr.obs).unwrap();
        }
        let mut out = vec![0.0; n];
        for i in 0..n {
            let episode = batch.transitions[i].episode;
            let mut acc = 0.0;
            let mut w = 1.0;
            for j in i..n {
                if batch.transitions[j].episode != episode {
                    break;
                }
                acc += w * deltas[j];
                w *= gamma * lambda;
            }
            out[i] = acc;
        }
        out
    }

    #[test]
    fn gae_lambda_zero_is_td_residual() {
        let batch = synthetic_batch(&[1.0, -0.5, 2.0, 0.3, 1.1, 0.0], 3, 4, 1);
        let mut baseline = ValueBaseline::tabular(4);
        if let ValueBaseline::Tabular { values } = &mut baseline {
            *values = DVector::from_vec(vec![0.5, -0.2, 1.0, 0.1]);
        }
        let adv = gae(&batch, &baseline, 0.9, 0.0).unwrap();
        for (i, tr) in batch.transitions.iter().enumerate() {
            let next_v = if tr.done {
                0.0
            } else {
                baseline.value(&tr.next_obs).unwrap()
            };
            let expect = tr.reward + 0.9 * next_v - baseline.value(&tr.obs).unwrap();
            assert!((adv.values[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn gae_lambda_one_zero_baseline_is_reward_to_go() {
        let rewards = [1.0, 2.0, 3.0, 4.0];
        let batch = synthetic_batch(&rewards, 4, 2, 2);
        let baseline = ValueBaseline::tabular(2);
        let gamma = 0.9;
        let adv = gae(&batch, &baseline, gamma, 1.0).unwrap();
        // Single truncated episode with V = 0: reward-to-go.
        for t in 0..4 {
            let mut expect = 0.0;
            let mut w = 1.0;
            for j in t..4 {
                expect += w * rewards[j];
                w *= gamma;
            }
            assert!((adv.values[t] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_backward_matches_forward_sum() {
        let mut rng = StdRng::seed_from_u64(3);
        let rewards: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let batch = synthetic_batch(&rewards, 5, 3, 4);
        let mut baseline = ValueBaseline::tabular(3);
        if let ValueBaseline::Tabular { values } = &mut baseline {
            *values = DVector::from_vec(vec![0.3, -0.4, 0.8]);
        }
        for lambda in [0.0, 0.5, 0.95, 1.0] {
            let adv = gae(&batch, &baseline, 0.9, lambda).unwrap();
            let oracle = gae_forward_oracle(&batch, &baseline, 0.9, lambda);
            for i in 0..batch.len() {
                assert!((adv.values[i] - oracle[i]).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn gae_recursion_equals_forward_sum(
            rewards in proptest::collection::vec(-2.0f64..2.0, 1..50),
            episode_len in 1usize..12,
            lambda_idx in 0usize..4,
            seed in 0u64..1000,
        ) {
            let lambda = [0.0, 0.5, 0.95, 1.0][lambda_idx];
            let batch = synthetic_batch(&rewards, episode_len, 3, seed);
            let mut baseline = ValueBaseline::tabular(3);
            if let ValueBaseline::Tabular { values } = &mut baseline {
                *values = DVector::from_vec(vec![0.1, -0.7, 0.4]);
            }
            let adv = gae(&batch, &baseline, 0.9, lambda).unwrap();
            let oracle = gae_forward_oracle(&batch, &baseline, 0.9, lambda);
            for i in 0..batch.len() {
                prop_assert!((adv.values[i] - oracle[i]).abs() < 1e-10);
            }
        }
    }

    fn gaussian_batch(seed: u64, n: usize) -> (PolicyParams, TrajectoryBatch, AdvantageTable) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut g = GaussianPolicyParams::new(MeanModelSpec::linear(2, 2), 0.0);
        for i in 0..2 {
            for j in 0..2 {
                g.set_mean_entry(i, j, rng.random_range(-0.5..0.5));
            }
        }
        let policy = PolicyParams::Gaussian(g);
        let mut transitions = Vec::new();
        for i in 0..n {
            let obs = Obs::Vector(DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)));
            let action = policy.sample(&obs, &mut rng);
            transitions.push(Transition {
                episode: 0,
                t: i,
                obs: obs.clone(),
                action,
                reward: rng.random_range(-1.0..1.0),
                next_obs: obs,
                done: false,
            });
        }
        let batch = TrajectoryBatch::from_parts(transitions, vec![0.4, 0.6]);
        let adv = AdvantageTable {
            values: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            gamma: 0.99,
            lambda: 0.95,
        };
        (policy, batch, adv)
    }

    #[test]
    fn estimators_at_the_anchor() {
        let (policy, batch, adv) = gaussian_batch(10, 40);
        let indices: Vec<usize> = (0..batch.len()).collect();
        let (l, _, d) = empirical_l_g_d(&policy, &policy, &batch, &adv, &indices).unwrap();
        let mean_adv = adv.values.iter().sum::<f64>() / adv.values.len() as f64;
        assert!((l - (batch.eta_hat + mean_adv)).abs() < 1e-12);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn estimator_gradient_matches_finite_differences() {
        let (old, batch, adv) = gaussian_batch(11, 30);
        let mut rng = StdRng::seed_from_u64(12);
        let theta = old.param_vector()
            + DVector::from_fn(old.n_params(), |_, _| rng.random_range(-0.05..0.05));
        let (new, _) = old.with_param_vector(&theta).unwrap();
        let indices: Vec<usize> = (0..batch.len()).collect();
        let (_, g, _) = empirical_l_g_d(&new, &old, &batch, &adv, &indices).unwrap();
        let f = |th: &DVector<f64>| {
            let (p, _) = old.with_param_vector(th).unwrap();
            empirical_l(&p, &old, &batch, &adv, &indices).unwrap()
        };
        let fd = fd_gradient(f, &theta, 1e-6);
        assert!(relative_diff(&g, &fd) < 1e-5, "{g:?} vs {fd:?}");
    }

    #[test]
    fn doubling_advantages_doubles_the_surplus() {
        let (old, batch, adv) = gaussian_batch(13, 25);
        let mut rng = StdRng::seed_from_u64(14);
        let theta = old.param_vector()
            + DVector::from_fn(old.n_params(), |_, _| rng.random_range(-0.1..0.1));
        let (new, _) = old.with_param_vector(&theta).unwrap();
        let indices: Vec<usize> = (0..batch.len()).collect();
        let l1 = empirical_l(&new, &old, &batch, &adv, &indices).unwrap();
        let doubled = AdvantageTable {
            values: adv.values.iter().map(|a| 2.0 * a).collect(),
            gamma: adv.gamma,
            lambda: adv.lambda,
        };
        let l2 = empirical_l(&new, &old, &batch, &doubled, &indices).unwrap();
        assert!((l2 - batch.eta_hat - 2.0 * (l1 - batch.eta_hat)).abs() < 1e-12);
    }

    #[test]
    fn minibatch_equals_full_batch_at_full_selection() {
        let (old, batch, adv) = gaussian_batch(15, 20);
        let all: Vec<usize> = (0..batch.len()).collect();
        let (l_full, g_full, d_full) = empirical_l_g_d(&old, &old, &batch, &adv, &all).unwrap();
        let (l_again, g_again, d_again) = empirical_l_g_d(&old, &old, &batch, &adv, &all).unwrap();
        assert_eq!(l_full, l_again);
        assert_eq!(g_full, g_again);
        assert_eq!(d_full, d_again);
        assert!(empirical_l_g_d(&old, &old, &batch, &adv, &[]).is_err());
    }

    #[test]
    fn entropy_over_batch() {
        let (policy, batch, _) = gaussian_batch(16, 15);
        let ent = sample_entropy(&policy, &batch).unwrap();
        if let PolicyParams::Gaussian(g) = &policy {
            assert!((ent - g.entropy()).abs() < 1e-12);
        }

        let cat = PolicyParams::Categorical(CategoricalPolicyParams::new(4, 4));
        let mut env = ChainEnv::new(2);
        let discrete = collect(&mut env, &PolicyParams::Categorical(CategoricalPolicyParams::new(8, 2)), 50, 1).unwrap();
        let _ = cat; // uniform categorical entropy equals ln 4 at any state
        let uniform = PolicyParams::Categorical(CategoricalPolicyParams::new(8, 2));
        let ent = sample_entropy(&uniform, &discrete).unwrap();
        assert!((ent - (2.0f64).ln()).abs() < 1e-12);

        // Mixed-state batch: direct per-state average oracle.
        let mut rng = StdRng::seed_from_u64(17);
        let logits = DMatrix::from_fn(8, 2, |_, _| rng.random_range(-1.0..1.0));
        let skewed =
            PolicyParams::Categorical(CategoricalPolicyParams::from_logits(logits).unwrap());
        let ent = sample_entropy(&skewed, &discrete).unwrap();
        let direct: f64 = discrete
            .transitions
            .iter()
            .map(|tr| skewed.entropy_at(&tr.obs))
            .sum::<f64>()
            / discrete.len() as f64;
        assert!((ent - direct).abs() < 1e-12);
    }

    #[test]
    fn tabular_fit_reaches_constant_targets() {
        let batch = synthetic_batch(&[0.0; 24], 6, 3, 20);
        let baseline = ValueBaseline::tabular(3);
        let adv = AdvantageTable {
            values: vec![2.5; 24], // targets = V(s) + 2.5 = 2.5 everywhere
            gamma: 0.9,
            lambda: 0.95,
        };
        let fitted = fit_baseline(&baseline, &batch, &adv).unwrap();
        if let ValueBaseline::Tabular { values } = &fitted {
            for s in 0..3 {
                assert!((values[s] - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn iterative_fit_approaches_exact_solution() {
        let (_, batch, adv) = gaussian_batch(21, 60);
        let baseline = ValueBaseline::quadratic(2);
        let exact = fit_baseline(&baseline, &batch, &adv).unwrap();
        let iterated = fit_baseline_iterative(&baseline, &batch, &adv, 200, 0.2).unwrap();
        let exact_obj: f64 = {
            let targets = regression_targets(&baseline, &batch, &adv).unwrap();
            batch
                .transitions
                .iter()
                .zip(&targets)
                .map(|(tr, t)| (exact.value(&tr.obs).unwrap() - t).powi(2))
                .sum::<f64>()
                / batch.len() as f64
        };
        let iter_obj: f64 = {
            let targets = regression_targets(&baseline, &batch, &adv).unwrap();
            batch
                .transitions
                .iter()
                .zip(&targets)
                .map(|(tr, t)| (iterated.value(&tr.obs).unwrap() - t).powi(2))
                .sum::<f64>()
                / batch.len() as f64
        };
        assert!(
            (iter_obj - exact_obj).abs() < 1e-4,
            "iterative {iter_obj} vs exact {exact_obj}"
        );
    }

    #[test]
    fn fitting_exact_values_leaves_zero_residual() {
        // Targets built from the exact chain values: the tabular fit must
        // reproduce them exactly.
        let mut env = ChainEnv::new(3);
        let mdp = env.exact_mdp().unwrap();
        let exact_v = evaluate(&mdp, &TabularPolicy::uniform(8, 2)).unwrap().v;
        let policy = PolicyParams::Categorical(CategoricalPolicyParams::new(8, 2));
        let batch = collect(&mut env, &policy, 500, 9).unwrap();
        let baseline = ValueBaseline::tabular(8);
        // Advantage entries chosen so that V_old(s) + A = V_exact(s).
        let adv = AdvantageTable {
            values: batch
                .transitions
                .iter()
                .map(|tr| exact_v[tr.obs.as_discrete().unwrap()])
                .collect(),
            gamma: 0.9,
            lambda: 0.95,
        };
        let fitted = fit_baseline(&baseline, &batch, &adv).unwrap();
        let mut residual: f64 = 0.0;
        for tr in &batch.transitions {
            let s = tr.obs.as_discrete().unwrap();
            residual = residual.max((fitted.value(&tr.obs).unwrap() - exact_v[s]).abs());
        }
        assert!(residual < 1e-8, "residual {residual}");
    }

    #[test]
    fn eta_hat_is_unbiased_over_many_batches() {
        // 200 independent batches on the chain; the mean of eta_hat lands
        // within four standard errors of the exact value.
        let mut env = ChainEnv::new(8);
        let policy = PolicyParams::Categorical(CategoricalPolicyParams::new(8, 2));
        let mdp = env.exact_mdp().unwrap();
        let exact = evaluate(&mdp, &TabularPolicy::uniform(8, 2)).unwrap().eta;
        let estimates: Vec<f64> = (0..200)
            .map(|seed| collect(&mut env, &policy, 256, seed).unwrap().eta_hat)
            .collect();
        let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
        let var = estimates
            .iter()
            .map(|e| (e - mean) * (e - mean))
            .sum::<f64>()
            / (estimates.len() - 1) as f64;
        let se = (var / estimates.len() as f64).sqrt();
        assert!(
            (mean - exact).abs() <= 4.0 * se + 2e-3,
            "mean {mean} vs exact {exact} (se {se})"
        );
    }

    #[test]
    fn batch_csv_schema() {
        let mut env = ChainEnv::new(5);
        let policy = PolicyParams::Categorical(CategoricalPolicyParams::new(8, 2));
        let batch = collect(&mut env, &policy, 20, 1).unwrap();
        let csv = batch.to_csv();
        assert!(csv.starts_with("episode_id,t,state,action,reward,done\n"));
        assert_eq!(csv.lines().count(), 21);
        // Vector states flatten into the state column.
        let mut one = OneStepEnv::new();
        let vbatch = collect(&mut one, &gaussian_policy(), 2, 0).unwrap();
        let csv = vbatch.to_csv();
        let row = csv.lines().nth(1).unwrap();
        assert_eq!(row.split(',').count(), 6);
    }

    #[test]
    fn merge_keeps_episode_ids_disjoint_and_stats_fresh() {
        let mut env = ChainEnv::new(4);
        let policy = PolicyParams::Categorical(CategoricalPolicyParams::new(8, 2));
        let mut a = collect(&mut env, &policy, 200, 1).unwrap();
        let b = collect(&mut env, &policy, 200, 2).unwrap();
        let all_returns: Vec<f64> = a
            .episode_returns
            .iter()
            .chain(&b.episode_returns)
            .cloned()
            .collect();
        let a_max = a.transitions.iter().map(|t| t.episode).max().unwrap();
        a.merge(b);
        assert_eq!(a.len(), 400);
        let expected_eta = all_returns.iter().sum::<f64>() / all_returns.len() as f64;
        assert!((a.eta_hat - expected_eta).abs() < 1e-12);
        // Episode ids from the second half exceed every id from the first.
        let boundary = a.transitions[200].episode;
        assert!(boundary > a_max);
    }
}
