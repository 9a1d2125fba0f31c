//! The full stochastic trust-region loop.
//!
//! Each outer iteration builds GAE advantages on the sample buffer, sets the
//! radius `delta_k = mu_k * ||g_k||`, runs the natural-gradient inner solver
//! (alternating mean/log-std stages for Gaussian policies), samples a trial
//! batch, and scores the trial with the std-augmented agreement ratio. A
//! trial below the acceptance threshold is buffered: the policy stands, the
//! buffer grows by a fresh simulation, and once the buffer hits its cap the
//! best rejected candidate is accepted by force.

use std::fmt;

use nalgebra::DVector;
use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::envs::{Env, Obs};
use crate::error::{Error, Result};
use crate::numerics::{conjugate_gradient, feasible_line_search, projected_gradient_box, CgConfig, LineSearchConfig};
use crate::policy::PolicyParams;
use crate::sampler::{
    collect, empirical_d, empirical_l, empirical_l_g_d, fit_baseline, fit_baseline_iterative,
    gae, sample_entropy, AdvantageTable, TrajectoryBatch, ValueBaseline,
};

fn default_one() -> f64 {
    1.0
}

/// Configuration of the stochastic driver. Field names double as the config
/// file keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StroConfig {
    /// Transitions per simulation (the `N` of the sampler).
    pub n: usize,
    /// Buffer cap; `0` derives `(max_rejections_before_force + 1) * n`.
    pub n_max: usize,
    pub mu0: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    /// Lower ratio threshold; strictly negative (a small negative ratio is
    /// still "moderate disagreement" under sampling noise).
    pub beta0: f64,
    /// Acceptance threshold; a trial is accepted once the ratio reaches it.
    pub beta1: f64,
    /// Relative tolerance of the inner termination test.
    pub inner_eps: f64,
    /// Termination is tested every this many inner steps.
    pub inner_check_period: usize,
    pub max_inner_iters: usize,
    /// With the derived buffer cap, force-acceptance fires after this many
    /// consecutive rejections.
    pub max_rejections_before_force: usize,
    /// `c_ent`: the log-std box radius is `c_ent * |entropy|`.
    pub sigma_bound_scale: f64,
    pub tau_armijo: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    /// `0` sizes conjugate gradient as ten iterations per dimension.
    pub cg_max_iters: usize,
    pub cg_residual_tol: f64,
    pub fim_damping: f64,
    pub gae_lambda: f64,
    pub normalize_advantages: bool,
    /// Minibatch size of the inner solver (capped at the buffer size).
    pub minibatch: usize,
    /// Projected-gradient iterations of the log-std stage.
    pub sigma_steps: usize,
    /// `0` fits the baseline by exact normal equations; otherwise this many
    /// adaptive-moment epochs.
    pub baseline_epochs: usize,
    #[serde(default = "default_one")]
    pub baseline_step_size: f64,
    /// Ablation: take a single natural-gradient step over all parameters
    /// (one CG solve plus the line search) instead of the full inner loop
    /// and the alternating update.
    pub npg_mode: bool,
    pub max_iters: usize,
    pub max_env_steps: usize,
    pub seed: u64,
}

impl Default for StroConfig {
    fn default() -> Self {
        StroConfig {
            n: 2048,
            n_max: 0,
            mu0: 0.05,
            mu_min: 0.01,
            mu_max: 0.1,
            gamma1: 2.0,
            gamma2: 0.8,
            gamma3: 0.6,
            beta0: -0.1,
            beta1: 0.0,
            inner_eps: 1e-4,
            inner_check_period: 5,
            max_inner_iters: 50,
            max_rejections_before_force: 4,
            sigma_bound_scale: 0.02,
            tau_armijo: 0.1,
            backtrack_factor: 0.5,
            max_backtracks: 20,
            cg_max_iters: 0,
            cg_residual_tol: 1e-8,
            fim_damping: 1e-8,
            gae_lambda: 0.95,
            normalize_advantages: false,
            minibatch: 256,
            sigma_steps: 10,
            baseline_epochs: 0,
            baseline_step_size: 0.1,
            npg_mode: false,
            max_iters: 1000,
            max_env_steps: 200_000,
            seed: 0,
        }
    }
}

impl StroConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        if !(self.mu_min > 0.0 && self.mu_min < self.mu_max) {
            return Err(Error::InvalidArgument("require 0 < mu_min < mu_max".into()));
        }
        if !(self.beta0 < 0.0 && self.beta1 >= 0.0) {
            return Err(Error::InvalidArgument("require beta0 < 0 <= beta1".into()));
        }
        if !(0.0 < self.gamma3 && self.gamma3 < self.gamma2 && self.gamma2 <= 1.0 && self.gamma1 > 1.0)
        {
            return Err(Error::InvalidArgument(
                "require 0 < gamma3 < gamma2 <= 1 < gamma1".into(),
            ));
        }
        if self.n_max != 0 && self.n_max < 2 * self.n {
            return Err(Error::InvalidArgument(
                "n_max must be at least 2n so a rejection precedes any force".into(),
            ));
        }
        if self.inner_check_period == 0 {
            return Err(Error::InvalidArgument("inner_check_period must be >= 1".into()));
        }
        if !(self.sigma_bound_scale >= 0.0) {
            return Err(Error::InvalidArgument("sigma_bound_scale must be >= 0".into()));
        }
        Ok(())
    }

    pub fn effective_n_max(&self) -> usize {
        if self.n_max == 0 {
            (self.max_rejections_before_force + 1) * self.n
        } else {
            self.n_max
        }
    }

    fn line_search_config(&self) -> LineSearchConfig {
        LineSearchConfig {
            tau_armijo: self.tau_armijo,
            backtrack_factor: self.backtrack_factor,
            max_backtracks: self.max_backtracks,
        }
    }

    fn cg_config(&self, dim: usize) -> CgConfig {
        CgConfig {
            max_iters: if self.cg_max_iters == 0 {
                10 * dim.max(1)
            } else {
                self.cg_max_iters
            },
            residual_tol: self.cg_residual_tol,
            damping: 0.0,
        }
    }
}

/// A contiguous slice of the flattened parameter vector that an inner solve
/// is allowed to move (the mean block during the Gaussian alternating
/// update, everything otherwise).
#[derive(Debug, Clone, Copy)]
pub struct ParamBlock {
    pub offset: usize,
    pub len: usize,
}

impl ParamBlock {
    pub fn full(n: usize) -> Self {
        ParamBlock { offset: 0, len: n }
    }

    fn extract(&self, full: &DVector<f64>) -> DVector<f64> {
        full.rows(self.offset, self.len).into_owned()
    }

    fn write(&self, full: &mut DVector<f64>, sub: &DVector<f64>) {
        for i in 0..self.len {
            full[self.offset + i] = sub[i];
        }
    }

    fn embed(&self, sub: &DVector<f64>, full_len: usize) -> DVector<f64> {
        let mut v = DVector::zeros(full_len);
        self.write(&mut v, sub);
        v
    }
}

/// Mutable state of the outer loop: current policy, radius coefficient,
/// sample buffer and the rejection history `H`.
#[derive(Debug, Clone)]
pub struct TrustRegionState {
    pub policy: PolicyParams,
    pub mu: f64,
    pub buffer: TrajectoryBatch,
    pub rejections: Vec<RejectedCandidate>,
    pub consecutive_rejections: usize,
}

#[derive(Debug, Clone)]
pub struct RejectedCandidate {
    pub policy: PolicyParams,
    pub batch: TrajectoryBatch,
}

impl RejectedCandidate {
    pub fn eta_hat(&self) -> f64 {
        self.batch.eta_hat
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
    Force,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Decision::Accept => "accept",
            Decision::Reject => "reject",
            Decision::Force => "force",
        };
        f.write_str(s)
    }
}

/// One outer iteration, as exported to the run log.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iter: usize,
    pub eta_hat_old: f64,
    pub eta_hat_trial: f64,
    /// Spread of the old batch's episode returns; absent below two
    /// completed episodes (the ratio falls back to the vanilla form).
    pub sigma_eta_hat: Option<f64>,
    pub l_improvement: f64,
    /// `-inf` encodes a trial whose predicted improvement was not positive.
    pub ratio: f64,
    pub decision: Decision,
    pub entropy: f64,
    pub delta: f64,
}

/// Diagnostics kept out of the run log but used by the property suites.
#[derive(Debug, Clone)]
pub struct IterDiag {
    pub buffer_before: usize,
    pub buffer_after: usize,
    /// Full-buffer mean KL of the trial against the current policy.
    pub d_hat_trial: f64,
    /// Log-std box radius of this iteration (zero for categorical runs).
    pub sigma_box_bound: f64,
    pub sigma_step_inf: f64,
    pub entropy_trial: f64,
    /// Second difference of the full-buffer surrogate along the gradient
    /// direction; logged because nothing in the algorithm bounds it.
    pub l_curvature: f64,
    pub inner_steps: usize,
    pub cg_fallbacks: usize,
    pub sigma_clamp_events: usize,
    pub vanilla_ratio_fallback: bool,
    pub mu_after: f64,
    pub env_steps_after: usize,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<IterationRecord>,
    pub diagnostics: Vec<IterDiag>,
    /// Policy after every accepted (or forced) iteration.
    pub accepted: Vec<(usize, PolicyParams)>,
    pub final_policy: PolicyParams,
    pub final_baseline: ValueBaseline,
    pub env_steps: usize,
}

impl RunResult {
    /// CSV body of the run log, one row per outer iteration.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from(
            "iter,eta_hat_old,eta_hat_trial,sigma_eta_hat,l_improvement,ratio,decision,entropy,delta\n",
        );
        for r in &self.records {
            let sigma = r
                .sigma_eta_hat
                .map(|s| s.to_string())
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.iter,
                r.eta_hat_old,
                r.eta_hat_trial,
                sigma,
                r.l_improvement,
                r.ratio,
                r.decision,
                r.entropy,
                r.delta
            );
        }
        out
    }
}

/// Std-augmented agreement ratio
/// `(eta_trial - eta_old) / (sigma_eta + L_trial - L_old)`.
///
/// Returns `-inf` when the predicted improvement is not positive (the
/// iteration is then treated as a rejection). Without a defined spread the
/// vanilla ratio is used.
pub fn stochastic_ratio(
    eta_hat_trial: f64,
    eta_hat_old: f64,
    sigma_eta_old: Option<f64>,
    l_trial: f64,
    l_old: f64,
) -> f64 {
    let predicted = l_trial - l_old;
    if !(predicted > 0.0) {
        return f64::NEG_INFINITY;
    }
    let denom = sigma_eta_old.unwrap_or(0.0) + predicted;
    (eta_hat_trial - eta_hat_old) / denom
}

/// Radius-coefficient update with clamping into `[mu_min, mu_max]`.
pub fn update_mu(mu: f64, ratio: f64, config: &StroConfig) -> f64 {
    if ratio >= config.beta1 {
        (config.gamma1 * mu).min(config.mu_max)
    } else if ratio >= config.beta0 {
        (config.gamma2 * mu).max(config.mu_min)
    } else {
        (config.gamma3 * mu).max(config.mu_min)
    }
}

/// Apply the acceptance rule to the state. Accepting installs the trial and
/// its batch and clears the rejection history. A rejection with room left in
/// the buffer stores the candidate in `H` (the caller then merges fresh
/// samples from the unchanged policy into the buffer). Once the buffer has
/// hit its cap, the best-performing rejected candidate is accepted by force
/// and removed from `H`.
pub fn accept_or_reject(
    state: &mut TrustRegionState,
    trial_policy: PolicyParams,
    trial_batch: TrajectoryBatch,
    ratio: f64,
    beta1: f64,
    n_max: usize,
) -> Decision {
    if ratio >= beta1 {
        state.policy = trial_policy;
        state.buffer = trial_batch;
        state.rejections.clear();
        state.consecutive_rejections = 0;
        Decision::Accept
    } else if state.buffer.len() < n_max {
        state.rejections.push(RejectedCandidate {
            policy: trial_policy,
            batch: trial_batch,
        });
        state.consecutive_rejections += 1;
        Decision::Reject
    } else {
        assert!(
            !state.rejections.is_empty(),
            "force-acceptance reached with an empty rejection history"
        );
        let mut best = 0;
        for (i, cand) in state.rejections.iter().enumerate() {
            if cand.eta_hat() > state.rejections[best].eta_hat() {
                best = i;
            }
        }
        let chosen = state.rejections.remove(best);
        state.policy = chosen.policy;
        state.buffer = chosen.batch;
        state.consecutive_rejections = 0;
        Decision::Force
    }
}

#[derive(Debug, Clone)]
pub struct InnerResult {
    pub policy: PolicyParams,
    pub steps: usize,
    pub cg_fallbacks: usize,
    pub sigma_clamp_events: usize,
}

/// Second central difference of the full-buffer surrogate along the
/// normalized gradient direction. Diagnostic only.
fn surrogate_curvature(
    policy: &PolicyParams,
    grad: &DVector<f64>,
    buffer: &TrajectoryBatch,
    adv: &AdvantageTable,
    all: &[usize],
) -> Result<f64> {
    let g_norm = grad.norm();
    if g_norm == 0.0 {
        return Ok(0.0);
    }
    let theta = policy.param_vector();
    let h = 1e-4 * (1.0 + theta.norm());
    let direction = grad / g_norm;
    let at = |t: f64| -> Result<f64> {
        let (p, _) = policy.with_param_vector(&(&theta + t * &direction))?;
        empirical_l(&p, policy, buffer, adv, all)
    };
    let center = at(0.0)?;
    Ok((at(h)? - 2.0 * center + at(-h)?) / (h * h))
}

fn sample_indices(rng: &mut StdRng, len: usize, m: usize) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..len).collect();
    if m >= len {
        return indices;
    }
    for i in 0..m {
        let j = rng.random_range(i..len);
        indices.swap(i, j);
    }
    indices.truncate(m);
    indices
}

/// The inner solver: preconditioned ascent directions `d = H^{-1} g` from
/// conjugate gradient on a minibatch, steps sized by the two-condition line
/// search (sufficient increase on the minibatch, full-buffer distance within
/// `delta`), with the stagnation-or-entropy-drift termination test every
/// `inner_check_period` steps. Only the parameters inside `block` move.
pub fn inner_solve(
    anchor: &PolicyParams,
    block: ParamBlock,
    buffer: &TrajectoryBatch,
    adv: &AdvantageTable,
    delta: f64,
    config: &StroConfig,
    rng: &mut StdRng,
) -> Result<InnerResult> {
    if buffer.is_empty() {
        return Err(Error::EmptyBatch("inner_solve"));
    }
    let n_params = anchor.n_params();
    let all: Vec<usize> = (0..buffer.len()).collect();
    let ls_config = config.line_search_config();
    let ent_anchor = sample_entropy(anchor, buffer)?;
    let mut current = anchor.clone();
    let mut steps = 0usize;
    let mut cg_fallbacks = 0usize;
    let mut clamp_events = 0usize;

    for l in 1..=config.max_inner_iters {
        let mb = sample_indices(rng, buffer.len(), config.minibatch.min(buffer.len()));
        let (_, g_full, _) = empirical_l_g_d(&current, anchor, buffer, adv, &mb)?;
        let g = block.extract(&g_full);
        if g.norm() == 0.0 {
            break;
        }
        let mb_states: Vec<&Obs> = mb.iter().map(|&i| &buffer.transitions[i].obs).collect();
        let operator = |v_sub: &DVector<f64>| -> DVector<f64> {
            let v_full = block.embed(v_sub, n_params);
            let hv = anchor
                .fim_vec(mb_states.iter().copied(), &v_full, config.fim_damping)
                .expect("minibatch is nonempty");
            block.extract(&hv)
        };
        let cg = conjugate_gradient(operator, &g, &config.cg_config(block.len))?;
        let mut direction = cg.x;
        if direction.iter().any(|x| !x.is_finite()) || direction.dot(&g) <= 0.0 {
            direction = g.clone();
            cg_fallbacks += 1;
        }

        let theta_full = current.param_vector();
        let theta_sub = block.extract(&theta_full);
        let candidate_of = |sub: &DVector<f64>| -> Result<PolicyParams> {
            let mut full = theta_full.clone();
            block.write(&mut full, sub);
            Ok(current.with_param_vector(&full)?.0)
        };
        let eval_l = |sub: &DVector<f64>| -> f64 {
            candidate_of(sub)
                .and_then(|p| empirical_l(&p, anchor, buffer, adv, &mb))
                .unwrap_or(f64::NAN)
        };
        let eval_d = |sub: &DVector<f64>| -> f64 {
            candidate_of(sub)
                .and_then(|p| empirical_d(&p, anchor, buffer, &all))
                .unwrap_or(f64::NAN)
        };
        let alpha =
            feasible_line_search(eval_l, eval_d, &theta_sub, &direction, &g, delta, &ls_config)?;
        if alpha == 0.0 {
            break;
        }
        let new_sub = &theta_sub + alpha * &direction;
        let mut new_full = theta_full.clone();
        block.write(&mut new_full, &new_sub);
        let (next, clamped) = current.with_param_vector(&new_full)?;
        clamp_events += clamped;
        steps += 1;

        if l % config.inner_check_period == 0 {
            let l_prev = empirical_l(&current, anchor, buffer, adv, &all)?;
            let l_new = empirical_l(&next, anchor, buffer, adv, &all)?;
            let stagnant = (l_new - l_prev).abs() / (1.0 + l_prev.abs()) <= config.inner_eps;
            let ent_new = sample_entropy(&next, buffer)?;
            let drifted =
                (ent_new - ent_anchor).abs() / (1.0 + ent_anchor.abs()) >= config.inner_eps;
            current = next;
            if stagnant || drifted {
                break;
            }
        } else {
            current = next;
        }
    }
    Ok(InnerResult {
        policy: current,
        steps,
        cg_fallbacks,
        sigma_clamp_events: clamp_events,
    })
}

#[derive(Debug, Clone)]
pub struct AlternatingResult {
    pub policy: PolicyParams,
    pub steps: usize,
    pub cg_fallbacks: usize,
    pub sigma_clamp_events: usize,
    /// The box radius `c_ent * |Ent|` of the log-std stage.
    pub sigma_box_bound: f64,
    /// Infinity norm of the log-std step actually taken.
    pub sigma_step_inf: f64,
}

/// Two-stage Gaussian update: the mean moves through [`inner_solve`] with
/// the log-stds frozen, then the log-stds ascend the surrogate by projected
/// gradient inside the entropy-proportional box. The second stage starts at
/// the current log-stds, so its objective never falls below the stage-one
/// value, and a bisection keeps the combined step inside the trust region.
pub fn alternating_gaussian_step(
    anchor: &PolicyParams,
    buffer: &TrajectoryBatch,
    adv: &AdvantageTable,
    delta: f64,
    config: &StroConfig,
    rng: &mut StdRng,
) -> Result<AlternatingResult> {
    let gaussian = match anchor {
        PolicyParams::Gaussian(g) => g,
        PolicyParams::Categorical(_) => {
            return Err(Error::InvalidArgument(
                "alternating update requires a Gaussian policy".into(),
            ))
        }
    };
    let mean_len = gaussian.spec().mean_params();
    let n_params = anchor.n_params();
    let mean_block = ParamBlock {
        offset: 0,
        len: mean_len,
    };
    let sigma_block = ParamBlock {
        offset: mean_len,
        len: n_params - mean_len,
    };

    let stage1 = inner_solve(anchor, mean_block, buffer, adv, delta, config, rng)?;
    let box_bound = config.sigma_bound_scale * sample_entropy(anchor, buffer)?.abs();
    if box_bound == 0.0 {
        return Ok(AlternatingResult {
            policy: stage1.policy,
            steps: stage1.steps,
            cg_fallbacks: stage1.cg_fallbacks,
            sigma_clamp_events: stage1.sigma_clamp_events,
            sigma_box_bound: 0.0,
            sigma_step_inf: 0.0,
        });
    }

    let all: Vec<usize> = (0..buffer.len()).collect();
    let stage1_full = stage1.policy.param_vector();
    let sigma_center = sigma_block.extract(&anchor.param_vector());
    let with_sigma = |sigma: &DVector<f64>| -> Result<PolicyParams> {
        let mut full = stage1_full.clone();
        sigma_block.write(&mut full, sigma);
        Ok(stage1.policy.with_param_vector(&full)?.0)
    };
    let objective = |sigma: &DVector<f64>| -> (f64, DVector<f64>) {
        match with_sigma(sigma)
            .and_then(|p| empirical_l_g_d(&p, anchor, buffer, adv, &all))
        {
            Ok((l, g_full, _)) => (l, sigma_block.extract(&g_full)),
            Err(_) => (f64::NAN, DVector::zeros(sigma_block.len)),
        }
    };
    let proposal = projected_gradient_box(
        objective,
        &sigma_center,
        box_bound,
        &sigma_center,
        config.sigma_steps,
    )?;

    // Keep the full step inside the trust region without giving back the
    // stage-one surrogate value; the stage-one point itself always
    // qualifies.
    let l_stage1 = empirical_l(&stage1.policy, anchor, buffer, adv, &all)?;
    // Clamping keeps the infinity-norm bound exact: the clamp endpoints
    // themselves round, so nudge until the recomputed step is inside.
    let clip = |sigma: &DVector<f64>| -> DVector<f64> {
        DVector::from_fn(sigma.len(), |i, _| {
            let center = sigma_center[i];
            let mut v = sigma[i].clamp(center - box_bound, center + box_bound);
            while (v - center).abs() > box_bound {
                v = if v > center { v.next_down() } else { v.next_up() };
            }
            v
        })
    };
    let mut chosen = sigma_center.clone();
    let mut t = 1.0;
    for _ in 0..60 {
        let cand_sigma = clip(&(&sigma_center + t * (&proposal - &sigma_center)));
        let cand = with_sigma(&cand_sigma)?;
        let d = empirical_d(&cand, anchor, buffer, &all)?;
        let l = empirical_l(&cand, anchor, buffer, adv, &all)?;
        if d <= delta + 1e-12 && l >= l_stage1 - 1e-12 {
            chosen = cand_sigma;
            break;
        }
        t *= 0.5;
    }
    let (policy, clamped) = {
        let mut full = stage1_full.clone();
        sigma_block.write(&mut full, &chosen);
        stage1.policy.with_param_vector(&full)?
    };
    let sigma_step_inf = (&chosen - &sigma_center).amax();
    Ok(AlternatingResult {
        policy,
        steps: stage1.steps,
        cg_fallbacks: stage1.cg_fallbacks,
        sigma_clamp_events: stage1.sigma_clamp_events + clamped,
        sigma_box_bound: box_bound,
        sigma_step_inf,
    })
}

/// Run the stochastic trust-region loop until the iteration or environment
/// step budget is exhausted. Deterministic given the config seed.
pub fn run_stro<E: Env + ?Sized>(
    env: &mut E,
    initial_policy: PolicyParams,
    initial_baseline: ValueBaseline,
    config: &StroConfig,
) -> Result<RunResult> {
    config.validate()?;
    let n_max = config.effective_n_max();
    let gamma = env.spec().discount;
    let mut rng = StdRng::seed_from_u64(config.seed);

    let first_seed = rng.random();
    let mut state = TrustRegionState {
        buffer: collect(env, &initial_policy, config.n, first_seed)?,
        policy: initial_policy,
        mu: config.mu0,
        rejections: Vec::new(),
        consecutive_rejections: 0,
    };
    let mut baseline = initial_baseline;
    let mut env_steps = config.n;
    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    let mut accepted = Vec::new();

    for iter in 0..config.max_iters {
        // An iteration needs the trial batch and possibly a rejection
        // resample; never start one the step budget cannot cover.
        if env_steps.saturating_add(2 * config.n) > config.max_env_steps {
            break;
        }
        let adv = {
            let raw = gae(&state.buffer, &baseline, gamma, config.gae_lambda)?;
            if config.normalize_advantages {
                raw.normalized()
            } else {
                raw
            }
        };
        let all: Vec<usize> = (0..state.buffer.len()).collect();
        let (l_old, g_full, _) =
            empirical_l_g_d(&state.policy, &state.policy, &state.buffer, &adv, &all)?;
        let delta = state.mu * g_full.norm();
        let entropy_old = sample_entropy(&state.policy, &state.buffer)?;
        let buffer_before = state.buffer.len();

        let (trial_policy, inner_steps, cg_fallbacks, clamp_events, sigma_box, sigma_step) =
            if config.npg_mode {
                // Ablation: a single preconditioned step over all
                // parameters, no alternating stage.
                let single_step = StroConfig {
                    max_inner_iters: 1,
                    ..config.clone()
                };
                let block = ParamBlock::full(state.policy.n_params());
                let inner = inner_solve(
                    &state.policy,
                    block,
                    &state.buffer,
                    &adv,
                    delta,
                    &single_step,
                    &mut rng,
                )?;
                (inner.policy, inner.steps, inner.cg_fallbacks, inner.sigma_clamp_events, 0.0, 0.0)
            } else {
                match &state.policy {
                    PolicyParams::Gaussian(_) => {
                        let alt = alternating_gaussian_step(
                            &state.policy,
                            &state.buffer,
                            &adv,
                            delta,
                            config,
                            &mut rng,
                        )?;
                        (
                            alt.policy,
                            alt.steps,
                            alt.cg_fallbacks,
                            alt.sigma_clamp_events,
                            alt.sigma_box_bound,
                            alt.sigma_step_inf,
                        )
                    }
                    PolicyParams::Categorical(_) => {
                        let block = ParamBlock::full(state.policy.n_params());
                        let inner = inner_solve(
                            &state.policy,
                            block,
                            &state.buffer,
                            &adv,
                            delta,
                            config,
                            &mut rng,
                        )?;
                        (inner.policy, inner.steps, inner.cg_fallbacks, inner.sigma_clamp_events, 0.0, 0.0)
                    }
                }
            };

        let trial_seed = rng.random();
        let trial_batch = collect(env, &trial_policy, config.n, trial_seed)?;
        env_steps += config.n;

        let l_trial = empirical_l(&trial_policy, &state.policy, &state.buffer, &adv, &all)?;
        let d_trial = empirical_d(&trial_policy, &state.policy, &state.buffer, &all)?;
        let entropy_trial = sample_entropy(&trial_policy, &state.buffer)?;
        let l_curvature = surrogate_curvature(&state.policy, &g_full, &state.buffer, &adv, &all)?;
        let sigma_eta = state.buffer.sigma_eta_hat;
        let ratio = stochastic_ratio(
            trial_batch.eta_hat,
            state.buffer.eta_hat,
            sigma_eta,
            l_trial,
            l_old,
        );
        let eta_hat_old = state.buffer.eta_hat;
        let eta_hat_trial = trial_batch.eta_hat;

        // Critic refit on the buffer this iteration optimized over, before
        // the acceptance rule replaces it.
        let new_baseline = if config.baseline_epochs == 0 {
            fit_baseline(&baseline, &state.buffer, &adv)?
        } else {
            fit_baseline_iterative(
                &baseline,
                &state.buffer,
                &adv,
                config.baseline_epochs,
                config.baseline_step_size,
            )?
        };

        let decision = accept_or_reject(
            &mut state,
            trial_policy,
            trial_batch,
            ratio,
            config.beta1,
            n_max,
        );
        if decision == Decision::Reject {
            let fresh_seed = rng.random();
            let fresh = collect(env, &state.policy, config.n, fresh_seed)?;
            env_steps += config.n;
            state.buffer.merge(fresh);
        }
        state.mu = update_mu(state.mu, ratio, config);
        baseline = new_baseline;
        if matches!(decision, Decision::Accept | Decision::Force) {
            accepted.push((iter, state.policy.clone()));
        }

        records.push(IterationRecord {
            iter,
            eta_hat_old,
            eta_hat_trial,
            sigma_eta_hat: sigma_eta,
            l_improvement: l_trial - l_old,
            ratio,
            decision,
            entropy: entropy_old,
            delta,
        });
        diagnostics.push(IterDiag {
            buffer_before,
            buffer_after: state.buffer.len(),
            d_hat_trial: d_trial,
            sigma_box_bound: sigma_box,
            sigma_step_inf: sigma_step,
            entropy_trial,
            l_curvature,
            inner_steps,
            cg_fallbacks,
            sigma_clamp_events: clamp_events,
            vanilla_ratio_fallback: sigma_eta.is_none(),
            mu_after: state.mu,
            env_steps_after: env_steps,
        });
    }

    Ok(RunResult {
        records,
        diagnostics,
        accepted,
        final_policy: state.policy,
        final_baseline: baseline,
        env_steps,
    })
}
