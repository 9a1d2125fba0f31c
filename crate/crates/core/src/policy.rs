//! Policy parameterizations for the stochastic track: diagonal Gaussians
//! with a state-independent covariance (tabular or linear-in-features mean
//! maps) and a tabular-softmax categorical policy for the discrete tasks.
//!
//! All parameters flatten into one vector, mean block first and log-std
//! (or logits) after; that is the layout the inner solver, the line search
//! and the Fisher products operate on.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::RngExt;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::{Action, Obs};
use crate::error::{Error, Result};
use crate::mdp::TabularPolicy;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Default lower bound on the log standard deviations.
pub const DEFAULT_LOG_SIGMA_FLOOR: f64 = -20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanModelKind {
    /// One mean vector per discrete state.
    Tabular,
    /// `mu(x) = W x` on the raw observation vector.
    Linear,
}

/// Shape of a Gaussian policy's mean map. For tabular means `feature_dim`
/// is the number of states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeanModelSpec {
    pub kind: MeanModelKind,
    pub feature_dim: usize,
    pub action_dim: usize,
}

impl MeanModelSpec {
    pub fn tabular(n_states: usize, action_dim: usize) -> Self {
        MeanModelSpec {
            kind: MeanModelKind::Tabular,
            feature_dim: n_states,
            action_dim,
        }
    }

    pub fn linear(feature_dim: usize, action_dim: usize) -> Self {
        MeanModelSpec {
            kind: MeanModelKind::Linear,
            feature_dim,
            action_dim,
        }
    }

    pub fn mean_params(&self) -> usize {
        self.feature_dim * self.action_dim
    }
}

/// Diagonal Gaussian policy `N(mu(s), diag(exp(2 log_std)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicyParams {
    spec: MeanModelSpec,
    /// Tabular: `n_states x action_dim`, one row per state.
    /// Linear: `action_dim x feature_dim`.
    mean: DMatrix<f64>,
    log_std: DVector<f64>,
    log_sigma_floor: f64,
}

impl GaussianPolicyParams {
    pub fn new(spec: MeanModelSpec, init_log_std: f64) -> Self {
        let mean = match spec.kind {
            MeanModelKind::Tabular => DMatrix::zeros(spec.feature_dim, spec.action_dim),
            MeanModelKind::Linear => DMatrix::zeros(spec.action_dim, spec.feature_dim),
        };
        GaussianPolicyParams {
            spec,
            mean,
            log_std: DVector::from_element(spec.action_dim, init_log_std),
            log_sigma_floor: DEFAULT_LOG_SIGMA_FLOOR,
        }
    }

    pub fn spec(&self) -> &MeanModelSpec {
        &self.spec
    }

    pub fn log_std(&self) -> &DVector<f64> {
        &self.log_std
    }

    pub fn stds(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    pub fn mean_matrix(&self) -> &DMatrix<f64> {
        &self.mean
    }

    pub fn set_mean_entry(&mut self, i: usize, j: usize, value: f64) {
        self.mean[(i, j)] = value;
    }

    pub fn set_log_std(&mut self, log_std: DVector<f64>) {
        self.log_std = log_std;
    }

    /// Weight matrix `action_dim x feature_dim` for linear means.
    pub fn linear_weights(&self) -> Option<&DMatrix<f64>> {
        match self.spec.kind {
            MeanModelKind::Linear => Some(&self.mean),
            MeanModelKind::Tabular => None,
        }
    }

    pub fn mean_at(&self, obs: &Obs) -> DVector<f64> {
        match (self.spec.kind, obs) {
            (MeanModelKind::Tabular, Obs::Discrete(s)) => self.mean.row(*s).transpose(),
            (MeanModelKind::Linear, Obs::Vector(x)) => &self.mean * x,
            _ => panic!("observation kind does not match the mean model"),
        }
    }

    /// `a = mu(s) + exp(log_std) .* eps` for a supplied noise vector.
    pub fn action_with_noise(&self, obs: &Obs, eps: &DVector<f64>) -> Result<DVector<f64>> {
        if eps.len() != self.spec.action_dim {
            return Err(Error::ShapeMismatch("noise dimension".into()));
        }
        let mut a = self.mean_at(obs);
        for i in 0..a.len() {
            a[i] += self.log_std[i].exp() * eps[i];
        }
        Ok(a)
    }

    fn action_slice(action: &Action) -> &DVector<f64> {
        match action {
            Action::Vector(a) => a,
            Action::Discrete(_) => panic!("gaussian policy takes continuous actions"),
        }
    }

    pub fn log_prob(&self, obs: &Obs, action: &Action) -> f64 {
        let a = Self::action_slice(action);
        let mu = self.mean_at(obs);
        let n = self.spec.action_dim;
        let mut lp = -(n as f64) * 0.5 * LN_2PI;
        for i in 0..n {
            let sigma = self.log_std[i].exp();
            let z = (a[i] - mu[i]) / sigma;
            lp -= 0.5 * z * z + self.log_std[i];
        }
        lp
    }

    /// Entropy `1' log_std + n/2 (1 + ln 2 pi)`; state-independent.
    pub fn entropy(&self) -> f64 {
        self.log_std.sum() + self.spec.action_dim as f64 * 0.5 * (1.0 + LN_2PI)
    }

    pub fn n_params(&self) -> usize {
        self.spec.mean_params() + self.spec.action_dim
    }

    pub fn mean_block(&self) -> Range<usize> {
        0..self.spec.mean_params()
    }

    pub fn sigma_block(&self) -> Range<usize> {
        self.spec.mean_params()..self.n_params()
    }

    fn write_mean_grad(&self, obs: &Obs, w: &DVector<f64>, out: &mut DVector<f64>) {
        // Accumulate J^T w into the mean block, J = d mu / d theta_mu.
        match (self.spec.kind, obs) {
            (MeanModelKind::Tabular, Obs::Discrete(s)) => {
                let d = self.spec.action_dim;
                for i in 0..d {
                    out[s * d + i] += w[i];
                }
            }
            (MeanModelKind::Linear, Obs::Vector(x)) => {
                let f = self.spec.feature_dim;
                for i in 0..self.spec.action_dim {
                    for j in 0..f {
                        out[i * f + j] += w[i] * x[j];
                    }
                }
            }
            _ => panic!("observation kind does not match the mean model"),
        }
    }
}

/// Tabular-softmax categorical policy over discrete states and actions.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalPolicyParams {
    n_states: usize,
    n_actions: usize,
    /// Row-major `n_states x n_actions`.
    logits: DMatrix<f64>,
}

impl CategoricalPolicyParams {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        CategoricalPolicyParams {
            n_states,
            n_actions,
            logits: DMatrix::zeros(n_states, n_actions),
        }
    }

    pub fn from_logits(logits: DMatrix<f64>) -> Result<Self> {
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::InvalidPolicy("non-finite logits".into()));
        }
        Ok(CategoricalPolicyParams {
            n_states: logits.nrows(),
            n_actions: logits.ncols(),
            logits,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn probs_at(&self, s: usize) -> DVector<f64> {
        let row = self.logits.row(s);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p = DVector::from_fn(self.n_actions, |a, _| (row[a] - m).exp());
        let sum = p.sum();
        p /= sum;
        p
    }

    /// Exact row-softmax projection to a tabular policy.
    pub fn to_tabular(&self) -> TabularPolicy {
        let mut probs = vec![0.0; self.n_states * self.n_actions];
        for s in 0..self.n_states {
            let p = self.probs_at(s);
            for a in 0..self.n_actions {
                probs[s * self.n_actions + a] = p[a];
            }
        }
        TabularPolicy::new(self.n_states, self.n_actions, probs).expect("softmax rows are valid")
    }

    fn state_of(obs: &Obs) -> usize {
        obs.as_discrete().expect("categorical policy takes discrete states")
    }

    pub fn log_prob(&self, obs: &Obs, action: &Action) -> f64 {
        let s = Self::state_of(obs);
        let a = match action {
            Action::Discrete(a) => *a,
            Action::Vector(_) => panic!("categorical policy takes discrete actions"),
        };
        let row = self.logits.row(s);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        self.logits[(s, a)] - lse
    }

    pub fn entropy_at(&self, s: usize) -> f64 {
        let p = self.probs_at(s);
        -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
    }

    pub fn n_params(&self) -> usize {
        self.n_states * self.n_actions
    }
}

/// Either policy representation, behind the interface the stochastic driver
/// uses: flattened parameters, log-density gradients, exact per-state KL and
/// entropy, and matrix-free Fisher products.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyParams {
    Gaussian(GaussianPolicyParams),
    Categorical(CategoricalPolicyParams),
}

impl PolicyParams {
    pub fn n_params(&self) -> usize {
        match self {
            PolicyParams::Gaussian(g) => g.n_params(),
            PolicyParams::Categorical(c) => c.n_params(),
        }
    }

    pub fn param_vector(&self) -> DVector<f64> {
        match self {
            PolicyParams::Gaussian(g) => {
                let mut v = DVector::zeros(g.n_params());
                let mp = g.spec.mean_params();
                // Row-major over the stored matrix.
                let mut k = 0;
                for i in 0..g.mean.nrows() {
                    for j in 0..g.mean.ncols() {
                        v[k] = g.mean[(i, j)];
                        k += 1;
                    }
                }
                for i in 0..g.spec.action_dim {
                    v[mp + i] = g.log_std[i];
                }
                v
            }
            PolicyParams::Categorical(c) => {
                let mut v = DVector::zeros(c.n_params());
                let mut k = 0;
                for s in 0..c.n_states {
                    for a in 0..c.n_actions {
                        v[k] = c.logits[(s, a)];
                        k += 1;
                    }
                }
                v
            }
        }
    }

    /// Install a parameter vector. Gaussian log-stds are clamped to the
    /// sigma floor; returns how many entries were clamped so callers can
    /// log the event.
    pub fn set_param_vector(&mut self, v: &DVector<f64>) -> Result<usize> {
        if v.len() != self.n_params() {
            return Err(Error::ShapeMismatch("parameter vector length".into()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        match self {
            PolicyParams::Gaussian(g) => {
                let mut k = 0;
                for i in 0..g.mean.nrows() {
                    for j in 0..g.mean.ncols() {
                        g.mean[(i, j)] = v[k];
                        k += 1;
                    }
                }
                let mut clamped = 0;
                for i in 0..g.spec.action_dim {
                    let raw = v[k + i];
                    if raw < g.log_sigma_floor {
                        g.log_std[i] = g.log_sigma_floor;
                        clamped += 1;
                    } else {
                        g.log_std[i] = raw;
                    }
                }
                Ok(clamped)
            }
            PolicyParams::Categorical(c) => {
                let mut k = 0;
                for s in 0..c.n_states {
                    for a in 0..c.n_actions {
                        c.logits[(s, a)] = v[k];
                        k += 1;
                    }
                }
                Ok(0)
            }
        }
    }

    pub fn with_param_vector(&self, v: &DVector<f64>) -> Result<(Self, usize)> {
        let mut out = self.clone();
        let clamped = out.set_param_vector(v)?;
        Ok((out, clamped))
    }

    pub fn sample(&self, obs: &Obs, rng: &mut StdRng) -> Action {
        match self {
            PolicyParams::Gaussian(g) => {
                let eps = DVector::from_fn(g.spec.action_dim, |_, _| rng.sample(StandardNormal));
                Action::Vector(g.action_with_noise(obs, &eps).expect("noise dims match"))
            }
            PolicyParams::Categorical(c) => {
                let p = c.probs_at(CategoricalPolicyParams::state_of(obs));
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut choice = c.n_actions - 1;
                for a in 0..c.n_actions {
                    acc += p[a];
                    if u < acc {
                        choice = a;
                        break;
                    }
                }
                Action::Discrete(choice)
            }
        }
    }

    pub fn log_prob(&self, obs: &Obs, action: &Action) -> f64 {
        match self {
            PolicyParams::Gaussian(g) => g.log_prob(obs, action),
            PolicyParams::Categorical(c) => c.log_prob(obs, action),
        }
    }

    /// Log density and its gradient with respect to the full parameter
    /// vector.
    pub fn log_prob_grad(&self, obs: &Obs, action: &Action) -> (f64, DVector<f64>) {
        let mut grad = DVector::zeros(self.n_params());
        let lp = self.accumulate_log_prob_grad(obs, action, 1.0, &mut grad);
        (lp, grad)
    }

    /// Add `scale * d log pi(a|s) / d theta` into `out`; returns the log
    /// density. Lets estimator loops reuse one accumulator.
    pub fn accumulate_log_prob_grad(
        &self,
        obs: &Obs,
        action: &Action,
        scale: f64,
        out: &mut DVector<f64>,
    ) -> f64 {
        match self {
            PolicyParams::Gaussian(g) => {
                let a = GaussianPolicyParams::action_slice(action);
                let mu = g.mean_at(obs);
                let n = g.spec.action_dim;
                let mp = g.spec.mean_params();
                let mut lp = -(n as f64) * 0.5 * LN_2PI;
                let mut w = DVector::zeros(n);
                for i in 0..n {
                    let sigma = g.log_std[i].exp();
                    let z = (a[i] - mu[i]) / sigma;
                    lp -= 0.5 * z * z + g.log_std[i];
                    w[i] = scale * z / sigma; // d logp / d mu_i, scaled
                    out[mp + i] += scale * (z * z - 1.0); // d logp / d log_std_i
                }
                // The borrow of `out` is disjoint from the mean block write.
                let mut mean_grad = DVector::zeros(mp);
                g.write_mean_grad(obs, &w, &mut mean_grad);
                for k in 0..mp {
                    out[k] += mean_grad[k];
                }
                lp
            }
            PolicyParams::Categorical(c) => {
                let s = CategoricalPolicyParams::state_of(obs);
                let a = match action {
                    Action::Discrete(a) => *a,
                    Action::Vector(_) => panic!("categorical policy takes discrete actions"),
                };
                let p = c.probs_at(s);
                for b in 0..c.n_actions {
                    let indicator = if b == a { 1.0 } else { 0.0 };
                    out[s * c.n_actions + b] += scale * (indicator - p[b]);
                }
                c.log_prob(obs, action)
            }
        }
    }

    /// Exact KL divergence `KL(self(.|s) || new(.|s))` at one state.
    pub fn kl(&self, new: &PolicyParams, obs: &Obs) -> f64 {
        match (self, new) {
            (PolicyParams::Gaussian(old), PolicyParams::Gaussian(new)) => {
                let mu_o = old.mean_at(obs);
                let mu_n = new.mean_at(obs);
                let mut kl = 0.0;
                for i in 0..old.spec.action_dim {
                    let so = old.log_std[i].exp();
                    let sn = new.log_std[i].exp();
                    let d = mu_n[i] - mu_o[i];
                    kl += new.log_std[i] - old.log_std[i] + (so * so + d * d) / (2.0 * sn * sn)
                        - 0.5;
                }
                kl
            }
            (PolicyParams::Categorical(old), PolicyParams::Categorical(new)) => {
                let s = CategoricalPolicyParams::state_of(obs);
                let po = old.probs_at(s);
                let pn = new.probs_at(s);
                let mut kl = 0.0;
                for a in 0..old.n_actions {
                    if po[a] > 0.0 {
                        kl += po[a] * (po[a].ln() - pn[a].ln());
                    }
                }
                kl
            }
            _ => panic!("cannot mix policy families"),
        }
    }

    /// Gradient of `KL(self || new)` with respect to `new`'s parameters at
    /// one state. Used by the finite-difference Fisher oracle.
    pub fn kl_grad_new(&self, new: &PolicyParams, obs: &Obs) -> DVector<f64> {
        let mut out = DVector::zeros(new.n_params());
        match (self, new) {
            (PolicyParams::Gaussian(old), PolicyParams::Gaussian(newg)) => {
                let mu_o = old.mean_at(obs);
                let mu_n = newg.mean_at(obs);
                let n = newg.spec.action_dim;
                let mp = newg.spec.mean_params();
                let mut w = DVector::zeros(n);
                for i in 0..n {
                    let so = old.log_std[i].exp();
                    let sn = newg.log_std[i].exp();
                    let d = mu_n[i] - mu_o[i];
                    w[i] = d / (sn * sn);
                    out[mp + i] = 1.0 - (so * so + d * d) / (sn * sn);
                }
                let mut mean_grad = DVector::zeros(mp);
                newg.write_mean_grad(obs, &w, &mut mean_grad);
                for k in 0..mp {
                    out[k] += mean_grad[k];
                }
            }
            (PolicyParams::Categorical(old), PolicyParams::Categorical(newc)) => {
                let s = CategoricalPolicyParams::state_of(obs);
                let po = old.probs_at(s);
                let pn = newc.probs_at(s);
                for a in 0..newc.n_actions {
                    out[s * newc.n_actions + a] = pn[a] - po[a];
                }
            }
            _ => panic!("cannot mix policy families"),
        }
        out
    }

    /// Per-state entropy. Gaussian entropy is state-independent.
    pub fn entropy_at(&self, obs: &Obs) -> f64 {
        match self {
            PolicyParams::Gaussian(g) => g.entropy(),
            PolicyParams::Categorical(c) => {
                c.entropy_at(CategoricalPolicyParams::state_of(obs))
            }
        }
    }

    /// Matrix-free product with the sample-average KL Hessian at the current
    /// parameters (the empirical Fisher information), plus `damping * v`.
    ///
    /// For the diagonal Gaussian the Hessian is block diagonal: the mean
    /// block is `J^T Sigma^{-1} J` per state and the log-std block is `2 I`.
    /// For the softmax policy each visited state contributes
    /// `diag(p) - p p^T` on its logit row.
    pub fn fim_vec<'a, I>(&self, states: I, v: &DVector<f64>, damping: f64) -> Result<DVector<f64>>
    where
        I: IntoIterator<Item = &'a Obs>,
    {
        let mut out = DVector::zeros(self.n_params());
        let mut count = 0usize;
        match self {
            PolicyParams::Gaussian(g) => {
                let n = g.spec.action_dim;
                let mp = g.spec.mean_params();
                for obs in states {
                    count += 1;
                    // u = J v_mean (the mean displacement this state sees).
                    let mut u = DVector::zeros(n);
                    match (g.spec.kind, obs) {
                        (MeanModelKind::Tabular, Obs::Discrete(s)) => {
                            for i in 0..n {
                                u[i] = v[s * n + i];
                            }
                        }
                        (MeanModelKind::Linear, Obs::Vector(x)) => {
                            let f = g.spec.feature_dim;
                            for i in 0..n {
                                let mut acc = 0.0;
                                for j in 0..f {
                                    acc += v[i * f + j] * x[j];
                                }
                                u[i] = acc;
                            }
                        }
                        _ => panic!("observation kind does not match the mean model"),
                    }
                    for i in 0..n {
                        let sigma = g.log_std[i].exp();
                        u[i] /= sigma * sigma;
                    }
                    let mut mean_grad = DVector::zeros(mp);
                    g.write_mean_grad(obs, &u, &mut mean_grad);
                    for k in 0..mp {
                        out[k] += mean_grad[k];
                    }
                }
                if count == 0 {
                    return Err(Error::EmptyBatch("fim_vec"));
                }
                for k in 0..mp {
                    out[k] /= count as f64;
                }
                // Log-std block: 2 I for every state, so the average is 2 I.
                for i in 0..n {
                    out[mp + i] = 2.0 * v[mp + i];
                }
            }
            PolicyParams::Categorical(c) => {
                for obs in states {
                    count += 1;
                    let s = CategoricalPolicyParams::state_of(obs);
                    let p = c.probs_at(s);
                    let block = s * c.n_actions;
                    let mut pv = 0.0;
                    for a in 0..c.n_actions {
                        pv += p[a] * v[block + a];
                    }
                    for a in 0..c.n_actions {
                        out[block + a] += p[a] * v[block + a] - p[a] * pv;
                    }
                }
                if count == 0 {
                    return Err(Error::EmptyBatch("fim_vec"));
                }
                out /= count as f64;
            }
        }
        Ok(out + damping * v)
    }

    pub fn to_json(&self) -> String {
        let data: CheckpointData = self.into();
        serde_json::to_string(&data).expect("policy serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let data: CheckpointData =
            serde_json::from_str(s).map_err(|e| Error::Serialization(e.to_string()))?;
        data.try_into()
    }
}

/// Checkpoint schema: `{spec, theta_mu, theta_sigma}` for Gaussians,
/// `{spec, logits}` for categorical policies.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CheckpointData {
    Gaussian {
        spec: MeanModelSpec,
        theta_mu: Vec<f64>,
        theta_sigma: Vec<f64>,
    },
    Categorical {
        spec: CategoricalSpec,
        logits: Vec<f64>,
    },
}

#[derive(Serialize, Deserialize)]
struct CategoricalSpec {
    n_states: usize,
    n_actions: usize,
}

impl From<&PolicyParams> for CheckpointData {
    fn from(p: &PolicyParams) -> Self {
        match p {
            PolicyParams::Gaussian(g) => {
                let mut theta_mu = Vec::with_capacity(g.spec.mean_params());
                for i in 0..g.mean.nrows() {
                    for j in 0..g.mean.ncols() {
                        theta_mu.push(g.mean[(i, j)]);
                    }
                }
                CheckpointData::Gaussian {
                    spec: g.spec,
                    theta_mu,
                    theta_sigma: g.log_std.iter().cloned().collect(),
                }
            }
            PolicyParams::Categorical(c) => {
                let mut logits = Vec::with_capacity(c.n_params());
                for s in 0..c.n_states {
                    for a in 0..c.n_actions {
                        logits.push(c.logits[(s, a)]);
                    }
                }
                CheckpointData::Categorical {
                    spec: CategoricalSpec {
                        n_states: c.n_states,
                        n_actions: c.n_actions,
                    },
                    logits,
                }
            }
        }
    }
}

impl TryFrom<CheckpointData> for PolicyParams {
    type Error = Error;
    fn try_from(data: CheckpointData) -> Result<Self> {
        match data {
            CheckpointData::Gaussian {
                spec,
                theta_mu,
                theta_sigma,
            } => {
                if theta_mu.len() != spec.mean_params() || theta_sigma.len() != spec.action_dim {
                    return Err(Error::ShapeMismatch("checkpoint dims".into()));
                }
                let mut g = GaussianPolicyParams::new(spec, 0.0);
                let mut k = 0;
                for i in 0..g.mean.nrows() {
                    for j in 0..g.mean.ncols() {
                        g.mean[(i, j)] = theta_mu[k];
                        k += 1;
                    }
                }
                g.log_std = DVector::from_vec(theta_sigma);
                Ok(PolicyParams::Gaussian(g))
            }
            CheckpointData::Categorical { spec, logits } => {
                if logits.len() != spec.n_states * spec.n_actions {
                    return Err(Error::ShapeMismatch("checkpoint dims".into()));
                }
                let m = DMatrix::from_fn(spec.n_states, spec.n_actions, |s, a| {
                    logits[s * spec.n_actions + a]
                });
                Ok(PolicyParams::Categorical(CategoricalPolicyParams::from_logits(m)?))
            }
        }
    }
}
