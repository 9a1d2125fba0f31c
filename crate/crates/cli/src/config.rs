//! Run-file schemas for the two drivers. The `[tr]` and `[stro]` tables use
//! the config structs' own field names, so files mirror the library types
//! one to one. TOML and JSON are both accepted.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use stro_core::envs::{make_env_with, Env, EnvKind, EnvOverrides};
use stro_core::driver::StroConfig;
use stro_core::mdp::{random_mdp, Mdp, TabularPolicy};
use stro_core::policy::{CategoricalPolicyParams, GaussianPolicyParams, MeanModelSpec, PolicyParams};
use stro_core::sampler::ValueBaseline;
use stro_core::tabular::TrConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Chain,
    Gridworld,
    Random,
}

fn default_problem_states() -> usize {
    5
}
fn default_problem_actions() -> usize {
    3
}
fn default_discount() -> f64 {
    0.9
}

/// Which MDP the deterministic track runs on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    #[serde(default = "default_problem_states")]
    pub n_states: usize,
    #[serde(default = "default_problem_actions")]
    pub n_actions: usize,
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicyKind {
    Uniform,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitConfig {
    pub kind: InitPolicyKind,
    #[serde(default)]
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            kind: InitPolicyKind::Uniform,
            seed: 0,
        }
    }
}

/// Run file of the `tabular` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularRunFile {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default = "default_tr")]
    pub tr: TrConfig,
}

fn default_tr() -> TrConfig {
    TrConfig::default()
}

impl TabularRunFile {
    pub fn build_mdp(&self) -> Result<Mdp> {
        Ok(match self.problem.kind {
            ProblemKind::Chain => stro_core::envs::ChainEnv::new(0)
                .exact_mdp()
                .expect("chain exports its MDP"),
            ProblemKind::Gridworld => stro_core::envs::GridworldEnv::new(0)
                .exact_mdp()
                .expect("gridworld exports its MDP"),
            ProblemKind::Random => random_mdp(
                self.problem.n_states,
                self.problem.n_actions,
                self.problem.discount,
                self.problem.seed,
            ),
        })
    }

    pub fn build_init(&self, mdp: &Mdp) -> TabularPolicy {
        match self.init.kind {
            InitPolicyKind::Uniform => TabularPolicy::uniform(mdp.n_states(), mdp.n_actions()),
            InitPolicyKind::Random => {
                TabularPolicy::random(mdp.n_states(), mdp.n_actions(), self.init.seed)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Gaussian,
    Categorical,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    #[serde(default)]
    pub init_log_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvConfig {
    pub kind: EnvKind,
    #[serde(flatten, default)]
    pub overrides: EnvOverrides,
}

fn default_checkpoint_every() -> usize {
    0
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OutputConfig {
    /// Write a policy checkpoint every this many iterations; 0 disables.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

/// Run file of the `stro` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StroRunFile {
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    #[serde(default = "default_stro")]
    pub stro: StroConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_stro() -> StroConfig {
    StroConfig::default()
}

impl StroRunFile {
    pub fn build_env(&self) -> Box<dyn Env> {
        make_env_with(self.env.kind, 0, &self.env.overrides)
    }

    pub fn build_policy(&self, env: &dyn Env) -> Result<PolicyParams> {
        let spec = env.spec();
        match self.policy.kind {
            PolicyKind::Gaussian => {
                if spec.is_discrete() {
                    bail!("gaussian policies need a continuous-action environment");
                }
                Ok(PolicyParams::Gaussian(GaussianPolicyParams::new(
                    MeanModelSpec::linear(spec.obs_dim, spec.action_dim),
                    self.policy.init_log_std,
                )))
            }
            PolicyKind::Categorical => {
                if !spec.is_discrete() {
                    bail!("categorical policies need a discrete environment");
                }
                Ok(PolicyParams::Categorical(CategoricalPolicyParams::new(
                    spec.obs_dim,
                    spec.action_dim,
                )))
            }
        }
    }

    pub fn build_baseline(&self, env: &dyn Env) -> ValueBaseline {
        let spec = env.spec();
        if spec.is_discrete() {
            ValueBaseline::tabular(spec.obs_dim)
        } else {
            ValueBaseline::quadratic(spec.obs_dim)
        }
    }
}

pub fn load<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let is_json = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("json"))
        .unwrap_or(false);
    if is_json {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
