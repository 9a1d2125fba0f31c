//! Stochastic-track integration tests on the discrete chain task.

use stro_core::driver::{run_stro, Decision, StroConfig};
use stro_core::envs::{ChainEnv, Env};
use stro_core::mdp::{evaluate, value_iteration};
use stro_core::policy::{CategoricalPolicyParams, PolicyParams};
use stro_core::sampler::ValueBaseline;

fn discrete_config(seed: u64) -> StroConfig {
    // Discrete-control defaults: smaller initial coefficient, wider cap.
    StroConfig {
        n: 1024,
        mu0: 0.01,
        mu_min: 0.005,
        mu_max: 0.5,
        max_iters: 400,
        max_env_steps: 120_000,
        seed,
        ..StroConfig::default()
    }
}

#[test]
fn learned_greedy_policy_matches_value_iteration() {
    let mut env = ChainEnv::new(0);
    let mdp = env.exact_mdp().unwrap();
    let (opt, _) = value_iteration(&mdp, 1e-13).unwrap();

    let policy = PolicyParams::Categorical(CategoricalPolicyParams::new(8, 2));
    let baseline = ValueBaseline::tabular(8);
    let result = run_stro(&mut env, policy, baseline, &discrete_config(7)).unwrap();

    let learned = match &result.final_policy {
        PolicyParams::Categorical(c) => c.to_tabular(),
        _ => unreachable!(),
    };
    let mut matches = 0;
    for s in 0..8 {
        let greedy_learned = (0..2)
            .max_by(|&a, &b| {
                learned
                    .prob(s, a)
                    .partial_cmp(&learned.prob(s, b))
                    .unwrap()
                    .then(b.cmp(&a)) // prefer the lower index on ties
            })
            .unwrap();
        let greedy_opt = (0..2)
            .max_by(|&a, &b| {
                opt.prob(s, a)
                    .partial_cmp(&opt.prob(s, b))
                    .unwrap()
                    .then(b.cmp(&a))
            })
            .unwrap();
        if greedy_learned == greedy_opt {
            matches += 1;
        }
    }
    assert!(
        matches as f64 >= 0.9 * 8.0,
        "greedy match on {matches}/8 states"
    );
}

#[test]
fn exact_eta_rises_over_accepted_iterates() {
    let mut env = ChainEnv::new(0);
    let mdp = env.exact_mdp().unwrap();
    let policy = PolicyParams::Categorical(CategoricalPolicyParams::new(8, 2));
    let baseline = ValueBaseline::tabular(8);
    let result = run_stro(&mut env, policy, baseline, &discrete_config(3)).unwrap();

    let accepted_count = result
        .records
        .iter()
        .filter(|r| matches!(r.decision, Decision::Accept | Decision::Force))
        .count();
    assert!(accepted_count >= 10, "only {accepted_count} accepted");

    let mut etas = Vec::new();
    for (_, p) in &result.accepted {
        if let PolicyParams::Categorical(c) = p {
            etas.push(evaluate(&mdp, &c.to_tabular()).unwrap().eta);
        }
    }
    let pairs = etas.windows(2).count();
    let monotone = etas.windows(2).filter(|w| w[1] >= w[0] - 1e-10).count();
    assert!(
        monotone as f64 >= 0.9 * pairs as f64,
        "monotone on {monotone}/{pairs} accepted pairs"
    );
    // The run must actually improve on the uniform start.
    let first = *etas.first().unwrap();
    let last = *etas.last().unwrap();
    assert!(last > first, "no improvement: {first} -> {last}");
}
