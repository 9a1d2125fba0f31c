//! Deterministic-track integration tests on the built-in chain task.

use stro_core::envs::{ChainEnv, Env};
use stro_core::mdp::{value_iteration, TabularPolicy};
use stro_core::tabular::{check_lemma_bounds, run, TrConfig};

#[test]
fn chain_converges_from_five_random_starts() {
    let mdp = ChainEnv::new(0).exact_mdp().unwrap();
    let (_, eta_star) = value_iteration(&mdp, 1e-13).unwrap();
    let config = TrConfig {
        tol_astar: 1e-10,
        ..TrConfig::default()
    };
    let mut finals = Vec::new();
    for seed in 0..5 {
        let init = TabularPolicy::random(8, 2, 1000 + seed);
        let trace = run(&mdp, &init, &config).unwrap();
        assert!(trace.converged, "seed {seed}");
        finals.push(trace.final_eta);
    }
    for (i, eta) in finals.iter().enumerate() {
        assert!(
            (eta - eta_star).abs() < 1e-6,
            "seed {i}: {eta} vs optimal {eta_star}"
        );
        assert!((eta - finals[0]).abs() < 1e-9, "multi-start mismatch at {i}");
    }
}

#[test]
fn chain_run_satisfies_lemma_bounds() {
    // The chain starts at a point mass, so the ratio lower bound (which
    // needs p0 > 0) is vacuous here, but model improvement and TV
    // feasibility still must hold on every iteration.
    let mdp = ChainEnv::new(0).exact_mdp().unwrap();
    let init = TabularPolicy::uniform(8, 2);
    let trace = run(&mdp, &init, &TrConfig::default()).unwrap();
    assert!(trace.converged);
    let violations = check_lemma_bounds(&mdp, &trace);
    assert!(violations.is_empty(), "{violations:?}");
}
