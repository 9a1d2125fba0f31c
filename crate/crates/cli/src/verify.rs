//! Runtime verification suite: every numerical kernel re-checked against an
//! independent oracle (dense solves, finite differences, quadrature, grid
//! and vertex enumeration, the improvement lemmas) with its tolerance
//! printed next to the verdict.
//!
//! The mutation mode deliberately corrupts one computation to demonstrate
//! that the corresponding oracle actually bites.

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};

use stro_core::envs::{Action, Obs};
use stro_core::mdp::{evaluate, random_mdp, surrogate_l, TabularPolicy};
use stro_core::numerics::{
    conjugate_gradient, fd_gradient, fd_hessian_vec, feasible_line_search, projected_gradient_box,
    relative_diff, CgConfig, LineSearchConfig,
};
use stro_core::policy::{
    CategoricalPolicyParams, GaussianPolicyParams, MeanModelSpec, PolicyParams, LN_2PI,
};
use stro_core::sampler::{
    empirical_l, empirical_l_g_d, gae, AdvantageTable, TrajectoryBatch, Transition, ValueBaseline,
};
use stro_core::tabular::{check_lemma_bounds, run, solve_tv_subproblem, TrConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    None,
    /// Flip the sign of every computed GAE advantage before comparison.
    GaeSignFlip,
}

impl Mutation {
    pub fn parse(s: &str) -> Option<Mutation> {
        match s {
            "gae-sign-flip" => Some(Mutation::GaeSignFlip),
            _ => None,
        }
    }
}

pub struct CheckOutcome {
    pub name: &'static str,
    pub tolerance: &'static str,
    pub result: Result<(), String>,
}

pub fn run_all(mutation: Mutation) -> Vec<CheckOutcome> {
    let checks: Vec<(&'static str, &'static str, fn(Mutation) -> Result<(), String>)> = vec![
        ("cg-vs-dense-solve", "1e-8 relative", check_cg),
        ("fim-vs-fd-kl-hessian", "1e-4 relative", check_fim),
        ("log-prob-grad-vs-fd", "1e-5 relative", check_log_prob_grad),
        ("surrogate-grad-vs-fd", "1e-5 relative", check_surrogate_grad),
        ("gae-backward-vs-forward", "1e-10 absolute", check_gae),
        ("tv-subproblem-vs-lp-oracle", "1e-9 absolute", check_subproblem),
        ("lemma-bounds-seeded-runs", "1e-9 slack", check_lemmas),
        ("line-search-conditions", "exact re-evaluation", check_line_search),
        ("projected-box-vs-grid", "1e-4 absolute", check_projected_box),
        ("kl-vs-quadrature", "1e-6 absolute", check_kl_quadrature),
    ];
    checks
        .into_iter()
        .map(|(name, tolerance, f)| CheckOutcome {
            name,
            tolerance,
            result: f(mutation),
        })
        .collect()
}

fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() / n as f64 + DMatrix::identity(n, n)
}

fn check_cg(_: Mutation) -> Result<(), String> {
    for seed in 0..10u64 {
        let n = 50;
        let a = random_spd(n, seed);
        let mut rng = StdRng::seed_from_u64(100 + seed);
        let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let cg = conjugate_gradient(|v| &a * v, &b, &CgConfig::for_dim(n))
            .map_err(|e| e.to_string())?;
        let direct = a
            .clone()
            .lu()
            .solve(&b)
            .ok_or_else(|| "dense solve failed".to_string())?;
        let err = (&cg.x - &direct).norm() / direct.norm().max(1.0);
        if err > 1e-8 {
            return Err(format!("seed {seed}: relative error {err:.3e}"));
        }
    }
    Ok(())
}

fn check_fim(_: Mutation) -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(7);
    let mut g = GaussianPolicyParams::new(MeanModelSpec::linear(2, 2), 0.0);
    for i in 0..2 {
        for j in 0..2 {
            g.set_mean_entry(i, j, rng.random_range(-0.5..0.5));
        }
    }
    let policy = PolicyParams::Gaussian(g);
    let states: Vec<Obs> = (0..6)
        .map(|_| Obs::Vector(DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0))))
        .collect();
    let theta0 = policy.param_vector();
    let v = DVector::from_fn(policy.n_params(), |_, _| rng.random_range(-1.0..1.0));
    let analytic = policy
        .fim_vec(states.iter(), &v, 0.0)
        .map_err(|e| e.to_string())?;
    let grad_fn = |theta: &DVector<f64>| {
        let (new, _) = policy.with_param_vector(theta).expect("same shape");
        let mut acc = DVector::zeros(policy.n_params());
        for obs in &states {
            acc += policy.kl_grad_new(&new, obs);
        }
        acc / states.len() as f64
    };
    let fd = fd_hessian_vec(grad_fn, &theta0, &v, 1e-5);
    let err = relative_diff(&analytic, &fd);
    if err > 1e-4 {
        return Err(format!("relative error {err:.3e}"));
    }
    Ok(())
}

fn check_log_prob_grad(_: Mutation) -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(8);
    let mut g = GaussianPolicyParams::new(MeanModelSpec::tabular(3, 2), 0.2);
    for i in 0..3 {
        for j in 0..2 {
            g.set_mean_entry(i, j, rng.random_range(-1.0..1.0));
        }
    }
    let cases: Vec<(PolicyParams, Obs, Action)> = vec![
        (
            PolicyParams::Gaussian(g),
            Obs::Discrete(1),
            Action::Vector(DVector::from_vec(vec![0.4, -0.2])),
        ),
        (
            PolicyParams::Categorical(
                CategoricalPolicyParams::from_logits(DMatrix::from_fn(4, 3, |_, _| {
                    rng.random_range(-1.0..1.0)
                }))
                .expect("finite logits"),
            ),
            Obs::Discrete(2),
            Action::Discrete(1),
        ),
    ];
    for (policy, obs, action) in cases {
        let (_, grad) = policy.log_prob_grad(&obs, &action);
        let theta0 = policy.param_vector();
        let fd = fd_gradient(
            |theta| {
                let (p, _) = policy.with_param_vector(theta).expect("same shape");
                p.log_prob(&obs, &action)
            },
            &theta0,
            1e-6,
        );
        let err = relative_diff(&grad, &fd);
        if err > 1e-5 {
            return Err(format!("relative error {err:.3e}"));
        }
    }
    Ok(())
}

fn synthetic_gaussian_batch(seed: u64, n: usize) -> (PolicyParams, TrajectoryBatch, AdvantageTable) {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut g = GaussianPolicyParams::new(MeanModelSpec::linear(2, 1), 0.0);
    g.set_mean_entry(0, 0, 0.3);
    g.set_mean_entry(0, 1, -0.2);
    let policy = PolicyParams::Gaussian(g);
    let mut transitions = Vec::new();
    for i in 0..n {
        let obs = Obs::Vector(DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)));
        let action = Action::Vector(DVector::from_fn(1, |_, _| rng.random_range(-1.5..1.5)));
        transitions.push(Transition {
            episode: i,
            t: 0,
            obs: obs.clone(),
            action,
            reward: 0.0,
            next_obs: obs,
            done: true,
        });
    }
    let batch = TrajectoryBatch::from_parts(transitions, vec![0.0, 0.1]);
    let adv = AdvantageTable {
        values: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        gamma: 0.99,
        lambda: 0.95,
    };
    (policy, batch, adv)
}

fn check_surrogate_grad(_: Mutation) -> Result<(), String> {
    let (old, batch, adv) = synthetic_gaussian_batch(9, 30);
    let mut rng = StdRng::seed_from_u64(10);
    let theta = old.param_vector()
        + DVector::from_fn(old.n_params(), |_, _| rng.random_range(-0.05..0.05));
    let (new, _) = old.with_param_vector(&theta).expect("same shape");
    let all: Vec<usize> = (0..batch.len()).collect();
    let (_, g, _) = empirical_l_g_d(&new, &old, &batch, &adv, &all).map_err(|e| e.to_string())?;
    let fd = fd_gradient(
        |th| {
            let (p, _) = old.with_param_vector(th).expect("same shape");
            empirical_l(&p, &old, &batch, &adv, &all).expect("valid batch")
        },
        &theta,
        1e-6,
    );
    let err = relative_diff(&g, &fd);
    if err > 1e-5 {
        return Err(format!("relative error {err:.3e}"));
    }
    Ok(())
}

fn check_gae(mutation: Mutation) -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(11);
    for case in 0..50 {
        let len = rng.random_range(1..50usize);
        let episode_len = rng.random_range(1..12usize);
        let mut transitions = Vec::new();
        let mut t = 0usize;
        let mut episode = 0usize;
        for i in 0..len {
            let done = (t + 1) % episode_len == 0 && i + 1 < len;
            transitions.push(Transition {
                episode,
                t,
                obs: Obs::Discrete(rng.random_range(0..3)),
                action: Action::Discrete(0),
                reward: rng.random_range(-1.0..1.0),
                next_obs: Obs::Discrete(rng.random_range(0..3)),
                done,
            });
            if done {
                episode += 1;
                t = 0;
            } else {
                t += 1;
            }
        }
        let batch = TrajectoryBatch::from_parts(transitions, vec![]);
        let mut baseline = ValueBaseline::tabular(3);
        if let ValueBaseline::Tabular { values } = &mut baseline {
            *values = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        }
        let lambda = [0.0, 0.5, 0.95, 1.0][case % 4];
        let gamma = 0.9;
        let computed = gae(&batch, &baseline, gamma, lambda).map_err(|e| e.to_string())?;
        let mut values = computed.values.clone();
        if mutation == Mutation::GaeSignFlip {
            for v in &mut values {
                *v = -*v;
            }
        }
        // Forward-sum oracle.
        let deltas: Vec<f64> = batch
            .transitions
            .iter()
            .map(|tr| {
                let next_v = if tr.done {
                    0.0
                } else {
                    baseline.value(&tr.next_obs).expect("tabular value")
                };
                tr.reward + gamma * next_v - baseline.value(&tr.obs).expect("tabular value")
            })
            .collect();
        for i in 0..len {
            let episode = batch.transitions[i].episode;
            let mut acc = 0.0;
            let mut w = 1.0;
            for j in i..len {
                if batch.transitions[j].episode != episode {
                    break;
                }
                acc += w * deltas[j];
                w *= gamma * lambda;
            }
            if (values[i] - acc).abs() > 1e-10 {
                return Err(format!(
                    "case {case}, index {i}: backward {} vs forward {acc}",
                    values[i]
                ));
            }
        }
    }
    Ok(())
}

fn check_subproblem(_: Mutation) -> Result<(), String> {
    for seed in 0..20u64 {
        let mdp = random_mdp(2, 2, 0.9, 3000 + seed);
        let base = TabularPolicy::random(2, 2, 4000 + seed);
        let eval = evaluate(&mdp, &base).map_err(|e| e.to_string())?;
        let delta = 0.3;
        let solved =
            solve_tv_subproblem(&mdp, &base, &eval, delta).map_err(|e| e.to_string())?;
        let achieved =
            surrogate_l(&mdp, &base, &eval, &solved).map_err(|e| e.to_string())? - eval.eta;

        // Grid plus saturation-vertex enumeration over the budget split.
        let state_gain = |s: usize, tv: f64| -> f64 {
            let (a_star, adv_star) = eval.best_advantage(s);
            let donor = 1 - a_star;
            let gap = (adv_star - eval.adv_at(s, donor)).max(0.0);
            tv.min(base.prob(s, donor)) * gap
        };
        let w = [eval.visit[0], eval.visit[1]];
        let mut candidates: Vec<f64> = (0..=10_000).map(|i| delta * i as f64 / 10_000.0).collect();
        for s in 0..2 {
            let (a_star, _) = eval.best_advantage(s);
            let sat = w[s] * base.prob(s, 1 - a_star);
            candidates.push(if s == 0 {
                sat.min(delta)
            } else {
                (delta - sat).clamp(0.0, delta)
            });
        }
        let oracle = candidates
            .iter()
            .map(|&x| w[0] * state_gain(0, x / w[0]) + w[1] * state_gain(1, (delta - x) / w[1]))
            .fold(f64::NEG_INFINITY, f64::max);
        if (achieved - oracle).abs() > 1e-9 {
            return Err(format!("seed {seed}: greedy {achieved} vs oracle {oracle}"));
        }
    }
    Ok(())
}

fn check_lemmas(_: Mutation) -> Result<(), String> {
    for seed in 0..5u64 {
        let mdp = random_mdp(5, 3, 0.9, 7000 + seed);
        let init = TabularPolicy::random(5, 3, 8000 + seed);
        let config = TrConfig {
            tol_astar: 1e-10,
            ..TrConfig::default()
        };
        let trace = run(&mdp, &init, &config).map_err(|e| e.to_string())?;
        let violations = check_lemma_bounds(&mdp, &trace);
        if !violations.is_empty() {
            return Err(format!("seed {seed}: {} violations", violations.len()));
        }
    }
    Ok(())
}

fn check_line_search(_: Mutation) -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(12);
    for case in 0..30u64 {
        let n = 3;
        let q = random_spd(n, 9000 + case);
        let theta = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let lin = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let eval_l = {
            let q = q.clone();
            let lin = lin.clone();
            move |x: &DVector<f64>| lin.dot(x) - 0.5 * (x.transpose() * &q * x)[(0, 0)]
        };
        let grad = &lin - &q * &theta;
        if grad.norm() < 1e-9 {
            continue;
        }
        let metric = random_spd(n, 9500 + case);
        let anchor = theta.clone();
        let eval_d = move |x: &DVector<f64>| {
            let dx = x - &anchor;
            0.5 * (dx.transpose() * &metric * &dx)[(0, 0)]
        };
        let delta = rng.random_range(1e-4..0.5f64);
        let config = LineSearchConfig::default();
        let alpha = feasible_line_search(&eval_l, &eval_d, &theta, &grad, &grad, delta, &config)
            .map_err(|e| e.to_string())?;
        if alpha > 0.0 {
            let cand = &theta + alpha * &grad;
            let sufficient =
                eval_l(&cand) >= eval_l(&theta) + config.tau_armijo * alpha * grad.norm_squared() - 1e-12;
            let feasible = eval_d(&cand) <= delta + 1e-15;
            if !sufficient || !feasible {
                return Err(format!(
                    "case {case}: alpha {alpha} violates a condition on re-evaluation"
                ));
            }
        }
    }
    Ok(())
}

fn check_projected_box(_: Mutation) -> Result<(), String> {
    for seed in 0..5u64 {
        let mut rng = StdRng::seed_from_u64(11_000 + seed);
        let q = random_spd(2, 12_000 + seed);
        let b = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let obj = {
            let q = q.clone();
            let b = b.clone();
            move |x: &DVector<f64>| {
                let val = b.dot(x) - 0.5 * (x.transpose() * &q * x)[(0, 0)];
                (val, &b - &q * x)
            }
        };
        let center = DVector::from_vec(vec![0.0, 0.0]);
        let radius = 0.5;
        let out = projected_gradient_box(&obj, &center, radius, &center, 500)
            .map_err(|e| e.to_string())?;
        let f_out = obj(&out).0;
        let grid = 500;
        let mut best = f64::NEG_INFINITY;
        for i in 0..=grid {
            for j in 0..=grid {
                let x = DVector::from_vec(vec![
                    -radius + 2.0 * radius * i as f64 / grid as f64,
                    -radius + 2.0 * radius * j as f64 / grid as f64,
                ]);
                best = best.max(obj(&x).0);
            }
        }
        if (f_out - best).abs() > 1e-4 {
            return Err(format!("seed {seed}: pg {f_out} vs grid {best}"));
        }
    }
    Ok(())
}

fn check_kl_quadrature(_: Mutation) -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(13);
    for case in 0..5 {
        let mut old = GaussianPolicyParams::new(MeanModelSpec::tabular(1, 1), 0.0);
        let mut new = GaussianPolicyParams::new(MeanModelSpec::tabular(1, 1), 0.0);
        old.set_mean_entry(0, 0, rng.random_range(-1.0..1.0));
        new.set_mean_entry(0, 0, rng.random_range(-1.0..1.0));
        old.set_log_std(DVector::from_element(1, rng.random_range(-0.5..0.5)));
        new.set_log_std(DVector::from_element(1, rng.random_range(-0.5..0.5)));
        let obs = Obs::Discrete(0);
        let (mo, so) = (old.mean_at(&obs)[0], old.log_std()[0].exp());
        let (mn, sn) = (new.mean_at(&obs)[0], new.log_std()[0].exp());
        let kl =
            PolicyParams::Gaussian(old.clone()).kl(&PolicyParams::Gaussian(new.clone()), &obs);
        let density =
            |m: f64, s: f64, x: f64| (-0.5 * ((x - m) / s).powi(2)).exp() / (s * LN_2PI.exp().sqrt());
        let span = 14.0 * so.max(sn) + (mn - mo).abs();
        let (lo, hi) = (mo - span, mo + span);
        let steps = 200_001;
        let h = (hi - lo) / (steps - 1) as f64;
        let mut integral = 0.0;
        for k in 0..steps {
            let x = lo + k as f64 * h;
            let p = density(mo, so, x);
            if p > 0.0 {
                let w = if k == 0 || k == steps - 1 { 0.5 } else { 1.0 };
                integral += w * p * (p.ln() - density(mn, sn, x).ln());
            }
        }
        integral *= h;
        if (kl - integral).abs() > 1e-6 {
            return Err(format!("case {case}: closed form {kl} vs quadrature {integral}"));
        }
    }
    Ok(())
}
