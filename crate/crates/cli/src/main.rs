mod config;
mod verify;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use config::{StroRunFile, TabularRunFile};
use stro_core::driver::{run_stro, RunResult, StroConfig};
use stro_core::policy::PolicyParams;
use stro_core::tabular::{check_lemma_bounds, run as run_tabular_loop};

const VERSION: &str = match option_env!("STRO_GIT_DESCRIBE") {
    Some(v) => v,
    None => env!("CARGO_PKG_VERSION"),
};

#[derive(Parser)]
#[command(name = "stro", version = VERSION, about = "Trust-region policy optimization: exact tabular track, sampled stochastic track, and a verification suite")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the deterministic trust-region loop on a finite MDP.
    Tabular {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Verify the per-iteration improvement and ratio bounds after the
        /// run and report them.
        #[arg(long)]
        check_lemmas: bool,
    },
    /// Run the stochastic driver over a list of seeds.
    Stro {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seed list, e.g. "0,1,2"; defaults to the config
        /// seed alone.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the oracle/property suite and print one line per check.
    Verify {
        /// Inject a known defect (supported: gae-sign-flip) to confirm the
        /// matching oracle fails.
        #[arg(long)]
        mutate: Option<String>,
    },
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    version: &'a str,
    command: &'a str,
    seeds: Vec<u64>,
    outputs: Vec<&'a str>,
    config: &'a C,
}

fn write_manifest<C: Serialize>(
    dir: &Path,
    command: &str,
    seeds: &[u64],
    outputs: Vec<&str>,
    config: &C,
) -> Result<()> {
    let manifest = Manifest {
        version: VERSION,
        command,
        seeds: seeds.to_vec(),
        outputs,
        config,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_tabular(config_path: &Path, out: &Path, check_lemmas: bool) -> Result<i32> {
    let file: TabularRunFile = config::load(config_path)?;
    file.tr.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
    let mdp = file.build_mdp()?;
    let init = file.build_init(&mdp);
    let trace = run_tabular_loop(&mdp, &init, &file.tr)?;

    fs::create_dir_all(out)?;
    fs::write(out.join("trace.csv"), trace.to_csv())?;
    write_manifest(out, "tabular", &[file.problem.seed], vec!["trace.csv"], &file)?;

    println!(
        "final eta = {:.12}, Astar = {:.3e}, iterations = {}, converged = {}",
        trace.final_eta,
        trace.final_astar,
        trace.rows.len(),
        trace.converged
    );

    if check_lemmas {
        let violations = check_lemma_bounds(&mdp, &trace);
        println!("lemma report: {} iterations checked", trace.rows.len());
        println!("  model-improvement bound (slack 1e-9): {}", verdict(violations.iter().filter(|v| v.check == "model-improvement").count()));
        println!("  ratio lower bound      (slack 1e-9): {}", verdict(violations.iter().filter(|v| v.check == "ratio-lower-bound").count()));
        println!("  tv feasibility         (slack 1e-9): {}", verdict(violations.iter().filter(|v| v.check == "tv-feasibility").count()));
        for v in &violations {
            println!(
                "  VIOLATION iter {} {}: lhs {} rhs {}",
                v.iter, v.check, v.lhs, v.rhs
            );
        }
        if !violations.is_empty() {
            return Ok(1);
        }
    }
    Ok(0)
}

fn verdict(violations: usize) -> String {
    if violations == 0 {
        "pass".to_string()
    } else {
        format!("FAIL ({violations} violations)")
    }
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .with_context(|| format!("bad seed {s:?}"))
        })
        .collect()
}

fn run_one_seed(
    file: &StroRunFile,
    seed: u64,
    seed_dir: &Path,
) -> Result<RunResult> {
    let mut env = file.build_env();
    let policy = file.build_policy(env.as_ref())?;
    let initial_policy = policy.clone();
    let baseline = file.build_baseline(env.as_ref());
    let config = StroConfig {
        seed,
        ..file.stro.clone()
    };
    let result = run_stro(env.as_mut(), policy, baseline, &config)?;

    fs::create_dir_all(seed_dir)?;
    fs::write(seed_dir.join("run.csv"), result.to_csv())?;
    fs::write(
        seed_dir.join("final_policy.json"),
        result.final_policy.to_json(),
    )?;
    if file.output.checkpoint_every > 0 {
        // The policy only changes on (forced) acceptance; reconstruct the
        // current policy at each checkpointed iteration.
        let mut accepted = result.accepted.iter().peekable();
        let mut current: &PolicyParams = &initial_policy;
        for iter in 0..result.records.len() {
            while let Some((k, p)) = accepted.peek() {
                if *k < iter {
                    current = p;
                    accepted.next();
                } else {
                    break;
                }
            }
            if iter % file.output.checkpoint_every == 0 {
                fs::write(
                    seed_dir.join(format!("checkpoint_{iter}.json")),
                    current.to_json(),
                )?;
            }
        }
    }
    let clamps: usize = result.diagnostics.iter().map(|d| d.sigma_clamp_events).sum();
    if clamps > 0 {
        eprintln!("seed {seed}: sigma floor clamped {clamps} times");
    }
    Ok(result)
}

fn cmd_stro(config_path: &Path, seeds: Option<&str>, out: &Path) -> Result<i32> {
    let file: StroRunFile = config::load(config_path)?;
    file.stro.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
    let seeds: Vec<u64> = match seeds {
        Some(s) => parse_seeds(s)?,
        None => vec![file.stro.seed],
    };
    if seeds.is_empty() {
        bail!("need at least one seed");
    }
    fs::create_dir_all(out)?;
    write_manifest(
        out,
        "stro",
        &seeds,
        vec![
            "seed_<s>/run.csv",
            "seed_<s>/final_policy.json",
            "seed_<s>/checkpoint_<k>.json",
            "aggregate.csv",
        ],
        &file,
    )?;

    // Seeds are independent; run them on their own threads with outputs
    // isolated per directory.
    let mut results: Vec<Option<Result<RunResult>>> = seeds.iter().map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (i, &seed) in seeds.iter().enumerate() {
            let file = &file;
            let seed_dir = out.join(format!("seed_{seed}"));
            handles.push((
                i,
                scope.spawn(move || run_one_seed(file, seed, &seed_dir)),
            ));
        }
        for (i, h) in handles {
            results[i] = Some(h.join().expect("seed thread panicked"));
        }
    });
    let mut runs = Vec::new();
    for (r, seed) in results.into_iter().zip(&seeds) {
        let run = r.expect("every seed ran").with_context(|| format!("seed {seed}"))?;
        println!(
            "seed {seed}: {} iterations, {} env steps, final eta_hat = {:.6}",
            run.records.len(),
            run.env_steps,
            run.records
                .last()
                .map(|rec| rec.eta_hat_old)
                .unwrap_or(f64::NAN),
        );
        runs.push(run);
    }

    // Aggregate over the iterations present in every seed.
    let common = runs.iter().map(|r| r.records.len()).min().unwrap_or(0);
    let mut agg = String::from(
        "iter,eta_hat_old_mean,eta_hat_old_std,eta_hat_trial_mean,eta_hat_trial_std,n_seeds\n",
    );
    for i in 0..common {
        let olds: Vec<f64> = runs.iter().map(|r| r.records[i].eta_hat_old).collect();
        let trials: Vec<f64> = runs.iter().map(|r| r.records[i].eta_hat_trial).collect();
        let (om, os) = mean_std(&olds);
        let (tm, ts) = mean_std(&trials);
        use std::fmt::Write as _;
        let _ = writeln!(agg, "{i},{om},{os},{tm},{ts},{}", runs.len());
    }
    fs::write(out.join("aggregate.csv"), agg)?;
    Ok(0)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn cmd_verify(mutate: Option<&str>) -> Result<i32> {
    let mutation = match mutate {
        None => verify::Mutation::None,
        Some(name) => verify::Mutation::parse(name)
            .with_context(|| format!("unknown mutation {name:?} (supported: gae-sign-flip)"))?,
    };
    let outcomes = verify::run_all(mutation);
    let mut failed = 0usize;
    println!("{:<28} {:<22} result", "check", "tolerance");
    for o in &outcomes {
        match &o.result {
            Ok(()) => println!("{:<28} {:<22} pass", o.name, o.tolerance),
            Err(detail) => {
                failed += 1;
                println!("{:<28} {:<22} FAIL: {detail}", o.name, o.tolerance);
            }
        }
    }
    println!(
        "{} of {} checks passed",
        outcomes.len() - failed,
        outcomes.len()
    );
    Ok(if failed == 0 { 0 } else { 1 })
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Tabular {
            config,
            out,
            check_lemmas,
        } => cmd_tabular(config, out, *check_lemmas),
        Command::Stro { config, seeds, out } => cmd_stro(config, seeds.as_deref(), out),
        Command::Verify { mutate } => cmd_verify(mutate.as_deref()),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}
