//! Experiment orchestration: one job per `(λ, κ, run)`, a bounded worker
//! pool, per-run files and a single-writer manifest.

use std::fs;
use std::path::Path;

use ecrm::exact::evaluate;
use ecrm::optim::{fmt_f64, gd_softmax_barrier, pgd_direct, OptimConfig, CSV_HEADER};
use ecrm::policy::to_probabilities;
use ecrm::reinforce::{evaluate_greedy, train, ReinforceConfig};
use ecrm::risk::build_augmented;
use ecrm::verify::{random_direct, random_softmax};
use ecrm::{RngStream, TwoPartPolicy};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Algorithm, Environment, ExperimentConfig, Init};
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
/// Per-run learning curve of the sampled method.
pub const REINFORCE_HEADER: &str = "run,episode,test_cost";
pub const REINFORCE_AGGREGATE_HEADER: &str = "episode,test_cost_mean,test_cost_std,n_runs";
pub const OPTIM_AGGREGATE_HEADER: &str = "iter,J_rho_mean,J_rho_std,n_runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSummary {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_eta: usize,
    pub eta_grid: Vec<f64>,
    pub action_labels: Vec<String>,
    pub state_labels: Vec<String>,
    pub terminal_states: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub run: usize,
    pub seed: u64,
    pub csv: String,
    pub policy: String,
    /// `ok`, `pending`, or `failed: <reason>`.
    pub status: String,
    /// Exact `J(ρ)` of the final policy.
    pub final_j_rho: Option<f64>,
    /// Undiscounted raw cost of one greedy rollout of the final policy.
    pub greedy_cost: Option<f64>,
    pub greedy_path: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingEntry {
    pub lambda: f64,
    pub kappa: f64,
    pub aggregate: String,
    pub runs: Vec<RunEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    /// SHA-256 over git-style blobs of the effective config and any MDP file.
    pub input_hash: String,
    pub complete: bool,
    pub config: ExperimentConfig,
    pub env: EnvSummary,
    pub settings: Vec<SettingEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::input(&path, e.to_string()))
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(&dir.join(MANIFEST), &text)
    }
}

/// Hash of the inputs; every config field enters through its canonical JSON.
pub fn input_hash(cfg: &ExperimentConfig, source: Option<&[u8]>) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut blob = |bytes: &[u8]| {
        hasher.update(format!("blob {}\0", bytes.len()).as_bytes());
        hasher.update(bytes);
    };
    blob(&serde_json::to_vec(cfg)?);
    if let Some(bytes) = source {
        blob(bytes);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn setting_stem(lambda: f64, kappa: f64) -> String {
    format!("lam{}_kap{}", fmt_f64(lambda), fmt_f64(kappa))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

struct Job {
    setting: usize,
    lambda: f64,
    kappa: f64,
    run: usize,
    seed: u64,
}

/// What a finished job hands back to the manifest writer.
struct JobResult {
    /// `(x, y)` pairs feeding the aggregate.
    series: Vec<(usize, f64)>,
    final_j_rho: f64,
    greedy_cost: f64,
    greedy_path: Vec<usize>,
}

/// Runs every job of the sweep and returns the final manifest.
///
/// A failed job does not stop the others; it is recorded in the manifest,
/// which is then marked incomplete.
pub fn run_experiment(cfg: &ExperimentConfig, base: &Path, threads: usize) -> Result<Manifest> {
    let env = cfg.environment(base)?;
    let out = cfg.output_dir.clone();
    create_dir(&out.join("runs"))?;
    create_dir(&out.join("policies"))?;
    create_dir(&out.join("aggregate"))?;

    let mut jobs = Vec::new();
    let mut settings = Vec::new();
    for &lambda in &cfg.sweep.lambda {
        for &kappa in &cfg.sweep.kappa {
            let stem = setting_stem(lambda, kappa);
            let mut runs = Vec::new();
            for run in 0..cfg.runs {
                let seed = cfg.base_seed + run as u64;
                jobs.push(Job {
                    setting: settings.len(),
                    lambda,
                    kappa,
                    run,
                    seed,
                });
                runs.push(RunEntry {
                    run,
                    seed,
                    csv: format!("runs/{stem}_run{run:03}.csv"),
                    policy: format!("policies/{stem}_run{run:03}.json"),
                    status: "pending".into(),
                    final_j_rho: None,
                    greedy_cost: None,
                    greedy_path: None,
                });
            }
            settings.push(SettingEntry {
                lambda,
                kappa,
                aggregate: format!("aggregate/{stem}.csv"),
                runs,
            });
        }
    }
    let risk = cfg.risk_spec(cfg.sweep.lambda[0])?;
    let mut manifest = Manifest {
        tool: format!("ecrm-cli {}", env!("CARGO_PKG_VERSION")),
        input_hash: input_hash(cfg, env.source.as_deref())?,
        complete: false,
        config: cfg.clone(),
        env: EnvSummary {
            n_states: env.mdp.n_states(),
            n_actions: env.mdp.n_actions(),
            n_eta: risk.n_eta(),
            eta_grid: risk.eta_grid().to_vec(),
            action_labels: env.action_labels(),
            state_labels: (0..env.mdp.n_states()).map(|s| env.state_label(s)).collect(),
            terminal_states: env.mdp.terminal_states().to_vec(),
        },
        settings,
    };
    manifest.write(&out)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} workers: {e}")))?;
    let results: Vec<Result<JobResult>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let entry = &manifest.settings[job.setting].runs[job.run];
                run_job(cfg, &env, job, &out.join(&entry.csv), &out.join(&entry.policy))
            })
            .collect()
    });

    let mut complete = true;
    let mut series: Vec<Vec<Vec<(usize, f64)>>> = vec![Vec::new(); manifest.settings.len()];
    for (job, result) in jobs.iter().zip(results) {
        let entry = &mut manifest.settings[job.setting].runs[job.run];
        match result {
            Ok(r) => {
                entry.status = "ok".into();
                entry.final_j_rho = Some(r.final_j_rho);
                entry.greedy_cost = Some(r.greedy_cost);
                entry.greedy_path = Some(r.greedy_path);
                series[job.setting].push(r.series);
            }
            Err(e) => {
                complete = false;
                entry.status = format!("failed: {e}");
            }
        }
    }
    let header = match cfg.algorithm {
        Algorithm::Reinforce => REINFORCE_AGGREGATE_HEADER,
        _ => OPTIM_AGGREGATE_HEADER,
    };
    for (setting, runs) in manifest.settings.iter().zip(&series) {
        write_file(&out.join(&setting.aggregate), &aggregate_csv(header, runs))?;
    }
    manifest.complete = complete;
    manifest.write(&out)?;
    Ok(manifest)
}

fn initial_policy(cfg: &ExperimentConfig, dims: ecrm::policy::Dims, softmax: bool, seed: u64) -> Result<TwoPartPolicy> {
    let mut rng = RngStream::new(seed).fork(2);
    Ok(match (cfg.params.init, softmax) {
        (Init::Uniform, true) => TwoPartPolicy::uniform_softmax(dims.n_states, dims.n_actions, dims.n_eta),
        (Init::Uniform, false) => TwoPartPolicy::uniform_direct(dims.n_states, dims.n_actions, dims.n_eta),
        (Init::Random, true) => random_softmax(&mut rng, dims, 1.0),
        (Init::Random, false) => random_direct(&mut rng, dims).to_direct()?,
    })
}

fn run_job(
    cfg: &ExperimentConfig,
    env: &Environment,
    job: &Job,
    csv_path: &Path,
    policy_path: &Path,
) -> Result<JobResult> {
    let risk = cfg.risk_spec(job.lambda)?;
    let mdp = &env.mdp;
    let aug = build_augmented(mdp, &risk)?;
    let dims = aug.dims();
    let p = &cfg.params;
    let (policy, csv, series) = match cfg.algorithm {
        Algorithm::Reinforce => {
            let mut rc = ReinforceConfig::new(p.episodes, p.max_steps, cfg.reinforce_step(), job.seed);
            rc.kappa = job.kappa;
            rc.eval_every = p.eval_every;
            rc.eval_rollouts = p.eval_rollouts;
            rc.eval_start_state = env.eval_start();
            rc.start_states = env.start_states();
            rc.discount_visits = p.discount_visits;
            rc.share_first_step = p.share_first_step;
            let init = initial_policy(cfg, dims, true, job.seed)?;
            let out = train(mdp, &risk, &rc, Some(&init))?;
            let mut csv = format!("{REINFORCE_HEADER}\n");
            for c in &out.curve {
                csv.push_str(&format!("{},{},{}\n", job.run, c.episode, fmt_f64(c.test_cost)));
            }
            let series = out.curve.iter().map(|c| (c.episode, c.test_cost)).collect();
            (out.policy, csv, series)
        }
        Algorithm::PgdDirect | Algorithm::GdSoftmax => {
            let oc = OptimConfig {
                step: cfg.optim_step(),
                kappa: job.kappa,
                budget: p.budget,
                tol: p.tol,
                stop_at_stationarity: p.stop_at_stationarity,
            };
            let mu = cfg.mu(mdp.n_states());
            let softmax = cfg.algorithm == Algorithm::GdSoftmax;
            let init = initial_policy(cfg, dims, softmax, job.seed)?;
            let run = if softmax {
                gd_softmax_barrier(&aug, &init, &mu, mdp.rho(), &oc)?
            } else {
                pgd_direct(&aug, &init, &mu, mdp.rho(), &oc)?
            };
            debug_assert!(run.to_csv().starts_with(CSV_HEADER));
            let series = run.records.iter().map(|r| (r.iter, r.j_rho)).collect();
            (run.final_policy.clone(), run.to_csv(), series)
        }
    };
    write_file(csv_path, &csv)?;
    let mut json = policy.to_json()?;
    json.push('\n');
    write_file(policy_path, &json)?;

    let probs = to_probabilities(&policy)?;
    let final_j_rho = evaluate(&aug, &probs, mdp.rho())?.j_mu;
    let mut rng = RngStream::new(job.seed).fork(1);
    let greedy = evaluate_greedy(mdp, &risk, &policy, env.eval_start(), p.max_steps, &mut rng, 1)?;
    Ok(JobResult {
        series,
        final_j_rho,
        greedy_cost: greedy.mean_cost,
        greedy_path: greedy.path,
    })
}

/// Mean and sample standard deviation per row index over the runs that reach it.
pub fn aggregate(runs: &[Vec<(usize, f64)>]) -> Vec<(usize, f64, f64, usize)> {
    let len = runs.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let rows: Vec<(usize, f64)> = runs.iter().filter_map(|r| r.get(i).copied()).collect();
            let n = rows.len();
            let mean = rows.iter().map(|r| r.1).sum::<f64>() / n as f64;
            let std = if n > 1 {
                (rows.iter().map(|r| (r.1 - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            (rows[0].0, mean, std, n)
        })
        .collect()
}

fn aggregate_csv(header: &str, runs: &[Vec<(usize, f64)>]) -> String {
    let mut out = format!("{header}\n");
    for (x, mean, std, n) in aggregate(runs) {
        out.push_str(&format!("{x},{},{},{n}\n", fmt_f64(mean), fmt_f64(std)));
    }
    out
}
