//! `verify`, `solve-exact` and `constants`.

use std::path::Path;

use ecrm::exact::{constants, solve_optimal, Constants};
use ecrm::policy::{to_probabilities, PolicyProbabilities};
use ecrm::risk::build_augmented;
use ecrm::verify::{registry, Hooks, Level, VerifyReport};
use ecrm::{TabularMdp, TwoPartPolicy};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// Runs the whole check registry on `threads` workers.
pub fn verify(level: Level, threads: usize) -> Result<VerifyReport> {
    let hooks = Hooks::default();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} workers: {e}")))?;
    let checks = pool.install(|| registry().par_iter().map(|c| c.run(level, &hooks)).collect());
    Ok(VerifyReport::new(level, checks))
}

#[derive(Debug, Clone, Serialize)]
pub struct ExactSolution {
    pub lambda: f64,
    pub j_star_rho: f64,
    pub iterations: usize,
    /// Undiscounted raw cost along the nominal path.
    pub path_cost: f64,
    /// Greedy actions with the most likely successor at every step.
    pub nominal_path: Vec<String>,
    pub reached_terminal: bool,
}

struct NominalPath {
    states: Vec<usize>,
    cost: f64,
    terminated: bool,
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
}

/// Follows the most probable `(a, η')` and the most likely successor.
fn nominal_path(mdp: &TabularMdp, p: &PolicyProbabilities, start: usize, max_steps: usize) -> NominalPath {
    let n_h = p.n_eta();
    let mut states = vec![start];
    let (mut s, mut cost) = (start, 0.0);
    let mut k = argmax(p.p1.row(s));
    for _ in 0..max_steps {
        if mdp.is_terminal(s) {
            break;
        }
        let (a, h) = (k / n_h, k % n_h);
        let next = argmax(mdp.transition_row(s, a));
        cost += mdp.outcome_cost(s, a, next);
        s = next;
        states.push(s);
        k = argmax(p.p2.row(s * n_h + h));
    }
    NominalPath {
        states,
        cost,
        terminated: mdp.is_terminal(s),
    }
}

/// Optimal value and nominal greedy path per swept λ.
pub fn solve_exact(cfg: &ExperimentConfig, base: &Path) -> Result<Vec<ExactSolution>> {
    let env = cfg.environment(base)?;
    cfg.sweep
        .lambda
        .iter()
        .map(|&lambda| {
            let risk = cfg.risk_spec(lambda)?;
            let aug = build_augmented(&env.mdp, &risk)?;
            let sol = solve_optimal(&aug)?;
            let path = nominal_path(&env.mdp, &sol.probabilities(), env.eval_start(), cfg.params.max_steps);
            Ok(ExactSolution {
                lambda,
                j_star_rho: sol.j_star_rho,
                iterations: sol.iterations,
                path_cost: path.cost,
                nominal_path: path.states.iter().map(|&s| env.state_label(s)).collect(),
                reached_terminal: path.terminated,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstantsEntry {
    pub lambda: f64,
    pub kappa: f64,
    /// Constants at the uniform policy; infinite entries serialize as null.
    pub constants: Constants,
}

pub fn constants_table(cfg: &ExperimentConfig, base: &Path) -> Result<Vec<ConstantsEntry>> {
    let env = cfg.environment(base)?;
    let mu = cfg.mu(env.mdp.n_states());
    let mut out = Vec::new();
    for &lambda in &cfg.sweep.lambda {
        let risk = cfg.risk_spec(lambda)?;
        let aug = build_augmented(&env.mdp, &risk)?;
        let d = aug.dims();
        let p = to_probabilities(&TwoPartPolicy::uniform_softmax(d.n_states, d.n_actions, d.n_eta))?;
        for &kappa in &cfg.sweep.kappa {
            let constants = constants(&aug, &p, &mu, env.mdp.rho(), kappa, cfg.params.epsilon)?;
            out.push(ConstantsEntry {
                lambda,
                kappa,
                constants,
            });
        }
    }
    Ok(out)
}
