//! Experiment configuration: one JSON document plus two environment overrides.

use std::path::{Path, PathBuf};

use ecrm::mdp::{make_random_mdp, CliffWalk};
use ecrm::optim::StepSize;
use ecrm::reinforce::{CALIBRATED_MAX_STEPS, CALIBRATED_STEP_SIZE};
use ecrm::{RiskSpec, RngStream, TabularMdp};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Overrides `output_dir`.
pub const ENV_OUTPUT_DIR: &str = "ECRM_OUTPUT_DIR";
/// Overrides the worker count.
pub const ENV_THREADS: &str = "ECRM_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvConfig {
    Cliffwalk {
        slip_prob: f64,
        #[serde(default = "four")]
        width: usize,
        #[serde(default = "four")]
        height: usize,
    },
    Random {
        n_states: usize,
        n_actions: usize,
        seed: u64,
    },
    /// An MDP document; relative paths resolve against the config file.
    File { path: PathBuf },
}

fn four() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskConfig {
    pub alpha: f64,
    pub eta_grid: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Reinforce,
    PgdDirect,
    GdSoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// Zero logits, or the uniform direct policy.
    Uniform,
    /// Random policy drawn from the run seed.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgoParams {
    /// Step size; `"theoretical"` is only meaningful for the exact methods.
    pub step: Option<StepSize>,
    pub episodes: usize,
    pub budget: usize,
    pub max_steps: usize,
    pub tol: f64,
    pub stop_at_stationarity: bool,
    pub eval_every: usize,
    pub eval_rollouts: usize,
    pub share_first_step: bool,
    pub discount_visits: bool,
    pub init: Init,
    /// Start distribution of the optimized objective; uniform when absent.
    pub mu: Option<Vec<f64>>,
    /// Target accuracy for the iteration bounds reported by `constants`.
    pub epsilon: f64,
}

impl Default for AlgoParams {
    fn default() -> Self {
        Self {
            step: None,
            episodes: 5000,
            budget: 1000,
            max_steps: CALIBRATED_MAX_STEPS,
            tol: 0.0,
            stop_at_stationarity: false,
            eval_every: 1,
            eval_rollouts: 1,
            share_first_step: true,
            discount_visits: false,
            init: Init::Uniform,
            mu: None,
            epsilon: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub lambda: Vec<f64>,
    #[serde(default = "zero_kappa")]
    pub kappa: Vec<f64>,
}

fn zero_kappa() -> Vec<f64> {
    vec![0.0]
}

fn one() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("artifacts")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub risk: RiskConfig,
    pub gamma: f64,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub params: AlgoParams,
    pub sweep: Sweep,
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

/// A built environment with its evaluation geometry.
pub struct Environment {
    pub mdp: TabularMdp,
    pub cliff: Option<CliffWalk>,
    /// Raw bytes of an MDP file, hashed into the manifest.
    pub source: Option<Vec<u8>>,
}

impl Environment {
    /// Start state of greedy test rollouts.
    pub fn eval_start(&self) -> usize {
        match &self.cliff {
            Some(cw) => cw.start(),
            None => {
                let rho = self.mdp.rho();
                (0..rho.len()).fold(0, |best, s| if rho[s] > rho[best] { s } else { best })
            }
        }
    }

    pub fn start_states(&self) -> Option<Vec<usize>> {
        self.cliff.as_ref().map(|cw| cw.start_candidates())
    }

    pub fn action_labels(&self) -> Vec<String> {
        if self.cliff.is_some() {
            ["up", "right", "down", "left"].iter().map(|s| s.to_string()).collect()
        } else {
            (0..self.mdp.n_actions()).map(|a| format!("a{a}")).collect()
        }
    }

    pub fn state_label(&self, s: usize) -> String {
        match &self.cliff {
            Some(cw) => {
                let [r, c] = cw.cell(s);
                format!("[{r},{c}]")
            }
            None => s.to_string(),
        }
    }
}

impl ExperimentConfig {
    /// Reads and validates a config file, then applies the environment overrides.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if let Ok(dir) = std::env::var(ENV_OUTPUT_DIR) {
            if !dir.is_empty() {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok((cfg, base))
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.sweep.lambda.is_empty() || self.sweep.kappa.is_empty() {
            return usage("sweep lists must be nonempty".into());
        }
        if self.runs == 0 {
            return usage("runs must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return usage(format!("gamma must lie in (0,1), got {}", self.gamma));
        }
        if let Some(k) = self.sweep.kappa.iter().find(|k| !(**k >= 0.0 && k.is_finite())) {
            return usage(format!("kappa must be >= 0, got {k}"));
        }
        for &lambda in &self.sweep.lambda {
            self.risk_spec(lambda)?;
        }
        let p = &self.params;
        match self.algorithm {
            Algorithm::Reinforce => {
                if matches!(p.step, Some(StepSize::Theoretical)) {
                    return usage("reinforce needs a numeric step".into());
                }
                if p.episodes == 0 || p.max_steps == 0 {
                    return usage("episodes and max_steps must be at least 1".into());
                }
            }
            Algorithm::PgdDirect | Algorithm::GdSoftmax => {
                if p.budget == 0 {
                    return usage("budget must be at least 1".into());
                }
            }
        }
        if !(p.epsilon > 0.0 && p.tol >= 0.0) {
            return usage("epsilon must be > 0 and tol >= 0".into());
        }
        Ok(())
    }

    pub fn risk_spec(&self, lambda: f64) -> Result<RiskSpec> {
        RiskSpec::new(lambda, self.risk.alpha, self.risk.eta_grid.clone()).map_err(|e| CliError::Usage(e.to_string()))
    }

    /// Builds the environment; `base` resolves relative MDP file paths.
    pub fn environment(&self, base: &Path) -> Result<Environment> {
        let usage = |e: ecrm::Error| CliError::Usage(e.to_string());
        let env = match &self.env {
            EnvConfig::Cliffwalk {
                slip_prob,
                width,
                height,
            } => {
                let cw = CliffWalk::new(*slip_prob, *width, *height, self.gamma).map_err(usage)?;
                Environment {
                    mdp: cw.mdp().clone(),
                    cliff: Some(cw),
                    source: None,
                }
            }
            EnvConfig::Random {
                n_states,
                n_actions,
                seed,
            } => Environment {
                mdp: make_random_mdp(*n_states, *n_actions, self.gamma, &mut RngStream::new(*seed)).map_err(usage)?,
                cliff: None,
                source: None,
            },
            EnvConfig::File { path } => {
                let full = base.join(path);
                let bytes = std::fs::read(&full).map_err(|e| CliError::io(&full, e))?;
                let text = String::from_utf8(bytes.clone()).map_err(|e| CliError::input(&full, e.to_string()))?;
                let mdp = TabularMdp::from_json(&text)
                    .and_then(|m| m.with_gamma(self.gamma))
                    .map_err(|e| CliError::input(&full, e.to_string()))?;
                Environment {
                    mdp,
                    cliff: None,
                    source: Some(bytes),
                }
            }
        };
        if let Some(mu) = &self.params.mu {
            ecrm::exact::check_distribution(mu, env.mdp.n_states()).map_err(usage)?;
        }
        Ok(env)
    }

    /// The objective's start distribution.
    pub fn mu(&self, n_states: usize) -> Vec<f64> {
        self.params
            .mu
            .clone()
            .unwrap_or_else(|| vec![1.0 / n_states as f64; n_states])
    }

    pub fn reinforce_step(&self) -> f64 {
        match self.params.step {
            Some(StepSize::Fixed(b)) => b,
            _ => CALIBRATED_STEP_SIZE,
        }
    }

    pub fn optim_step(&self) -> StepSize {
        self.params.step.unwrap_or(StepSize::Theoretical)
    }
}

/// Worker count from the environment, defaulting to the available cores.
pub fn thread_count() -> Result<usize> {
    match std::env::var(ENV_THREADS) {
        Ok(v) if !v.is_empty() => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!(
                "{ENV_THREADS} must be a positive integer, got `{v}`"
            ))),
        },
        _ => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}
