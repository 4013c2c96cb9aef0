//! Executable property suites for every module.
//!
//! Each check runs on seeded random instances and reports its worst measured
//! residual next to the tolerance. `slack = tolerance - residual` for
//! equalities and `rhs - lhs` for inequalities, so a check passes exactly when
//! its slack is nonnegative.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::exact::{
    barrier_gradient, constants_with, direct_gradient_at, evaluate, finite_horizon_gradient, grad_softmax,
    performance_difference, regularized_objective, solve_optimal, vertex_gap, GradientBundle,
};
use crate::mdp::{make_random_mdp, sample_trajectory, RngStream, Start, TabularMdp};
use crate::optim::{
    gd_softmax_barrier, iteration_bound_check, pgd_direct, theoretical_softmax_step, OptimConfig, StepSize,
};
use crate::policy::{project_simplex, to_probabilities, Dims, ParamKind, PolicyProbabilities, TwoPartPolicy};
use crate::reinforce::episode_update;
use crate::risk::{build_augmented, cvar, one_step_risk, AugmentedMdp, DiscreteDistribution, RiskSpec};
use crate::table::Table;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Fast,
    Full,
}

impl Level {
    fn pick(self, fast: usize, full: usize) -> usize {
        match self {
            Level::Fast => fast,
            Level::Full => full,
        }
    }
}

pub type SoftmaxGradFn = fn(&AugmentedMdp, &TwoPartPolicy, &[f64]) -> Result<GradientBundle>;

/// Functions under test that a fixture may replace.
#[derive(Clone, Copy)]
pub struct Hooks {
    pub softmax_gradient: SoftmaxGradFn,
}

impl Default for Hooks {
    fn default() -> Self {
        Self {
            softmax_gradient: grad_softmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub module: String,
    pub passed: bool,
    pub instances: usize,
    /// Worst residual, or worst `lhs - rhs` for inequalities.
    pub residual: f64,
    pub tolerance: f64,
    pub slack: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub level: Level,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn new(level: Level, checks: Vec<CheckResult>) -> Self {
        Self {
            level,
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }

    /// 0 when every check passed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }
}

pub struct CheckSpec {
    pub name: &'static str,
    pub module: &'static str,
    run: fn(Level, &Hooks) -> Result<Outcome>,
}

impl CheckSpec {
    /// Runs the check; an internal error is reported as a failed check.
    pub fn run(&self, level: Level, hooks: &Hooks) -> CheckResult {
        let (passed, instances, residual, tolerance, slack, detail) = match (self.run)(level, hooks) {
            Ok(o) => {
                let slack = o.slack();
                (slack >= 0.0, o.instances, o.residual, o.tolerance, slack, o.detail)
            }
            Err(e) => (false, 0, f64::NAN, f64::NAN, f64::NAN, format!("error: {e}")),
        };
        CheckResult {
            name: self.name.to_string(),
            module: self.module.to_string(),
            passed,
            instances,
            residual,
            tolerance,
            slack,
            detail,
        }
    }
}

/// Worst case over the instances of one check.
struct Outcome {
    instances: usize,
    residual: f64,
    tolerance: f64,
    /// Inequality checks compare `lhs ≤ rhs` and track the smallest `rhs - lhs`.
    inequality_slack: Option<f64>,
    detail: String,
}

impl Outcome {
    fn equality(tolerance: f64, detail: &str) -> Self {
        Self {
            instances: 0,
            residual: 0.0,
            tolerance,
            inequality_slack: None,
            detail: detail.to_string(),
        }
    }

    fn inequality(tolerance: f64, detail: &str) -> Self {
        Self {
            inequality_slack: Some(f64::INFINITY),
            residual: f64::NEG_INFINITY,
            ..Self::equality(tolerance, detail)
        }
    }

    fn residual(&mut self, r: f64) {
        // NaN must fail, so it is recorded rather than lost in max()
        if r.is_nan() || r > self.residual {
            self.residual = r;
        }
    }

    /// Records `lhs ≤ rhs + tolerance`.
    fn le(&mut self, lhs: f64, rhs: f64) {
        let s = rhs - lhs;
        self.residual(lhs - rhs);
        if let Some(cur) = self.inequality_slack.as_mut() {
            if s.is_nan() || s < *cur {
                *cur = s;
            }
        }
    }

    fn slack(&self) -> f64 {
        match self.inequality_slack {
            Some(s) => s + self.tolerance,
            None => self.tolerance - self.residual,
        }
    }

    fn done(mut self, instances: usize) -> Self {
        self.instances = instances;
        if self.instances == 0 {
            // vacuous: nothing was measured
            self.residual = 0.0;
            self.inequality_slack = self.inequality_slack.map(|_| 0.0);
        }
        self
    }
}

pub fn registry() -> Vec<CheckSpec> {
    macro_rules! check {
        ($module:literal, $name:literal, $f:path) => {
            CheckSpec {
                name: $name,
                module: $module,
                run: $f,
            }
        };
    }
    vec![
        check!("mdp", "transition_sampling_frequencies", transition_sampling),
        check!("mdp", "simulation_reproducible", simulation_reproducible),
        check!("risk", "coherence_axioms", coherence_axioms),
        check!("risk", "cvar_matches_variational_minimum", cvar_variational),
        check!("risk", "cvar_nonincreasing_in_alpha", cvar_monotone_alpha),
        check!("risk", "augmented_rows_stochastic", augmented_rows),
        check!("policy", "softmax_shift_invariance", softmax_shift),
        check!("policy", "projection_kkt", projection_kkt),
        check!("exact", "bellman_residual", bellman_residual),
        check!("exact", "performance_difference_identity", perf_difference),
        check!("exact", "softmax_gradient_finite_difference", fd_softmax),
        check!("exact", "direct_gradient_directional_difference", fd_direct),
        check!("exact", "barrier_gradient_finite_difference", fd_barrier),
        check!("exact", "softmax_gradient_rows_sum_to_zero", softmax_rows_zero),
        check!("exact", "gradient_domination", gradient_domination),
        check!("exact", "smoothness_direct", smoothness_direct),
        check!("exact", "smoothness_barrier", smoothness_barrier),
        check!("exact", "stationarity_implies_small_gap", stationarity_gap),
        check!("exact", "monte_carlo_value", monte_carlo_value),
        check!("exact", "risk_neutral_policy_value", risk_neutral_policy_value),
        check!("exact", "risk_neutral_optimum", risk_neutral_optimum_matches),
        check!("optim", "pgd_feasible_and_monotone", pgd_monotone),
        check!("optim", "gradient_mapping_rate", gradient_mapping_rate),
        check!("optim", "barrier_descent_monotone", barrier_monotone),
        check!("optim", "convergence_to_optimum", convergence),
        check!(
            "reinforce",
            "update_matches_finite_horizon_gradient",
            reinforce_consistency
        ),
    ]
}

/// Runs every check sequentially.
pub fn run_all(level: Level, hooks: &Hooks) -> VerifyReport {
    VerifyReport::new(level, registry().iter().map(|c| c.run(level, hooks)).collect())
}

// ---------------------------------------------------------------------------
// instance generators

/// A random instance with `|S| ≤ 4`, `|A| ≤ 3`, `|H| ≤ 3` and `γ ∈ {0.5, 0.9}`.
pub fn random_instance(rng: &mut RngStream) -> Result<AugmentedMdp> {
    let ns = 1 + rng.index(4);
    let na = 1 + rng.index(3);
    let nh = 1 + rng.index(3);
    let gamma = if rng.uniform() < 0.5 { 0.5 } else { 0.9 };
    let lambda = rng.uniform();
    let alpha = 0.05 + 0.95 * rng.uniform();
    let mdp = make_random_mdp(ns, na, gamma, rng)?;
    build_augmented(&mdp, &RiskSpec::with_uniform_grid(lambda, alpha, nh)?)
}

fn positive_row(rng: &mut RngStream, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| 0.05 + rng.uniform()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

fn positive_table(rng: &mut RngStream, rows: usize, cols: usize) -> Table {
    let data = (0..rows).flat_map(|_| positive_row(rng, cols)).collect();
    Table::from_vec(rows, cols, data).expect("shape is consistent")
}

/// Direct policy with every entry bounded away from zero.
pub fn random_direct(rng: &mut RngStream, dims: Dims) -> PolicyProbabilities {
    let p1 = positive_table(rng, dims.n_states, dims.n_aug_actions());
    let p2 = positive_table(rng, dims.n_aug_states(), dims.n_aug_actions());
    PolicyProbabilities::new(p1, p2)
}

/// Softmax policy with logits uniform in `[-scale, scale]`.
pub fn random_softmax(rng: &mut RngStream, dims: Dims, scale: f64) -> TwoPartPolicy {
    let mut table = |rows: usize| {
        let n = dims.n_aug_actions();
        let data = (0..rows * n).map(|_| scale * (2.0 * rng.uniform() - 1.0)).collect();
        Table::from_vec(rows, n, data).expect("shape is consistent")
    };
    let t1 = table(dims.n_states);
    let t2 = table(dims.n_aug_states());
    TwoPartPolicy::new(ParamKind::Softmax, t1, t2).expect("finite logits")
}

fn random_distribution(rng: &mut RngStream, n: usize) -> Vec<f64> {
    positive_row(rng, n)
}

fn stream(tag: u64) -> RngStream {
    RngStream::new(0x5eed_0000 + tag)
}

fn tables_max_diff(a: &Table, b: &Table) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()))
}

fn bundle_max_abs(g: &GradientBundle) -> f64 {
    g.g1.max_abs().max(g.g2.max_abs())
}

fn with_logit(policy: &TwoPartPolicy, block: usize, idx: usize, delta: f64) -> Result<TwoPartPolicy> {
    let (mut t1, mut t2) = policy.clone().into_tables();
    let t = if block == 0 { &mut t1 } else { &mut t2 };
    t.as_mut_slice()[idx] += delta;
    TwoPartPolicy::new(ParamKind::Softmax, t1, t2)
}

fn flat(g: &GradientBundle) -> Vec<f64> {
    g.g1.as_slice().iter().chain(g.g2.as_slice()).copied().collect()
}

fn logits(policy: &TwoPartPolicy) -> Vec<f64> {
    policy
        .table1()
        .as_slice()
        .iter()
        .chain(policy.table2().as_slice())
        .copied()
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `max_i |fd_i - g_i| / max(‖g‖∞, 1e-8)` over every logit of both blocks.
///
/// The floor sits well above central-difference roundoff (about `ε|f|/h`) so
/// that an identically zero gradient is not judged on roundoff alone.
fn fd_relative_error(
    policy: &TwoPartPolicy,
    g: &GradientBundle,
    h: f64,
    f: &dyn Fn(&TwoPartPolicy) -> Result<f64>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (block, table) in [&g.g1, &g.g2].into_iter().enumerate() {
        for (idx, &exact) in table.as_slice().iter().enumerate() {
            let up = f(&with_logit(policy, block, idx, h)?)?;
            let down = f(&with_logit(policy, block, idx, -h)?)?;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((fd - exact).abs());
        }
    }
    Ok(worst / bundle_max_abs(g).max(1e-8))
}

// ---------------------------------------------------------------------------
// mdp

fn transition_sampling(level: Level, _: &Hooks) -> Result<Outcome> {
    let n_samples = level.pick(20_000, 100_000);
    let mut rng = stream(1);
    let mdp = make_random_mdp(4, 2, 0.9, &mut rng)?;
    let mut out = Outcome::equality(3.0, "max |count - n p| / sqrt(n p (1-p)) over successor cells");
    let mut rows = 0;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let row = mdp.transition_row(s, a);
            let mut counts = vec![0usize; row.len()];
            for _ in 0..n_samples {
                counts[rng.categorical(row)] += 1;
            }
            for (&c, &p) in counts.iter().zip(row) {
                let n = n_samples as f64;
                let sd = (n * p * (1.0 - p)).sqrt();
                out.residual((c as f64 - n * p).abs() / sd.max(1e-300));
            }
            rows += 1;
        }
    }
    Ok(out.done(rows))
}

fn simulation_reproducible(level: Level, _: &Hooks) -> Result<Outcome> {
    let n = level.pick(5, 20);
    let mut rng = stream(2);
    let mut out = Outcome::equality(0.0, "count of differing trajectories under equal seeds");
    for i in 0..n {
        let aug = random_instance(&mut rng)?;
        let p = random_direct(&mut rng, aug.dims());
        let seed = 17 + i as u64;
        let a = sample_trajectory(aug.base(), &p, aug.risk(), 50, Start::Rho, &mut RngStream::new(seed))?;
        let b = sample_trajectory(aug.base(), &p, aug.risk(), 50, Start::Rho, &mut RngStream::new(seed))?;
        out.residual(if a == b { 0.0 } else { 1.0 });
    }
    Ok(out.done(n))
}

// ---------------------------------------------------------------------------
// risk

fn random_values(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| 4.0 * rng.uniform() - 1.0).collect()
}

fn dist_on(values: &[f64], probs: &[f64]) -> Result<DiscreteDistribution> {
    DiscreteDistribution::new(values.iter().copied().zip(probs.iter().copied()).collect())
}

fn coherence_axioms(level: Level, _: &Hooks) -> Result<Outcome> {
    let n = level.pick(20, 100);
    let mut rng = stream(3);
    let mut out = Outcome::equality(
        1e-9,
        "worst axiom violation over monotonicity, convexity, translation, homogeneity",
    );
    for _ in 0..n {
        let m = 1 + rng.index(8);
        let risk = RiskSpec::new(rng.uniform(), 0.01 + 0.99 * rng.uniform(), vec![0.0])?;
        let probs = positive_row(&mut rng, m);
        let x = random_values(&mut rng, m);
        let bump = random_values(&mut rng, m);
        let y: Vec<f64> = x.iter().zip(&bump).map(|(a, b)| a + b.abs()).collect();
        let z = random_values(&mut rng, m);
        let rx = one_step_risk(&dist_on(&x, &probs)?, &risk)?;
        let ry = one_step_risk(&dist_on(&y, &probs)?, &risk)?;
        let rz = one_step_risk(&dist_on(&z, &probs)?, &risk)?;
        out.residual(rx - ry);

        let w = rng.uniform();
        let mix: Vec<f64> = x.iter().zip(&z).map(|(a, b)| w * a + (1.0 - w) * b).collect();
        let rmix = one_step_risk(&dist_on(&mix, &probs)?, &risk)?;
        out.residual(rmix - (w * rx + (1.0 - w) * rz));

        let shift = 3.0 * rng.uniform() - 1.5;
        let shifted: Vec<f64> = x.iter().map(|a| a + shift).collect();
        let rs = one_step_risk(&dist_on(&shifted, &probs)?, &risk)?;
        out.residual((rs - rx - shift).abs());

        let scale = 3.0 * rng.uniform();
        let scaled: Vec<f64> = x.iter().map(|a| a * scale).collect();
        let rh = one_step_risk(&dist_on(&scaled, &probs)?, &risk)?;
        out.residual((rh - scale * rx).abs());
    }
    Ok(out.done(n))
}

fn cvar_variational(level: Level, _: &Hooks) -> Result<Outcome> {
    let n = level.pick(20, 100);
    let mut rng = stream(4);
    // atoms sit on multiples of 1e-2 and the η grid has spacing 1e-4 over
    // [0, 1], so the grid contains the minimizing VaR atom
    let grid: Vec<f64> = (0..=10_000).map(|i| i as f64 * 1e-4).collect();
    let mut out = Outcome::equality(1e-6, "|cvar - min over 10^4-point eta grid of eta + E[(c-eta)+]/alpha|");
    for _ in 0..n {
        let m = 1 + rng.index(8);
        let values: Vec<f64> = (0..m).map(|_| rng.index(101) as f64 / 100.0).collect();
        let probs = positive_row(&mut rng, m);
        let alpha = 0.01 + 0.99 * rng.uniform();
        let d = dist_on(&values, &probs)?;
        let best = grid
            .iter()
            .map(|&eta| eta + d.atoms().iter().map(|&(v, p)| p * (v - eta).max(0.0)).sum::<f64>() / alpha)
            .fold(f64::INFINITY, f64::min);
        out.residual((cvar(&d, alpha)? - best).abs());
    }
    Ok(out.done(n))
}

fn cvar_monotone_alpha(level: Level, _: &Hooks) -> Result<Outcome> {
    let n = level.pick(20, 100);
    let mut rng = stream(5);
    let mut out = Outcome::inequality(1e-12, "cvar at larger alpha minus cvar at smaller alpha");
    for _ in 0..n {
        let m = 1 + rng.index(8);
        let d = dist_on(&random_values(&mut rng, m), &positive_row(&mut rng, m))?;
        let a = 0.01 + 0.99 * rng.uniform();
        let b = 0.01 + 0.99 * rng.uniform();
        let (lo, hi) = (a.min(b), a.max(b));
        out.le(cvar(&d, hi)?, cvar(&d, lo)?);
    }
    Ok(out.done(n))
}

fn augmented_rows(level: Level, _: &Hooks) -> Result<Outcome> {
    let n = level.pick(10, 50);
    let mut rng = stream(6);
    let mut out = Outcome::equality(1e-12, "max |row sum - 1| and off-slice mass of augmented transitions");
    for _ in 0..n {
        let aug = random_instance(&mut rng)?;
        let d = aug.dims();
        for k in 0..d.n_aug_actions() {
            let (_, h_next) = d.split_action(k);
            let mut rows: Vec<&[f64]> = (0..d.n_states).map(|s| aug.first_successors(s, k)).collect();
            rows.extend((0..d.n_aug_states()).map(|x| aug.step_successors(x, k)));
            for row in rows {
                out.residual((row.iter().sum::<f64>() - 1.0).abs());
                let off: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|&(y, _)| d.split_state(y).1 != h_next)
                    .map(|(_, p)| p.abs())
                    .sum();
                out.residual(off);
            }
        }
    }
    Ok(out.done(n))
}

// ---------------------------------------------------------------------------
// policy

fn softmax_shift(level: Level, _: &Hooks) -> Result<Outcome> {
    let n = level.pick(20, 100);
    let mut rng = stream(7);
    let mut out = Outcome::equality(
        1e-12,
        "max probability change after adding a constant to every logit of a row",
    );
    for _ in 0..n {
        let dims = Dims::new(1 + rng.index(4), 1 + rng.index(3), 1 + rng.index(3));
        let policy = random_softmax(&mut rng, dims, 5.0);
        let shift = 20.0 * rng.uniform() - 10.0;
        let t1 = policy.table1().map(|v| v + shift);
        let t2 = policy.table2().map(|v| v - shift);
        let a = to_probabilities(&policy)?;
        let b = to_probabilities(&TwoPartPolicy::new(ParamKind::Softmax, t1, t2)?)?;
        out.residual(tables_max_diff(&a.p1, &b.p1).max(tables_max_diff(&a.p2, &b.p2)));
    }
    Ok(out.done(n))
}

fn projection_kkt(level: Level, _: &Hooks) -> Result<Outcome> {
    let n = level.pick(50, 500);
    let mut rng = stream(8);
    let mut out = Outcome::equality(
        1e-12,
        "KKT residual: |sum - 1| and |out_i - max(v_i - tau, 0)| with a common tau",
    );
    for _ in 0..n {
        let m = 1 + rng.index(10);
        let v: Vec<f64> = (0..m).map(|_| 4.0 * rng.uniform() - 2.0).collect();
        let p = project_simplex(&v)?;
        out.residual((p.iter().sum::<f64>() - 1.0).abs());
        // any strictly positive coordinate pins the threshold
        let i = (0..m).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
        let tau = v[i] - p[i];
        for (pi, vi) in p.iter().zip(&v) {
            out.residual((pi - (vi - tau).max(0.0)).abs());
        }
    }
    Ok(out.done(n))
}

// ---------------------------------------------------------------------------
// exact

fn bellman_residual(level: Level, _: &Hooks) -> Result<Outcome> {
    let n = level.pick(10, 100);
    let mut rng = stream(9);
    let mut out = Outcome::equality(
        1e-10,
        "sup-norm Bellman residual of J-hat and of the first-step identity",
    );
    for _ in 0..n {
        let aug = random_instance(&mut rng)?;
        let d = aug.dims();
        let p = random_direct(&mut rng, d);
        let mu = random_distribution(&mut rng, d.n_states);
        let v = evaluate(&aug, &p, &mu)?;
        let gamma = aug.gamma();
        for x in 0..d.n_aug_states() {
            let mut rhs = 0.0;
            for k in 0..d.n_aug_actions() {
                let next: f64 = aug.step_successors(x, k).iter().zip(&v.j_hat).map(|(a, b)| a * b).sum();
                rhs += p.p2.get(x, k) * (aug.cost_step().get(x, k) + gamma * next);
            }
            out.residual((v.j_hat[x] - rhs).abs());
        }
        for s in 0..d.n_states {
            let j: f64 = (0..d.n_aug_actions())
                .map(|k| p.p1.get(s, k) * v.q_first.get(s, k))
                .sum();
            out.residual((v.j_first[s] - j).abs());
        }
    }
    Ok(out.done(n))
}

fn perf_difference(level: Level, _: &Hooks) -> Result<Outcome> {
    let n = level.pick(10, 50);
    let mut rng = stream(10);
    let mut out = Outcome::equality(1e-9, "|lhs - rhs| of the performance-difference identity");
    for _ in 0..n {
        let aug = random_instance(&mut rng)?;
        let d = aug.dims();
        let p = random_direct(&mut rng, d);
        let q = random_direct(&mut rng, d);
        for s in 0..d.n_states {
            let (lhs, rhs) = performance_difference(&aug, &p, &q, s)?;
            out.residual((lhs - rhs).abs());
        }
    }
    Ok(out.done(n))
}

fn fd_softmax(level: Level, hooks: &Hooks) -> Result<Outcome> {
    let n = level.pick(4, 20);
    let mut rng = stream(11);
    let mut out = Outcome::equality(
        1e-4,
        "max |central difference - gradient| / max(max |gradient|, 1e-8), h = 1e-5",
    );
    for _ in 0..n {
        let aug = random_instance(&mut rng)?;
        let d = aug.dims();
        let policy = random_softmax(&mut rng, d, 1.0);
        let mu = random_distribution(&mut rng, d.n_states);
        let g = (hooks.softmax_gradient)(&aug, &policy, &mu)?;
        let f = |pol: &TwoPartPolicy| -> Result<f64> { Ok(evaluate(&aug, &to_probabilities(pol)?, &mu)?.j_mu) };
        out.residual(fd_relative_error(&policy, &g, 1e-5, &f)?);
    }
    Ok(out.done(n))
}

fn fd_direct(level: Level, _: &Hooks) -> Result<Outcome> {
    let n = level.pick(4, 20);
    let dirs = 5;
    let mut rng = stream(12);
    let mut out = Outcome::equality(
        1e-4,
        "|central difference - <g, delta>| / (|g| |delta|) along feasible directions, h = 1e-6",
    );
    for _ in 0..n {
        let aug = random_instance(&mut rng)?;
        let d = aug.dims();
        let p = random_direct(&mut rng, d);
        let mu = random_distribution(&mut rng, d.n_states);
        let g = direct_gradient_at(&aug, &p, &mu)?;
        for _ in 0..dirs {
            let other = random_direct(&mut rng, d);
            let d1 = other.p1.axpy(-1.0, &p.p1);
            let d2 = other.p2.axpy(-1.0, &p.p2);
            let h = 1e-6;
            let at = |sign: f64| -> Result<f64> {
                let moved = PolicyProbabilities::new(p.p1.axpy(sign * h, &d1), p.p2.axpy(sign * h, &d2));
                Ok(evaluate(&aug, &moved, &mu)?.j_mu)
            };
            let fd = (at(1.0)? - at(-1.0)?) / (2.0 * h);
            let exact = g.g1.dot(&d1) + g.g2.dot(&d2);
            let scale = g.norm() * (d1.norm2().powi(2) + d2.norm2().powi(2)).sqrt();
            out.residual((fd - exact).abs() / scale.max(1e-12));
        }
    }
    Ok(out.done(n * dirs))
}

fn barrier_grad(
    aug: &AugmentedMdp,
    policy: &TwoPartPolicy,
    mu: &[f64],
    kappa: f64,
    hooks: &Hooks,
) -> Result<GradientBundle> {
    let g = (hooks.softmax_gradient)(aug, policy, mu)?;
    let b = barrier_gradient(aug.dims(), &to_probabilities(policy)?, kappa);
    Ok(GradientBundle {
        g1: g.g1.axpy(1.0, &b.g1),
        g2: g.g2.axpy(1.0, &b.g2),
        kind: b.kind,
    })
}

fn fd_barrier(level: Level, hooks: &Hooks) -> Result<Outcome> {
    let n = level.pick(4, 20);
    let mut rng = stream(13);
    let mut out = Outcome::equality(
        1e-4,
        "max |central difference of L_kappa - gradient| / max(max |gradient|, 1e-8), h = 1e-5",
    );
    for _ in 0..n {
        let aug = random_instance(&mut rng)?;
        let d = aug.dims();
        let policy = random_softmax(&mut rng, d, 1.0);
        let mu = random_distribution(&mut rng, d.n_states);
        let kappa = 0.05 + rng.uniform();
        let g = barrier_grad(&aug, &policy, &mu, kappa, hooks)?;
        let f = |pol: &TwoPartPolicy| regularized_objective(&aug, pol, &mu, kappa);
        out.residual(fd_relative_error(&policy, &g, 1e-5, &f)?);
    }
    Ok(out.done(n))
}

fn softmax_rows_zero(level: Level, hooks: &Hooks) -> Result<Outcome> {
    let n = level.pick(10, 100);
    let mut rng = stream(14);
    let mut out = Outcome::equality(
        1e-12,
        "max |row sum| of both softmax gradient blocks, relative to max |gradient|",
    );
    for _ in 0..n {
        let aug = random_instance(&mut rng)?;
        let d = aug.dims();
        let policy = random_softmax(&mut rng, d, 2.0);
        let mu = random_distribution(&mut rng, d.n_states);
        let g = (hooks.softmax_gradient)(&aug, &policy, &mu)?;
        let scale = bundle_max_abs(&g).max(1.0);
        for row in g.g1.iter_rows().chain(g.g2.iter_rows()) {
            out.residual(row.iter().sum::<f64>().abs() / scale);
        }
    }
    Ok(out.done(n))
}

fn gradient_domination(level: Level, _: &Hooks) -> Result<Outcome> {
    let n = level.pick(20, 100);
    let mut rng = stream(15);
    let mut out = Outcome::inequality(1e-8, "J(rho) - J*(rho) <= D1 * vertex_gap(mu)");
    for _ in 0..n {
        let aug = random_instance(&mut rng)?;
        let d = aug.dims();
        let p = random_direct(&mut rng, d);
        let mu = random_distribution(&mut rng, d.n_states);
        let rho = random_distribution(&mut rng, d.n_states);
        let optimal = solve_optimal(&aug)?;
        let c = constants_with(&aug, &p, &mu, &rho, 0.0, 1.0, &optimal)?;
        let j = evaluate(&aug, &p, &rho)?.j_mu;
        let j_star: f64 = optimal.values.j_first.iter().zip(&rho).map(|(a, b)| a * b).sum();
        let gap = vertex_gap(&aug, &p, &mu)?;
        out.le(j - j_star, c.d1 * gap);
    }
    Ok(out.done(n))
}

fn smoothness_direct(level: Level, _: &Hooks) -> Result<Outcome> {
    let (instances, pairs) = (level.pick(3, 10), level.pick(20, 100));
    let mut rng = stream(16);
    let mut out = Outcome::inequality(
        1e-12,
        "|grad J(pi) - grad J(pi')| <= sigma |pi - pi'| for J(mu) and every start state",
    );
    for _ in 0..instances {
        let aug = random_instance(&mut rng)?;
        let d = aug.dims();
        let p0 = random_direct(&mut rng, d);
        let c = constants_with(
            &aug,
            &p0,
            &random_distribution(&mut rng, d.n_states),
            &random_distribution(&mut rng, d.n_states),
            0.0,
            1.0,
            &solve_optimal(&aug)?,
        )?;
        let mut starts = vec![random_distribution(&mut rng, d.n_states)];
        for s in 0..d.n_states {
            let mut delta = vec![0.0; d.n_states];
            delta[s] = 1.0;
            starts.push(delta);
        }
        for _ in 0..pairs {
            let p = random_direct(&mut rng, d);
            let q = random_direct(&mut rng, d);
            let dp = (tables_sq(&p.p1, &q.p1) + tables_sq(&p.p2, &q.p2)).sqrt();
            for mu in &starts {
                let gp = direct_gradient_at(&aug, &p, mu)?;
                let gq = direct_gradient_at(&aug, &q, mu)?;
                out.le(gp.distance(&gq), c.sigma * dp);
            }
        }
    }
    Ok(out.done(instances * pairs))
}

fn tables_sq(a: &Table, b: &Table) -> f64 {
    a.axpy(-1.0, b).norm2().powi(2)
}

fn smoothness_barrier(level: Level, hooks: &Hooks) -> Result<Outcome> {
    let (instances, pairs) = (level.pick(3, 10), level.pick(20, 100));
    let mut rng = stream(17);
    let mut out = Outcome::inequality(
        1e-12,
        "|grad L(theta) - grad L(theta')| <= sigma_kappa |theta - theta'|",
    );
    for _ in 0..instances {
        let aug = random_instance(&mut rng)?;
        let d = aug.dims();
        let kappa = rng.uniform();
        let mu = random_distribution(&mut rng, d.n_states);
        let p0 = random_direct(&mut rng, d);
        let c = constants_with(&aug, &p0, &mu, &mu, kappa, 1.0, &solve_optimal(&aug)?)?;
        for _ in 0..pairs {
            let a = random_softmax(&mut rng, d, 3.0);
            let b = random_softmax(&mut rng, d, 3.0);
            let ga = barrier_grad(&aug, &a, &mu, kappa, hooks)?;
            let gb = barrier_grad(&aug, &b, &mu, kappa, hooks)?;
            out.le(
                dist2(&flat(&ga), &flat(&gb)),
                c.sigma_kappa * dist2(&logits(&a), &logits(&b)),
            );
        }
    }
    Ok(out.done(instances * pairs))
}

/// Runs barrier descent until both gradient blocks meet the stationarity
/// thresholds and then checks the certified gap.
fn stationarity_gap(level: Level, _: &Hooks) -> Result<Outcome> {
    let n = level.pick(3, 10);
    let mut rng = stream(18);
    let mut out = Outcome::inequality(
        1e-10,
        "J(rho) - J*(rho) <= 2 kappa |rho/mu| + 2 kappa |d*/mu_P| / ((1-gamma) pi1_lb) at stationarity",
    );
    let mut certified = 0;
    for _ in 0..n {
        let aug = random_instance(&mut rng)?;
        let d = aug.dims();
        let mu = random_distribution(&mut rng, d.n_states);
        let rho = random_distribution(&mut rng, d.n_states);
        let kappa = 0.05;
        let mut cfg = OptimConfig::new(StepSize::Fixed(1.0), 20_000).with_kappa(kappa);
        cfg.stop_at_stationarity = true;
        let init = TwoPartPolicy::uniform_softmax(d.n_states, d.n_actions, d.n_eta);
        let run = gd_softmax_barrier(&aug, &init, &mu, &rho, &cfg)?;
        let last = run.records.last().expect("at least one record");
        let n_aug = d.n_aug_actions() as f64;
        if last.grad_norm1 > kappa / (2.0 * d.n_states as f64 * n_aug)
            || last.grad_norm2 > kappa / (2.0 * d.n_aug_states() as f64 * n_aug)
        {
            continue;
        }
        certified += 1;
        let p = to_probabilities(&run.final_policy)?;
        let c = constants_with(&aug, &p, &mu, &rho, kappa, 1.0, &solve_optimal(&aug)?)?;
        let bound = 2.0 * kappa * c.ratio_rho_mu + 2.0 * kappa * c.ratio_dstar_mu_p / ((1.0 - aug.gamma()) * p.pi1_lb);
        out.le(last.gap, bound);
    }
    out.detail = format!("{} ({certified}/{n} runs reached the thresholds)", out.detail);
    Ok(out.done(certified))
}

fn monte_carlo_value(level: Level, _: &Hooks) -> Result<Outcome> {
    let (instances, rollouts) = (level.pick(1, 3), level.pick(10_000, 100_000));
    let mut rng = stream(19);
    let mut out = Outcome::equality(3.0, "|MC mean - J(rho)| in standard errors, truncated rollouts");
    for _ in 0..instances {
        let aug = random_instance(&mut rng)?;
        let d = aug.dims();
        let p = random_direct(&mut rng, d);
        let rho = aug.base().rho().to_vec();
        let exact = evaluate(&aug, &p, &rho)?.j_mu;
        let gamma = aug.gamma();
        let c_inf = aug.max_abs_modified_cost().max(1e-12);
        // γ^T ‖c̄‖∞ / (1-γ) ≤ 1e-4
        let horizon = ((1e-4 * (1.0 - gamma) / c_inf).ln() / gamma.ln()).ceil().max(1.0) as usize;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..rollouts {
            let traj = sample_trajectory(aug.base(), &p, aug.risk(), horizon, Start::Rho, &mut rng)?;
            let mut g = 0.0;
            let mut w = 1.0;
            for step in &traj.steps {
                g += w * step.modified_cost;
                w *= gamma;
            }
            sum += g;
            sum_sq += g * g;
        }
        let n = rollouts as f64;
        let mean = sum / n;
        let se = ((sum_sq / n - mean * mean).max(0.0) / n).sqrt();
        out.residual((mean - exact).abs() / se.max(1e-12));
    }
    Ok(out.done(instances))
}

/// Risk-neutral value of a base-MDP policy by a dense solve.
fn risk_neutral_value(mdp: &TabularMdp, pi: &Table) -> Vec<f64> {
    let n = mdp.n_states();
    let gamma = mdp.gamma();
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut c = DVector::<f64>::zeros(n);
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            let w = pi.get(s, a);
            c[s] += w * mdp.cost(s, a);
            for (sn, &p) in mdp.transition_row(s, a).iter().enumerate() {
                m[(s, sn)] -= gamma * w * p;
            }
        }
    }
    m.lu()
        .solve(&c)
        .expect("I - γP is nonsingular")
        .iter()
        .copied()
        .collect()
}

/// Risk-neutral optimal values by value iteration to a 1e-13 contraction bound.
fn risk_neutral_optimum(mdp: &TabularMdp) -> Vec<f64> {
    let gamma = mdp.gamma();
    let mut v = vec![0.0; mdp.n_states()];
    loop {
        let next: Vec<f64> = (0..mdp.n_states())
            .map(|s| {
                (0..mdp.n_actions())
                    .map(|a| {
                        mdp.cost(s, a)
                            + gamma * mdp.transition_row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let delta = next.iter().zip(&v).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        v = next;
        if delta * gamma / (1.0 - gamma) <= 1e-13 {
            return v;
        }
    }
}

/// A λ = 0 instance, an η-uniform policy and the base policy it spreads.
fn risk_neutral_case(rng: &mut RngStream) -> Result<(TabularMdp, AugmentedMdp, PolicyProbabilities, Table)> {
    let ns = 1 + rng.index(4);
    let na = 1 + rng.index(3);
    let nh = 1 + rng.index(3);
    let gamma = if rng.uniform() < 0.5 { 0.5 } else { 0.9 };
    let mdp = make_random_mdp(ns, na, gamma, rng)?;
    let aug = build_augmented(
        &mdp,
        &RiskSpec::with_uniform_grid(0.0, 0.05 + 0.95 * rng.uniform(), nh)?,
    )?;
    let d = aug.dims();
    let base = positive_table(rng, ns, na);
    let spread = |rows: usize, state_of: &dyn Fn(usize) -> usize| {
        let mut t = Table::zeros(rows, d.n_aug_actions());
        for r in 0..rows {
            for k in 0..d.n_aug_actions() {
                let (a, _) = d.split_action(k);
                t.set(r, k, base.get(state_of(r), a) / nh as f64);
            }
        }
        t
    };
    let p = PolicyProbabilities::new(spread(ns, &|s| s), spread(d.n_aug_states(), &|x| d.split_state(x).0));
    Ok((mdp, aug, p, base))
}

fn risk_neutral_policy_value(level: Level, _: &Hooks) -> Result<Outcome> {
    let n = level.pick(10, 50);
    let mut rng = stream(20);
    let mut out = Outcome::equality(1e-10, "lambda = 0: |J(rho) - V(rho)| for eta-uniform policies");
    for _ in 0..n {
        let (mdp, aug, p, base) = risk_neutral_case(&mut rng)?;
        let rho = mdp.rho().to_vec();
        let j = evaluate(&aug, &p, &rho)?.j_mu;
        let v: f64 = risk_neutral_value(&mdp, &base)
            .iter()
            .zip(&rho)
            .map(|(a, b)| a * b)
            .sum();
        out.residual((j - v).abs());
    }
    Ok(out.done(n))
}

fn risk_neutral_optimum_matches(level: Level, _: &Hooks) -> Result<Outcome> {
    let n = level.pick(10, 50);
    let mut rng = stream(26);
    let mut out = Outcome::equality(1e-8, "lambda = 0: |J*(s) - V*(s)| against risk-neutral value iteration");
    for _ in 0..n {
        let (mdp, aug, _, _) = risk_neutral_case(&mut rng)?;
        let star = solve_optimal(&aug)?;
        for (a, b) in star.values.j_first.iter().zip(risk_neutral_optimum(&mdp)) {
            out.residual((a - b).abs());
        }
    }
    Ok(out.done(n))
}

// ---------------------------------------------------------------------------
// optim

fn pgd_monotone(level: Level, _: &Hooks) -> Result<Outcome> {
    let (n, budget) = (level.pick(5, 20), level.pick(100, 300));
    let mut rng = stream(21);
    let mut out = Outcome::equality(
        1e-10,
        "max row-sum error and J(mu) increase along PGD with the theoretical step",
    );
    for _ in 0..n {
        let aug = random_instance(&mut rng)?;
        let d = aug.dims();
        let init = random_direct(&mut rng, d).to_direct()?;
        let mu = random_distribution(&mut rng, d.n_states);
        let rho = random_distribution(&mut rng, d.n_states);
        let run = pgd_direct(&aug, &init, &mu, &rho, &OptimConfig::new(StepSize::Theoretical, budget))?;
        for w in run.records.windows(2) {
            out.residual(w[1].j_mu - w[0].j_mu);
        }
        let p = to_probabilities(&run.final_policy)?;
        for row in p.p1.iter_rows().chain(p.p2.iter_rows()) {
            out.residual((row.iter().sum::<f64>() - 1.0).abs());
            out.residual(-row.iter().copied().fold(f64::INFINITY, f64::min));
        }
    }
    Ok(out.done(n))
}

fn gradient_mapping_rate(level: Level, _: &Hooks) -> Result<Outcome> {
    let (n, budget) = (level.pick(5, 20), level.pick(100, 300));
    let mut rng = stream(22);
    let mut out = Outcome::inequality(1e-12, "min_t |G(pi_t)| <= sqrt(2 sigma (J0(mu) - J*(mu)) / T)");
    for _ in 0..n {
        let aug = random_instance(&mut rng)?;
        let d = aug.dims();
        let init = random_direct(&mut rng, d).to_direct()?;
        let mu = random_distribution(&mut rng, d.n_states);
        let run = pgd_direct(&aug, &init, &mu, &mu, &OptimConfig::new(StepSize::Theoretical, budget))?;
        let optimal = solve_optimal(&aug)?;
        let j_star: f64 = optimal.values.j_first.iter().zip(&mu).map(|(a, b)| a * b).sum();
        let c = constants_with(&aug, &to_probabilities(&init)?, &mu, &mu, 0.0, 1.0, &optimal)?;
        let t = (run.records.len() - 1).max(1) as f64;
        let min_gmap = run.records[..run.records.len() - 1]
            .iter()
            .map(|r| r.gmap_norm)
            .fold(f64::INFINITY, f64::min);
        if min_gmap.is_finite() {
            let j0 = run.records[0].j_mu;
            out.le(min_gmap, (2.0 * c.sigma * (j0 - j_star).max(0.0) / t).sqrt());
        }
    }
    Ok(out.done(n))
}

fn barrier_monotone(level: Level, _: &Hooks) -> Result<Outcome> {
    let (n, budget) = (level.pick(5, 20), level.pick(200, 1000));
    let mut rng = stream(23);
    let mut out = Outcome::equality(
        1e-12,
        "max L_kappa increase with beta = 1/sigma_kappa, and min pi_LB must stay > 0",
    );
    for _ in 0..n {
        let aug = random_instance(&mut rng)?;
        let d = aug.dims();
        let kappa = 0.01 + rng.uniform();
        let init = random_softmax(&mut rng, d, 2.0);
        let mu = random_distribution(&mut rng, d.n_states);
        let cfg = OptimConfig::new(StepSize::Theoretical, budget).with_kappa(kappa);
        let run = gd_softmax_barrier(&aug, &init, &mu, &mu, &cfg)?;
        for w in run.records.windows(2) {
            let (a, b) = (w[0].l_kappa.unwrap_or(f64::NAN), w[1].l_kappa.unwrap_or(f64::NAN));
            out.residual(b - a);
        }
        let (lb1, lb2) = run.min_pi_lb();
        if !(lb1 > 0.0 && lb2 > 0.0) {
            out.residual(f64::INFINITY);
        }
        debug_assert!(theoretical_softmax_step(&aug, kappa) > 0.0);
    }
    Ok(out.done(n))
}

/// Suboptimality of a stationary point of `L_κ` when every suboptimal
/// advantage is large against `κ`: each of the two blocks keeps about
/// `κ (1 - 1/|A||H|)` of mass-weighted advantage on suboptimal entries.
pub fn barrier_bias(kappa: f64, dims: Dims) -> f64 {
    2.0 * kappa * (1.0 - 1.0 / dims.n_aug_actions() as f64)
}

fn convergence(level: Level, _: &Hooks) -> Result<Outcome> {
    let n = level.pick(1, 3);
    let kappa = 1e-3;
    let mut out = Outcome::equality(
        1e-3,
        "best gap within 10^4 iterations: PGD gap, and barrier gap minus its stationary bias 2 kappa (1 - 1/|A||H|); failed bound checks add +inf",
    );
    for i in 0..n {
        let mdp = make_random_mdp(2, 2, 0.5, &mut stream(100 + i as u64))?;
        let aug = build_augmented(&mdp, &RiskSpec::with_uniform_grid(0.5, 0.5, 2)?)?;
        let d = aug.dims();
        let mu = mdp.rho().to_vec();
        let rho = mu.clone();
        let init = TwoPartPolicy::uniform_direct(d.n_states, d.n_actions, d.n_eta);
        let pgd = pgd_direct(
            &aug,
            &init,
            &mu,
            &rho,
            &OptimConfig::new(StepSize::Fixed(1.0), 10_000).with_tol(1e-4),
        )?;
        out.residual(pgd.best_gap());
        let init = TwoPartPolicy::uniform_softmax(d.n_states, d.n_actions, d.n_eta);
        let cfg = OptimConfig::new(StepSize::Fixed(10.0), 10_000)
            .with_kappa(kappa)
            .with_tol(1e-4);
        let gd = gd_softmax_barrier(&aug, &init, &mu, &rho, &cfg)?;
        out.residual(gd.best_gap() - barrier_bias(kappa, d));
        for run in [&pgd, &gd] {
            if !iteration_bound_check(&aug, run, &mu, &rho, &[0.1, 0.01])?.passed {
                out.residual(f64::INFINITY);
            }
        }
    }
    Ok(out.done(n))
}

// ---------------------------------------------------------------------------
// reinforce

/// Two states: state 0 moves to the absorbing goal with an action-dependent
/// probability, otherwise stays.
pub fn two_state_episodic(gamma: f64) -> Result<TabularMdp> {
    let cost = vec![1.0, 0.4, 0.0, 0.0];
    let transition = vec![0.3, 0.7, 0.8, 0.2, 0.0, 1.0, 0.0, 1.0];
    TabularMdp::new(2, 2, cost, transition, gamma, vec![1.0, 0.0], vec![1])
}

fn reinforce_consistency(level: Level, _: &Hooks) -> Result<Outcome> {
    let episodes = level.pick(20_000, 100_000);
    let horizon = 6;
    let mdp = two_state_episodic(0.9)?;
    let risk = RiskSpec::new(0.5, 0.3, vec![0.5, 1.0])?;
    let aug = build_augmented(&mdp, &risk)?;
    let d = aug.dims();
    let policy = random_softmax(&mut stream(24), d, 1.0);
    let p = to_probabilities(&policy)?;
    let exact = finite_horizon_gradient(&aug, &p, mdp.rho(), horizon, false)?;

    let m = d.n_states * d.n_aug_actions() + d.n_aug_states() * d.n_aug_actions();
    let mut sum = vec![0.0; m];
    let mut sum_sq = vec![0.0; m];
    let mut rng = stream(25);
    for _ in 0..episodes {
        let traj = sample_trajectory(&mdp, &p, &risk, horizon, Start::Rho, &mut rng)?;
        let (u1, u2) = episode_update(&traj, &p, d, mdp.gamma(), false);
        for (i, v) in u1.as_slice().iter().chain(u2.as_slice()).enumerate() {
            sum[i] += v;
            sum_sq[i] += v * v;
        }
    }
    let n = episodes as f64;
    let mut out = Outcome::equality(3.0, "max componentwise |mean update - exact| in standard errors");
    for (i, &e) in flat(&exact).iter().enumerate() {
        let mean = sum[i] / n;
        let se = ((sum_sq[i] / n - mean * mean).max(0.0) / n).sqrt();
        if se == 0.0 {
            // components the episode can never touch must match exactly
            out.residual(if (mean - e).abs() <= 1e-12 { 0.0 } else { f64::INFINITY });
        } else {
            out.residual((mean - e).abs() / se);
        }
    }
    Ok(out.done(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped(aug: &AugmentedMdp, policy: &TwoPartPolicy, mu: &[f64]) -> Result<GradientBundle> {
        let g = grad_softmax(aug, policy, mu)?;
        Ok(GradientBundle {
            g1: g.g1.map(|v| -v),
            g2: g.g2.map(|v| -v),
            kind: g.kind,
        })
    }

    fn find<'a>(report: &'a VerifyReport, name: &str) -> &'a CheckResult {
        report.checks.iter().find(|c| c.name == name).unwrap()
    }

    #[test]
    fn fast_suite_passes() {
        let report = run_all(Level::Fast, &Hooks::default());
        for c in &report.checks {
            assert!(c.passed, "{} failed: {c:?}", c.name);
            assert!(c.slack >= 0.0);
        }
        assert_eq!(report.exit_code(), 0);
    }

    #[test]
    fn sign_error_in_softmax_gradient_is_caught() {
        let hooks = Hooks {
            softmax_gradient: flipped,
        };
        let spec = registry()
            .into_iter()
            .find(|c| c.name == "softmax_gradient_finite_difference")
            .unwrap();
        let r = spec.run(Level::Fast, &hooks);
        assert!(!r.passed);
        assert!(r.slack < 0.0);
        let report = VerifyReport::new(Level::Fast, vec![r]);
        assert_eq!(report.exit_code(), 1);
        assert!(!find(&report, "softmax_gradient_finite_difference").passed);
    }

    #[test]
    fn inequality_slack_is_rhs_minus_lhs_plus_tolerance() {
        let mut o = Outcome::inequality(0.5, "");
        o.le(1.0, 3.0);
        o.le(2.0, 2.25);
        assert_eq!(o.slack(), 0.75);
        let mut e = Outcome::equality(1e-3, "");
        e.residual(4e-4);
        e.residual(f64::NAN);
        assert!(!(e.slack() >= 0.0));
    }

    #[test]
    fn report_round_trips_through_json() {
        let spec = registry().into_iter().find(|c| c.name == "projection_kkt").unwrap();
        let report = VerifyReport::new(Level::Fast, vec![spec.run(Level::Fast, &Hooks::default())]);
        let text = serde_json::to_string(&report).unwrap();
        assert!(text.contains("\"level\":\"fast\""));
        let back: VerifyReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
    }
}
