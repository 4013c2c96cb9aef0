//! Exact evaluation and gradients on the augmented MDP.
//!
//! Costs are minimized, so advantages follow `A = J - Q`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{log_barrier, to_probabilities, Dims, ParamKind, PolicyProbabilities, TwoPartPolicy};
use crate::risk::AugmentedMdp;
use crate::table::Table;

const DIST_TOL: f64 = 1e-9;
const VI_TOL: f64 = 1e-12;
const VI_MAX_ITERS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueBundle {
    /// `Ĵ(s, η)`.
    pub j_hat: Vec<f64>,
    /// `Q̂((s, η), (a, η'))`.
    pub q_hat: Table,
    /// First-step `Q(s, (a, η₂))`.
    pub q_first: Table,
    /// `J(s)` for every start state.
    pub j_first: Vec<f64>,
    /// `J(μ)` for the distribution passed to [`evaluate`].
    pub j_mu: f64,
    pub adv_first: Table,
    pub adv_step: Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyBundle {
    /// Distribution of `(s₂, η₂)` after the first step.
    pub rho_pi: Vec<f64>,
    /// Normalized discounted visitation seeded by `rho_pi`.
    pub d_rho_pi: Vec<f64>,
    /// `μ^P(s, η) = Σ_{s₁,a₁} μ(s₁) P(s|s₁,a₁)`. Not normalized: it sums to `|A||H|`.
    pub mu_p: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientKind {
    Direct,
    Softmax,
    SoftmaxBarrier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBundle {
    pub g1: Table,
    pub g2: Table,
    pub kind: GradientKind,
}

impl GradientBundle {
    pub fn norm1(&self) -> f64 {
        self.g1.norm2()
    }

    pub fn norm2(&self) -> f64 {
        self.g2.norm2()
    }

    /// Euclidean norm over both blocks.
    pub fn norm(&self) -> f64 {
        (self.g1.norm2().powi(2) + self.g2.norm2().powi(2)).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.g1.all_finite() && self.g2.all_finite()
    }

    /// Euclidean distance to another gradient of the same shape.
    pub fn distance(&self, other: &GradientBundle) -> f64 {
        let d1 = self.g1.axpy(-1.0, &other.g1).norm2();
        let d2 = self.g2.axpy(-1.0, &other.g2).norm2();
        (d1 * d1 + d2 * d2).sqrt()
    }
}

fn check_probs(aug: &AugmentedMdp, p: &PolicyProbabilities) -> Result<()> {
    let d = aug.dims();
    if p.p1.rows() != d.n_states
        || p.p1.cols() != d.n_aug_actions()
        || p.p2.rows() != d.n_aug_states()
        || p.p2.cols() != d.n_aug_actions()
    {
        return Err(Error::Shape(format!(
            "policy tables {}x{} / {}x{} do not match augmented MDP {:?}",
            p.p1.rows(),
            p.p1.cols(),
            p.p2.rows(),
            p.p2.cols(),
            d
        )));
    }
    Ok(())
}

/// Checks that `mu` is a probability vector of length `n`.
pub fn check_distribution(mu: &[f64], n: usize) -> Result<()> {
    if mu.len() != n {
        return Err(Error::Shape(format!(
            "distribution has {} entries, expected {n}",
            mu.len()
        )));
    }
    if mu.iter().any(|&m| !m.is_finite() || m < 0.0) {
        return Err(Error::InvalidDistribution("negative or non-finite mass".into()));
    }
    let total: f64 = mu.iter().sum();
    if (total - 1.0).abs() > DIST_TOL {
        return Err(Error::InvalidDistribution(format!("mass sums to {total}")));
    }
    Ok(())
}

/// `π₂`-averaged transition matrix and cost vector over augmented states.
fn policy_chain(aug: &AugmentedMdp, p2: &Table) -> (DMatrix<f64>, DVector<f64>) {
    let nx = aug.n_aug_states();
    let nk = aug.n_aug_actions();
    let mut p = DMatrix::zeros(nx, nx);
    let mut c = DVector::zeros(nx);
    for x in 0..nx {
        let row = p2.row(x);
        for k in 0..nk {
            let w = row[k];
            if w == 0.0 {
                continue;
            }
            c[x] += w * aug.cost_step().get(x, k);
            for (y, &q) in aug.step_successors(x, k).iter().enumerate() {
                if q != 0.0 {
                    p[(x, y)] += w * q;
                }
            }
        }
    }
    (p, c)
}

fn resolvent(aug: &AugmentedMdp, p_pi: &DMatrix<f64>) -> DMatrix<f64> {
    let nx = p_pi.nrows();
    DMatrix::identity(nx, nx) - p_pi * aug.gamma()
}

fn solve(m: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    m.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular policy-evaluation system".into()))
}

fn expected_next(succ: &[f64], values: &[f64]) -> f64 {
    succ.iter().zip(values).map(|(p, v)| p * v).sum()
}

/// `Ĵ` of the stationary policy `π₂`.
pub fn evaluate_stationary(aug: &AugmentedMdp, p2: &Table) -> Result<Vec<f64>> {
    let (p_pi, c_pi) = policy_chain(aug, p2);
    Ok(solve(resolvent(aug, &p_pi), c_pi)?.as_slice().to_vec())
}

fn bundle_from_j_hat(aug: &AugmentedMdp, p: &PolicyProbabilities, mu: &[f64], j_hat: Vec<f64>) -> ValueBundle {
    let d = aug.dims();
    let gamma = aug.gamma();
    let (ns, nx, nk) = (d.n_states, d.n_aug_states(), d.n_aug_actions());
    let mut q_hat = Table::zeros(nx, nk);
    let mut adv_step = Table::zeros(nx, nk);
    for x in 0..nx {
        for k in 0..nk {
            let q = aug.cost_step().get(x, k) + gamma * expected_next(aug.step_successors(x, k), &j_hat);
            q_hat.set(x, k, q);
            adv_step.set(x, k, j_hat[x] - q);
        }
    }
    let mut q_first = Table::zeros(ns, nk);
    let mut adv_first = Table::zeros(ns, nk);
    let mut j_first = vec![0.0; ns];
    for s in 0..ns {
        for k in 0..nk {
            let q = aug.cost_first().get(s, k) + gamma * expected_next(aug.first_successors(s, k), &j_hat);
            q_first.set(s, k, q);
        }
        j_first[s] = p.p1.row(s).iter().zip(q_first.row(s)).map(|(a, b)| a * b).sum();
        for k in 0..nk {
            adv_first.set(s, k, j_first[s] - q_first.get(s, k));
        }
    }
    let j_mu = mu.iter().zip(&j_first).map(|(m, j)| m * j).sum();
    ValueBundle {
        j_hat,
        q_hat,
        q_first,
        j_first,
        j_mu,
        adv_first,
        adv_step,
    }
}

/// Exact values of the two-part policy by a dense linear solve.
pub fn evaluate(aug: &AugmentedMdp, p: &PolicyProbabilities, mu: &[f64]) -> Result<ValueBundle> {
    check_probs(aug, p)?;
    check_distribution(mu, aug.dims().n_states)?;
    let j_hat = evaluate_stationary(aug, &p.p2)?;
    Ok(bundle_from_j_hat(aug, p, mu, j_hat))
}

/// Distribution of `(s₂, η₂)` when `s₁ ~ mu` and `(a₁, η₂) ~ π₁`.
pub fn first_step_distribution(aug: &AugmentedMdp, p1: &Table, mu: &[f64]) -> Vec<f64> {
    let d = aug.dims();
    let mut out = vec![0.0; d.n_aug_states()];
    for (s, &m) in mu.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for (k, &w) in p1.row(s).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (y, &q) in aug.first_successors(s, k).iter().enumerate() {
                out[y] += m * w * q;
            }
        }
    }
    out
}

/// `(1-γ) seed (I - γ P_π)^{-1}`: normalized discounted visitation of `π₂`.
pub fn visitation(aug: &AugmentedMdp, p2: &Table, seed: &[f64]) -> Result<Vec<f64>> {
    let (p_pi, _) = policy_chain(aug, p2);
    let rhs = DVector::from_iterator(seed.len(), seed.iter().map(|v| (1.0 - aug.gamma()) * v));
    Ok(solve(resolvent(aug, &p_pi).transpose(), rhs)?.as_slice().to_vec())
}

pub fn occupancies(aug: &AugmentedMdp, p: &PolicyProbabilities, mu: &[f64]) -> Result<OccupancyBundle> {
    check_probs(aug, p)?;
    let d = aug.dims();
    check_distribution(mu, d.n_states)?;
    let rho_pi = first_step_distribution(aug, &p.p1, mu);
    let d_rho_pi = visitation(aug, &p.p2, &rho_pi)?;
    let base = aug.base();
    let mut mu_p = vec![0.0; d.n_aug_states()];
    for (s1, &m) in mu.iter().enumerate() {
        for a in 0..d.n_actions {
            for (s, &q) in base.transition_row(s1, a).iter().enumerate() {
                for h in 0..d.n_eta {
                    mu_p[d.aug_state(s, h)] += m * q;
                }
            }
        }
    }
    Ok(OccupancyBundle { rho_pi, d_rho_pi, mu_p })
}

/// Direct-parameterization gradient evaluated at arbitrary probabilities.
pub fn direct_gradient_at(aug: &AugmentedMdp, p: &PolicyProbabilities, mu: &[f64]) -> Result<GradientBundle> {
    let v = evaluate(aug, p, mu)?;
    let occ = occupancies(aug, p, mu)?;
    Ok(direct_from_parts(aug, mu, &v, &occ))
}

/// Direct gradient from an evaluation and occupancies at the same `mu`.
pub fn direct_from_parts(aug: &AugmentedMdp, mu: &[f64], v: &ValueBundle, occ: &OccupancyBundle) -> GradientBundle {
    let scale = aug.gamma() / (1.0 - aug.gamma());
    let mut g1 = v.q_first.clone();
    for (s, &m) in mu.iter().enumerate() {
        g1.row_mut(s).iter_mut().for_each(|g| *g *= m);
    }
    let mut g2 = v.q_hat.clone();
    for (x, &w) in occ.d_rho_pi.iter().enumerate() {
        g2.row_mut(x).iter_mut().for_each(|g| *g *= scale * w);
    }
    GradientBundle {
        g1,
        g2,
        kind: GradientKind::Direct,
    }
}

fn require(policy: &TwoPartPolicy, kind: ParamKind) -> Result<()> {
    if policy.kind() != kind {
        return Err(Error::Parameterization {
            expected: kind.name(),
            got: policy.kind().name(),
        });
    }
    Ok(())
}

pub fn grad_direct(aug: &AugmentedMdp, policy: &TwoPartPolicy, mu: &[f64]) -> Result<GradientBundle> {
    require(policy, ParamKind::Direct)?;
    direct_gradient_at(aug, &to_probabilities(policy)?, mu)
}

/// Softmax gradient from precomputed probabilities.
pub fn softmax_gradient_at(aug: &AugmentedMdp, p: &PolicyProbabilities, mu: &[f64]) -> Result<GradientBundle> {
    let v = evaluate(aug, p, mu)?;
    let occ = occupancies(aug, p, mu)?;
    Ok(softmax_from_parts(aug, p, mu, &v, &occ))
}

/// Softmax gradient from an evaluation and occupancies at the same `mu`.
pub fn softmax_from_parts(
    aug: &AugmentedMdp,
    p: &PolicyProbabilities,
    mu: &[f64],
    v: &ValueBundle,
    occ: &OccupancyBundle,
) -> GradientBundle {
    let scale = aug.gamma() / (1.0 - aug.gamma());
    let mut g1 = Table::zeros(p.p1.rows(), p.p1.cols());
    for s in 0..p.p1.rows() {
        for k in 0..p.p1.cols() {
            g1.set(s, k, -mu[s] * p.p1.get(s, k) * v.adv_first.get(s, k));
        }
    }
    let mut g2 = Table::zeros(p.p2.rows(), p.p2.cols());
    for x in 0..p.p2.rows() {
        for k in 0..p.p2.cols() {
            g2.set(x, k, -scale * occ.d_rho_pi[x] * p.p2.get(x, k) * v.adv_step.get(x, k));
        }
    }
    GradientBundle {
        g1,
        g2,
        kind: GradientKind::Softmax,
    }
}

pub fn grad_softmax(aug: &AugmentedMdp, policy: &TwoPartPolicy, mu: &[f64]) -> Result<GradientBundle> {
    require(policy, ParamKind::Softmax)?;
    softmax_gradient_at(aug, &to_probabilities(policy)?, mu)
}

/// Gradient of the barrier terms alone with respect to the logits.
pub fn barrier_gradient(dims: Dims, p: &PolicyProbabilities, kappa: f64) -> GradientBundle {
    let n = dims.n_aug_actions() as f64;
    let c1 = kappa / dims.n_states as f64;
    let c2 = kappa / dims.n_aug_states() as f64;
    GradientBundle {
        g1: p.p1.map(|pi| -c1 * (1.0 / n - pi)),
        g2: p.p2.map(|pi| -c2 * (1.0 / n - pi)),
        kind: GradientKind::SoftmaxBarrier,
    }
}

pub fn grad_barrier(aug: &AugmentedMdp, policy: &TwoPartPolicy, mu: &[f64], kappa: f64) -> Result<GradientBundle> {
    require(policy, ParamKind::Softmax)?;
    if kappa < 0.0 {
        return Err(Error::InvalidConfig(format!("kappa must be >= 0, got {kappa}")));
    }
    let p = to_probabilities(policy)?;
    let mut g = softmax_gradient_at(aug, &p, mu)?;
    let b = barrier_gradient(aug.dims(), &p, kappa);
    g.g1 = g.g1.axpy(1.0, &b.g1);
    g.g2 = g.g2.axpy(1.0, &b.g2);
    g.kind = GradientKind::SoftmaxBarrier;
    Ok(g)
}

/// `L_κ = J(μ) + barrier - 2κ log(|A||H|)`. Zero at the uniform policy apart from `J(μ)`.
pub fn regularized_objective(aug: &AugmentedMdp, policy: &TwoPartPolicy, mu: &[f64], kappa: f64) -> Result<f64> {
    let p = to_probabilities(policy)?;
    let j = evaluate(aug, &p, mu)?.j_mu;
    let n = aug.n_aug_actions() as f64;
    Ok(j + log_barrier(policy, kappa)? - 2.0 * kappa * n.ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalSolution {
    /// Values of the optimal policy with `J(μ)` taken at the base `ρ`.
    pub values: ValueBundle,
    /// Deterministic greedy policy, direct parameterization.
    pub policy: TwoPartPolicy,
    pub j_star_rho: f64,
    pub iterations: usize,
}

impl OptimalSolution {
    pub fn probabilities(&self) -> PolicyProbabilities {
        let (p1, p2) = self.policy.clone().into_tables();
        PolicyProbabilities::new(p1, p2)
    }
}

/// Lowest index whose value is within `tol` of the row minimum.
fn argmin_lowest(row: &[f64], tol: f64) -> usize {
    let min = row.iter().copied().fold(f64::INFINITY, f64::min);
    row.iter().position(|&v| v <= min + tol).unwrap_or(0)
}

fn one_hot_rows(choices: &[usize], cols: usize) -> Table {
    let mut t = Table::zeros(choices.len(), cols);
    for (i, &k) in choices.iter().enumerate() {
        t.set(i, k, 1.0);
    }
    t
}

/// Value iteration on `Ĵ*` followed by policy-iteration polishing, so the
/// returned values are those of an exactly evaluated deterministic policy.
pub fn solve_optimal(aug: &AugmentedMdp) -> Result<OptimalSolution> {
    let d = aug.dims();
    let gamma = aug.gamma();
    let (nx, nk) = (d.n_aug_states(), d.n_aug_actions());
    let q_of =
        |j: &[f64], x: usize, k: usize| aug.cost_step().get(x, k) + gamma * expected_next(aug.step_successors(x, k), j);

    let mut j = vec![0.0; nx];
    let mut iterations = 0;
    loop {
        let next: Vec<f64> = (0..nx)
            .map(|x| (0..nk).map(|k| q_of(&j, x, k)).fold(f64::INFINITY, f64::min))
            .collect();
        let delta = next.iter().zip(&j).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        j = next;
        iterations += 1;
        if delta * gamma / (1.0 - gamma) <= VI_TOL {
            break;
        }
        if iterations >= VI_MAX_ITERS || !delta.is_finite() {
            return Err(Error::Numerical(format!("value iteration stalled at residual {delta}")));
        }
    }

    let scale = aug.max_abs_modified_cost().max(1.0) / (1.0 - gamma);
    let tie_tol = 1e-11 * scale;
    let mut greedy: Vec<usize> = (0..nx)
        .map(|x| argmin_lowest(&(0..nk).map(|k| q_of(&j, x, k)).collect::<Vec<_>>(), tie_tol))
        .collect();
    for _ in 0..100 {
        j = evaluate_stationary(aug, &one_hot_rows(&greedy, nk))?;
        let improved: Vec<usize> = (0..nx)
            .map(|x| {
                let q: Vec<f64> = (0..nk).map(|k| q_of(&j, x, k)).collect();
                let best = argmin_lowest(&q, tie_tol);
                if q[greedy[x]] <= q[best] + tie_tol {
                    greedy[x]
                } else {
                    best
                }
            })
            .collect();
        if improved == greedy {
            break;
        }
        greedy = improved;
        iterations += 1;
    }

    let first: Vec<usize> = (0..d.n_states)
        .map(|s| {
            let q: Vec<f64> = (0..nk)
                .map(|k| aug.cost_first().get(s, k) + gamma * expected_next(aug.first_successors(s, k), &j))
                .collect();
            argmin_lowest(&q, tie_tol)
        })
        .collect();
    let policy = TwoPartPolicy::new(ParamKind::Direct, one_hot_rows(&first, nk), one_hot_rows(&greedy, nk))?;
    let probs = to_probabilities(&policy)?;
    let values = bundle_from_j_hat(aug, &probs, aug.base().rho(), j);
    Ok(OptimalSolution {
        j_star_rho: values.j_mu,
        values,
        policy,
        iterations,
    })
}

/// Both sides of the performance-difference identity for start state `s1`.
///
/// `lhs = J^π(s₁) - J^{π'}(s₁)`; `rhs` is the closed-form expectation of
/// advantages of `π` along trajectories of `π'`.
pub fn performance_difference(
    aug: &AugmentedMdp,
    p: &PolicyProbabilities,
    p_prime: &PolicyProbabilities,
    s1: usize,
) -> Result<(f64, f64)> {
    let ns = aug.dims().n_states;
    if s1 >= ns {
        return Err(Error::Shape(format!("start state {s1} out of range")));
    }
    let mut delta = vec![0.0; ns];
    delta[s1] = 1.0;
    let v = evaluate(aug, p, &delta)?;
    let v_prime = evaluate(aug, p_prime, &delta)?;
    let lhs = v.j_first[s1] - v_prime.j_first[s1];

    let first: f64 = p_prime
        .p1
        .row(s1)
        .iter()
        .zip(v.adv_first.row(s1))
        .map(|(a, b)| a * b)
        .sum();
    let seed = first_step_distribution(aug, &p_prime.p1, &delta);
    let visits = visitation(aug, &p_prime.p2, &seed)?;
    let tail: f64 = visits
        .iter()
        .enumerate()
        .map(|(x, &w)| {
            w * p_prime
                .p2
                .row(x)
                .iter()
                .zip(v.adv_step.row(x))
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .sum();
    let gamma = aug.gamma();
    Ok((lhs, first + gamma / (1.0 - gamma) * tail))
}

/// `max_π̄ (π - π̄)ᵀ ∇_π J(μ)`, the right-hand side of gradient domination.
pub fn vertex_gap(aug: &AugmentedMdp, p: &PolicyProbabilities, mu: &[f64]) -> Result<f64> {
    let g = direct_gradient_at(aug, p, mu)?;
    Ok(vertex_gap_from(p, &g))
}

pub fn vertex_gap_from(p: &PolicyProbabilities, g: &GradientBundle) -> f64 {
    let block = |pi: &Table, g: &Table| -> f64 {
        pi.iter_rows()
            .zip(g.iter_rows())
            .map(|(pr, gr)| {
                let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                let min = gr.iter().copied().fold(f64::INFINITY, f64::min);
                (inner - min).max(0.0)
            })
            .sum()
    };
    block(&p.p1, &g.g1) + block(&p.p2, &g.g2)
}

/// `‖a / b‖∞` with `x/0 = +∞` for `x > 0` and `0/0 = 0`.
pub fn ratio_sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0_f64, |m, (&x, &y)| {
        let r = if x <= 0.0 {
            0.0
        } else if y <= 0.0 {
            f64::INFINITY
        } else {
            x / y
        };
        m.max(r)
    })
}

fn div_or_inf(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Theoretical constants for one instance and policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    /// Factor applied to the unit-cost formulas when costs or η leave `[0, 1]`.
    pub cost_scale: f64,
    /// `λ/α + (1-λ) + γλ`.
    pub c_bar_inf_unit: f64,
    pub c_bar_inf: f64,
    pub sigma: f64,
    pub sigma_kappa: f64,
    pub kappa: f64,
    pub ratio_rho_mu: f64,
    pub ratio_dstar_mu_p: f64,
    pub pi1_lb: f64,
    pub pi2_lb: f64,
    pub d1: f64,
    pub d2: f64,
    pub beta_direct: f64,
    pub beta_softmax: f64,
    pub c_bar_big: f64,
    pub b_bar: f64,
    pub epsilon: f64,
    pub t_bound_direct: f64,
    pub t_bound_softmax: f64,
}

impl Constants {
    /// Iteration count after which projected gradient descent is within `eps`.
    pub fn t_bound_direct_at(&self, eps: f64, dims: Dims, gamma: f64) -> f64 {
        let (s, a, h) = (dims.n_states as f64, dims.n_actions as f64, dims.n_eta as f64);
        self.d1.powi(2) * 128.0 * gamma * s * a * h * h / ((1.0 - gamma).powi(3) * eps * eps)
            * self.c_bar_big
            * self.c_bar_inf
    }

    /// Iteration count after which barrier softmax descent is within `eps`.
    pub fn t_bound_softmax_at(&self, eps: f64, dims: Dims, gamma: f64, lambda: f64, alpha: f64) -> f64 {
        let (s, a, h) = (dims.n_states as f64, dims.n_actions as f64, dims.n_eta as f64);
        let lead = 3.0 * self.cost_scale * (lambda / alpha + lambda) + 4.0 * self.c_bar_inf + 2.0;
        64.0 * lead * self.b_bar * s * s * a * a * h.powi(4) / ((1.0 - gamma).powi(3) * eps * eps) * self.d2.powi(2)
    }
}

/// Scale making the unit-cost bound valid: bounds `|c - η|`, `|c|` and `|η|`.
pub fn cost_scale(aug: &AugmentedMdp) -> f64 {
    let base = aug.base();
    let mut max_c: f64 = 0.0;
    for s in 0..base.n_states() {
        for a in 0..base.n_actions() {
            for sn in 0..base.n_states() {
                if base.prob(s, a, sn) > 0.0 {
                    max_c = max_c.max(base.outcome_cost(s, a, sn).abs());
                }
            }
        }
    }
    let grid = aug.risk().eta_grid();
    let min_eta = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let max_eta = grid.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
    1.0_f64.max(max_c - min_eta.min(0.0)).max(max_eta)
}

pub fn constants(
    aug: &AugmentedMdp,
    p: &PolicyProbabilities,
    mu: &[f64],
    rho: &[f64],
    kappa: f64,
    epsilon: f64,
) -> Result<Constants> {
    let optimal = solve_optimal(aug)?;
    constants_with(aug, p, mu, rho, kappa, epsilon, &optimal)
}

/// [`constants`] with a precomputed optimum.
#[allow(clippy::too_many_arguments)]
pub fn constants_with(
    aug: &AugmentedMdp,
    p: &PolicyProbabilities,
    mu: &[f64],
    rho: &[f64],
    kappa: f64,
    epsilon: f64,
    optimal: &OptimalSolution,
) -> Result<Constants> {
    check_probs(aug, p)?;
    let dims = aug.dims();
    check_distribution(mu, dims.n_states)?;
    check_distribution(rho, dims.n_states)?;
    if kappa < 0.0 || !(epsilon > 0.0) {
        return Err(Error::InvalidConfig("kappa must be >= 0 and epsilon > 0".into()));
    }
    let gamma = aug.gamma();
    let lambda = aug.risk().lambda();
    let alpha = aug.risk().alpha();
    let (s, a, h) = (dims.n_states as f64, dims.n_actions as f64, dims.n_eta as f64);
    let scale = cost_scale(aug);
    let c_bar_inf_unit = lambda / alpha + (1.0 - lambda) + gamma * lambda;
    let c_bar_inf = scale * c_bar_inf_unit;
    let cube = (1.0 - gamma).powi(3);
    let sigma = 2.0 * gamma * a * h * c_bar_inf / cube;
    let sigma_kappa =
        6.0 * scale * (lambda / alpha + lambda) + 8.0 * c_bar_inf / cube + 2.0 * kappa / s + 2.0 * kappa / (s * h);

    let star = optimal.probabilities();
    let star_seed = first_step_distribution(aug, &star.p1, rho);
    let d_star = visitation(aug, &star.p2, &star_seed)?;
    let occ = occupancies(aug, p, mu)?;
    let ratio_rho_mu = ratio_sup(rho, mu);
    let ratio_dstar_mu_p = ratio_sup(&d_star, &occ.mu_p);
    let second = div_or_inf(ratio_dstar_mu_p, (1.0 - gamma) * p.pi1_lb);
    let d1 = ratio_rho_mu.max(second);
    let d2 = ratio_rho_mu + second;

    let c_bar_big = scale * (lambda / alpha + lambda) + c_bar_inf / (1.0 - gamma);
    let b_bar = c_bar_big - p.pi1_lb.ln() - p.pi2_lb.ln();
    let mut out = Constants {
        cost_scale: scale,
        c_bar_inf_unit,
        c_bar_inf,
        sigma,
        sigma_kappa,
        kappa,
        ratio_rho_mu,
        ratio_dstar_mu_p,
        pi1_lb: p.pi1_lb,
        pi2_lb: p.pi2_lb,
        d1,
        d2,
        beta_direct: div_or_inf(cube, 2.0 * gamma * a * h * c_bar_inf),
        beta_softmax: 1.0 / sigma_kappa,
        c_bar_big,
        b_bar: if b_bar.is_nan() { f64::INFINITY } else { b_bar },
        epsilon,
        t_bound_direct: 0.0,
        t_bound_softmax: 0.0,
    };
    out.t_bound_direct = nan_to_inf(out.t_bound_direct_at(epsilon, dims, gamma));
    out.t_bound_softmax = nan_to_inf(out.t_bound_softmax_at(epsilon, dims, gamma, lambda, alpha));
    Ok(out)
}

fn nan_to_inf(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Exact expectation of the sampled REINFORCE update over `horizon` steps.
///
/// Episodes start from `mu`, take `(a₁, η₂) ~ π₁` and then follow `π₂`.
/// The returned blocks are gradients with respect to the logits. With
/// `discount_visits` each step `t` is weighted by `γ^{t-1}`, which gives the
/// gradient of the truncated objective; without it every step counts equally,
/// matching the update as written in the algorithm.
pub fn finite_horizon_gradient(
    aug: &AugmentedMdp,
    p: &PolicyProbabilities,
    mu: &[f64],
    horizon: usize,
    discount_visits: bool,
) -> Result<GradientBundle> {
    check_probs(aug, p)?;
    let d = aug.dims();
    check_distribution(mu, d.n_states)?;
    if horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be at least 1".into()));
    }
    let gamma = aug.gamma();
    let (nx, nk) = (d.n_aug_states(), d.n_aug_actions());

    // values[n][x]: expected discounted cost with n steps left.
    let mut values = vec![vec![0.0; nx]];
    let mut q_tables: Vec<Table> = vec![Table::zeros(nx, nk)];
    for n in 1..horizon {
        let prev = &values[n - 1];
        let mut q = Table::zeros(nx, nk);
        let mut v = vec![0.0; nx];
        for x in 0..nx {
            for k in 0..nk {
                let qk = aug.cost_step().get(x, k) + gamma * expected_next(aug.step_successors(x, k), prev);
                q.set(x, k, qk);
                v[x] += p.p2.get(x, k) * qk;
            }
        }
        values.push(v);
        q_tables.push(q);
    }

    let mut g1 = Table::zeros(d.n_states, nk);
    let last = &values[horizon - 1];
    for (s, &m) in mu.iter().enumerate() {
        let q: Vec<f64> = (0..nk)
            .map(|k| aug.cost_first().get(s, k) + gamma * expected_next(aug.first_successors(s, k), last))
            .collect();
        let v: f64 = p.p1.row(s).iter().zip(&q).map(|(a, b)| a * b).sum();
        for k in 0..nk {
            g1.set(s, k, m * p.p1.get(s, k) * (q[k] - v));
        }
    }

    let mut g2 = Table::zeros(nx, nk);
    let mut dist = first_step_distribution(aug, &p.p1, mu);
    let mut weight = 1.0;
    for t in 2..=horizon {
        weight *= if discount_visits { gamma } else { 1.0 };
        let remaining = horizon - t + 1;
        let q = &q_tables[remaining];
        let v = &values[remaining];
        for x in 0..nx {
            if dist[x] == 0.0 {
                continue;
            }
            for k in 0..nk {
                let add = weight * dist[x] * p.p2.get(x, k) * (q.get(x, k) - v[x]);
                g2.set(x, k, g2.get(x, k) + add);
            }
        }
        if t < horizon {
            let mut next = vec![0.0; nx];
            for x in 0..nx {
                if dist[x] == 0.0 {
                    continue;
                }
                for k in 0..nk {
                    let w = dist[x] * p.p2.get(x, k);
                    if w == 0.0 {
                        continue;
                    }
                    for (y, &pr) in aug.step_successors(x, k).iter().enumerate() {
                        next[y] += w * pr;
                    }
                }
            }
            dist = next;
        }
    }
    Ok(GradientBundle {
        g1,
        g2,
        kind: GradientKind::Softmax,
    })
}
