//! One-step coherent risk measure (mean/CVaR mixture), the ECRM cost
//! modification and the augmented risk-neutral MDP built from it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::policy::Dims;
use crate::table::Table;

const MASS_TOL: f64 = 1e-12;
/// Upper bound on materialized augmented transition entries.
const MAX_AUG_ENTRIES: usize = 1 << 26;

/// Risk parameters: mixing weight λ, CVaR level α and the finite η grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRiskSpec")]
pub struct RiskSpec {
    lambda: f64,
    alpha: f64,
    eta_grid: Vec<f64>,
}

#[derive(Deserialize)]
struct RawRiskSpec {
    lambda: f64,
    alpha: f64,
    eta_grid: Vec<f64>,
}

impl TryFrom<RawRiskSpec> for RiskSpec {
    type Error = Error;

    fn try_from(raw: RawRiskSpec) -> Result<Self> {
        RiskSpec::new(raw.lambda, raw.alpha, raw.eta_grid)
    }
}

impl RiskSpec {
    pub fn new(lambda: f64, alpha: f64, eta_grid: Vec<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidRisk(format!("lambda {lambda} outside [0,1]")));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidRisk(format!("alpha {alpha} outside (0,1]")));
        }
        if eta_grid.is_empty() {
            return Err(Error::InvalidRisk("eta grid is empty".into()));
        }
        if eta_grid.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidRisk("eta grid has non-finite entries".into()));
        }
        if eta_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidRisk("eta grid must be strictly increasing".into()));
        }
        Ok(Self {
            lambda,
            alpha,
            eta_grid,
        })
    }

    /// Grid `{0, 1/H, ..., 1}` with `levels = H + 1` points.
    pub fn with_uniform_grid(lambda: f64, alpha: f64, levels: usize) -> Result<Self> {
        let grid = match levels {
            0 => Vec::new(),
            1 => vec![0.0],
            n => (0..n).map(|h| h as f64 / (n - 1) as f64).collect(),
        };
        Self::new(lambda, alpha, grid)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eta_grid(&self) -> &[f64] {
        &self.eta_grid
    }

    pub fn n_eta(&self) -> usize {
        self.eta_grid.len()
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(lambda, self.alpha, self.eta_grid.clone())
    }
}

/// Finitely supported cost distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    atoms: Vec<(f64, f64)>,
}

impl DiscreteDistribution {
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidDistribution("no atoms".into()));
        }
        if atoms.iter().any(|&(v, p)| !v.is_finite() || !p.is_finite() || p < 0.0) {
            return Err(Error::InvalidDistribution(
                "values must be finite and probabilities nonnegative".into(),
            ));
        }
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidDistribution(format!("mass sums to {total}")));
        }
        Ok(Self { atoms })
    }

    pub fn point(value: f64) -> Self {
        Self {
            atoms: vec![(value, 1.0)],
        }
    }

    /// Equally likely outcomes.
    pub fn uniform(values: &[f64]) -> Result<Self> {
        let p = 1.0 / values.len() as f64;
        Self::new(values.iter().map(|&v| (v, p)).collect())
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|(v, p)| v * p).sum()
    }

    fn sorted_desc(&self) -> Vec<(f64, f64)> {
        let mut a = self.atoms.clone();
        a.sort_by(|x, y| y.0.total_cmp(&x.0));
        a
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidRisk(format!("alpha {alpha} outside (0,1]")))
    }
}

/// Upper-tail CVaR: mean of the worst α probability mass.
///
/// The atom straddling the VaR contributes only the fraction of its mass
/// needed to make the tail mass exactly α.
pub fn cvar(dist: &DiscreteDistribution, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let mut remaining = alpha;
    let mut acc = 0.0;
    for (v, p) in dist.sorted_desc() {
        if remaining <= 0.0 {
            break;
        }
        let take = p.min(remaining);
        acc += take * v;
        remaining -= take;
    }
    // rounding in the masses can leave a sliver; charge it to the smallest atom
    if remaining > 0.0 {
        let lowest = dist.atoms.iter().map(|a| a.0).fold(f64::INFINITY, f64::min);
        acc += remaining * lowest;
    }
    Ok(acc / alpha)
}

/// `inf { v : P(c <= v) >= 1 - α }`.
pub fn var_quantile(dist: &DiscreteDistribution, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let mut asc = dist.atoms.clone();
    asc.sort_by(|x, y| x.0.total_cmp(&y.0));
    let level = 1.0 - alpha;
    let mut cum = 0.0;
    for &(v, p) in &asc {
        cum += p;
        if cum >= level - MASS_TOL {
            return Ok(v);
        }
    }
    Ok(asc.last().map(|a| a.0).unwrap_or(f64::NAN))
}

/// `(1-λ) E[c] + λ CVaR_α[c]`.
pub fn one_step_risk(dist: &DiscreteDistribution, risk: &RiskSpec) -> Result<f64> {
    let tail = cvar(dist, risk.alpha)?;
    Ok((1.0 - risk.lambda) * dist.mean() + risk.lambda * tail)
}

/// First-step modified cost `c + γλη₂`.
pub fn modified_cost_first(c: f64, eta2: f64, risk: &RiskSpec, gamma: f64) -> f64 {
    c + gamma * risk.lambda * eta2
}

/// Modified cost for steps `t >= 2`:
/// `(λ/α)[c - η_t]₊ + (1-λ)c + γλη_{t+1}`.
pub fn modified_cost_step(c: f64, eta_in: f64, eta_out: f64, risk: &RiskSpec, gamma: f64) -> f64 {
    let l = risk.lambda;
    (l / risk.alpha) * (c - eta_in).max(0.0) + (1.0 - l) * c + gamma * l * eta_out
}

/// Risk-neutral MDP over `(s, η)` states and `(a, η')` actions whose
/// discounted cost equals the ECRM objective.
///
/// Indices: augmented state `s * |H| + h`, augmented action `a * |H| + h'`.
/// Terminal base states keep zero cost in every η slice so that episodes
/// ending at a goal carry an all-zero tail.
#[derive(Debug, Clone)]
pub struct AugmentedMdp {
    base: TabularMdp,
    risk: RiskSpec,
    dims: Dims,
    cost_first: Table,
    cost_step: Table,
    /// Rows `(s * |A||H| + k)`, columns augmented successor states.
    first_transition: Table,
    /// Rows `(x * |A||H| + k)`, columns augmented successor states.
    step_transition: Table,
}

pub fn build_augmented(mdp: &TabularMdp, risk: &RiskSpec) -> Result<AugmentedMdp> {
    let dims = Dims::new(mdp.n_states(), mdp.n_actions(), risk.n_eta());
    let ns = dims.n_states;
    let nh = dims.n_eta;
    let nx = ns
        .checked_mul(nh)
        .ok_or_else(|| Error::TooLarge("|S||H| overflows".into()))?;
    let nk = dims
        .n_actions
        .checked_mul(nh)
        .ok_or_else(|| Error::TooLarge("|A||H| overflows".into()))?;
    let entries = nx
        .checked_mul(nk)
        .and_then(|v| v.checked_mul(nx))
        .ok_or_else(|| Error::TooLarge("augmented transition tensor overflows".into()))?;
    if entries > MAX_AUG_ENTRIES {
        return Err(Error::TooLarge(format!(
            "augmented transition needs {entries} entries (limit {MAX_AUG_ENTRIES})"
        )));
    }
    let gamma = mdp.gamma();
    let etas = risk.eta_grid();

    let mut cost_first = Table::zeros(ns, nk);
    let mut cost_step = Table::zeros(nx, nk);
    let mut first_transition = Table::zeros(ns * nk, nx);
    let mut step_transition = Table::zeros(nx * nk, nx);

    for s in 0..ns {
        let terminal = mdp.is_terminal(s);
        for a in 0..dims.n_actions {
            let row = mdp.transition_row(s, a);
            for h_next in 0..nh {
                let k = dims.aug_action(a, h_next);
                if !terminal {
                    let c_first: f64 = row
                        .iter()
                        .enumerate()
                        .map(|(sn, &p)| p * mdp.outcome_cost(s, a, sn))
                        .sum();
                    cost_first.set(s, k, modified_cost_first(c_first, etas[h_next], risk, gamma));
                }
                let first = first_transition.row_mut(s * nk + k);
                for (sn, &p) in row.iter().enumerate() {
                    first[dims.aug_state(sn, h_next)] = p;
                }
                for h in 0..nh {
                    let x = dims.aug_state(s, h);
                    if !terminal {
                        let c: f64 = if mdp.has_outcome_costs() {
                            row.iter()
                                .enumerate()
                                .filter(|(_, &p)| p > 0.0)
                                .map(|(sn, &p)| {
                                    p * modified_cost_step(
                                        mdp.outcome_cost(s, a, sn),
                                        etas[h],
                                        etas[h_next],
                                        risk,
                                        gamma,
                                    )
                                })
                                .sum()
                        } else {
                            modified_cost_step(mdp.cost(s, a), etas[h], etas[h_next], risk, gamma)
                        };
                        cost_step.set(x, k, c);
                    }
                    let step = step_transition.row_mut(x * nk + k);
                    for (sn, &p) in row.iter().enumerate() {
                        step[dims.aug_state(sn, h_next)] = p;
                    }
                }
            }
        }
    }

    Ok(AugmentedMdp {
        base: mdp.clone(),
        risk: risk.clone(),
        dims,
        cost_first,
        cost_step,
        first_transition,
        step_transition,
    })
}

impl AugmentedMdp {
    pub fn base(&self) -> &TabularMdp {
        &self.base
    }

    pub fn risk(&self) -> &RiskSpec {
        &self.risk
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn gamma(&self) -> f64 {
        self.base.gamma()
    }

    pub fn n_aug_states(&self) -> usize {
        self.dims.n_aug_states()
    }

    pub fn n_aug_actions(&self) -> usize {
        self.dims.n_aug_actions()
    }

    /// `C̄₁(s, (a, η₂))`, shape `|S| x |A||H|`.
    pub fn cost_first(&self) -> &Table {
        &self.cost_first
    }

    /// `C̄((s, η), (a, η'))`, shape `|S||H| x |A||H|`.
    pub fn cost_step(&self) -> &Table {
        &self.cost_step
    }

    /// Distribution over augmented successors of first-step pair `(s, k)`.
    pub fn first_successors(&self, s: usize, k: usize) -> &[f64] {
        self.first_transition.row(s * self.dims.n_aug_actions() + k)
    }

    /// Distribution over augmented successors of `(x, k)`.
    pub fn step_successors(&self, x: usize, k: usize) -> &[f64] {
        self.step_transition.row(x * self.dims.n_aug_actions() + k)
    }

    /// Largest absolute modified cost over both tables.
    pub fn max_abs_modified_cost(&self) -> f64 {
        self.cost_first.max_abs().max(self.cost_step.max_abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{make_random_mdp, CliffWalk, RngStream};

    fn bern() -> DiscreteDistribution {
        DiscreteDistribution::new(vec![(0.0, 0.9), (1.0, 0.1)]).unwrap()
    }

    /// Rockafellar-Uryasev objective minimized over a uniform η grid.
    fn ru_grid_min(d: &DiscreteDistribution, alpha: f64, lo: f64, hi: f64, n: usize) -> f64 {
        (0..=n)
            .map(|i| lo + (hi - lo) * i as f64 / n as f64)
            .map(|eta| eta + d.atoms().iter().map(|(v, p)| p * (v - eta).max(0.0)).sum::<f64>() / alpha)
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn cvar_examples() {
        assert_eq!(cvar(&DiscreteDistribution::point(0.5), 0.3).unwrap(), 0.5);
        let d = bern();
        // oracle: grid minimization of the variational form
        assert!((ru_grid_min(&d, 0.05, 0.0, 1.0, 10_000) - 1.0).abs() < 1e-9);
        assert!((ru_grid_min(&d, 0.2, 0.0, 1.0, 10_000) - 0.5).abs() < 1e-9);
        assert!((cvar(&d, 0.05).unwrap() - 1.0).abs() < 1e-12);
        assert!((cvar(&d, 0.2).unwrap() - 0.5).abs() < 1e-12);
        assert!((cvar(&d, 1.0).unwrap() - d.mean()).abs() < 1e-15);
    }

    #[test]
    fn cvar_rejects_bad_alpha_and_empty() {
        assert!(cvar(&bern(), 0.0).is_err());
        assert!(cvar(&bern(), 1.5).is_err());
        assert!(DiscreteDistribution::new(vec![]).is_err());
        assert!(DiscreteDistribution::new(vec![(1.0, 0.5)]).is_err());
    }

    #[test]
    fn var_examples() {
        assert_eq!(var_quantile(&bern(), 0.05).unwrap(), 1.0);
        assert_eq!(var_quantile(&DiscreteDistribution::point(2.5), 0.1).unwrap(), 2.5);
        let half = DiscreteDistribution::new(vec![(0.0, 0.5), (1.0, 0.5)]).unwrap();
        assert_eq!(var_quantile(&half, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn one_step_risk_examples() {
        let d = bern();
        let neutral = RiskSpec::new(0.0, 0.05, vec![0.0]).unwrap();
        let averse = RiskSpec::new(1.0, 0.05, vec![0.0]).unwrap();
        let mixed = RiskSpec::new(0.5, 0.05, vec![0.0]).unwrap();
        assert!((one_step_risk(&d, &neutral).unwrap() - 0.1).abs() < 1e-15);
        assert!((one_step_risk(&d, &averse).unwrap() - 1.0).abs() < 1e-12);
        assert!((one_step_risk(&d, &mixed).unwrap() - 0.55).abs() < 1e-12);
    }

    #[test]
    fn modified_cost_examples() {
        let full = RiskSpec::new(1.0, 0.05, vec![1.0]).unwrap();
        let half = RiskSpec::new(0.5, 0.05, vec![1.0]).unwrap();
        let none = RiskSpec::new(0.0, 0.05, vec![1.0]).unwrap();
        assert!((modified_cost_first(1.0, 1.0, &full, 0.98) - 1.98).abs() < 1e-15);
        assert_eq!(modified_cost_first(0.7, 5.0, &none, 0.98), 0.7);
        assert!((modified_cost_first(0.0, 5.0, &half, 0.98) - 2.45).abs() < 1e-15);
        assert!((modified_cost_step(5.0, 1.0, 5.0, &half, 0.98) - 44.95).abs() < 1e-12);
        assert_eq!(modified_cost_step(3.0, 1.0, 5.0, &none, 0.98), 3.0);
        assert_eq!(modified_cost_step(0.5, 1.0, 0.0, &full, 0.98), 0.0);
    }

    #[test]
    fn risk_spec_validation() {
        assert!(RiskSpec::new(1.2, 0.1, vec![0.0]).is_err());
        assert!(RiskSpec::new(0.5, 0.0, vec![0.0]).is_err());
        assert!(RiskSpec::new(0.5, 0.1, vec![]).is_err());
        assert!(RiskSpec::new(0.5, 0.1, vec![1.0, 1.0]).is_err());
        let r: RiskSpec = serde_json::from_str(r#"{"lambda":0.5,"alpha":0.05,"eta_grid":[1,5]}"#).unwrap();
        assert_eq!(r.eta_grid(), &[1.0, 5.0]);
        assert!(serde_json::from_str::<RiskSpec>(r#"{"lambda":2,"alpha":0.05,"eta_grid":[1]}"#).is_err());
        let g = RiskSpec::with_uniform_grid(0.5, 0.1, 3).unwrap();
        assert_eq!(g.eta_grid(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn augmented_sizes_and_eta_slices() {
        let cw = CliffWalk::new(0.1, 4, 4, 0.98).unwrap();
        let risk = RiskSpec::new(0.5, 0.05, vec![1.0, 5.0]).unwrap();
        let aug = build_augmented(cw.mdp(), &risk).unwrap();
        assert_eq!(aug.n_aug_states(), 32);
        assert_eq!(aug.n_aug_actions(), 8);
        let d = aug.dims();
        for x in 0..32 {
            for k in 0..8 {
                let row = aug.step_successors(x, k);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let (_, h_next) = d.split_action(k);
                for (y, &p) in row.iter().enumerate() {
                    if d.split_state(y).1 != h_next {
                        assert_eq!(p, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn step_costs_follow_formula_on_deterministic_costs() {
        let mdp = make_random_mdp(3, 2, 0.9, &mut RngStream::new(5)).unwrap();
        let risk = RiskSpec::with_uniform_grid(0.7, 0.2, 3).unwrap();
        let aug = build_augmented(&mdp, &risk).unwrap();
        let d = aug.dims();
        for x in 0..d.n_aug_states() {
            let (s, h) = d.split_state(x);
            for k in 0..d.n_aug_actions() {
                let (a, hn) = d.split_action(k);
                let eta = risk.eta_grid();
                let want =
                    (0.7 / 0.2) * (mdp.cost(s, a) - eta[h]).max(0.0) + 0.3 * mdp.cost(s, a) + 0.9 * 0.7 * eta[hn];
                // oracle constants like 0.3 round differently from 1 - 0.7
                assert!((aug.cost_step().get(x, k) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn risk_neutral_costs_ignore_eta() {
        let mdp = make_random_mdp(2, 2, 0.9, &mut RngStream::new(2)).unwrap();
        let risk = RiskSpec::with_uniform_grid(0.0, 0.2, 3).unwrap();
        let aug = build_augmented(&mdp, &risk).unwrap();
        let d = aug.dims();
        for s in 0..2 {
            for a in 0..2 {
                let c = mdp.cost(s, a);
                for h in 0..3 {
                    for hn in 0..3 {
                        assert_eq!(aug.cost_step().get(d.aug_state(s, h), d.aug_action(a, hn)), c);
                    }
                }
            }
        }
    }
}
