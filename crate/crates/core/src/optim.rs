//! Exact-gradient learners: projected gradient descent on direct policies and
//! gradient descent on the log-barrier softmax objective.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::exact::{
    barrier_gradient, check_distribution, constants_with, cost_scale, direct_from_parts, evaluate, occupancies,
    softmax_from_parts, solve_optimal, vertex_gap_from, OptimalSolution,
};
use crate::policy::{log_barrier, project_policy, to_probabilities, ParamKind, TwoPartPolicy};
use crate::risk::AugmentedMdp;
use crate::table::Table;

const MAX_HALVINGS: usize = 60;

/// Step size: the value derived from the smoothness constant or a user-supplied constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    Theoretical,
    Fixed(f64),
}

impl Serialize for StepSize {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            StepSize::Theoretical => serializer.serialize_str("theoretical"),
            StepSize::Fixed(v) => serializer.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for StepSize {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Value(f64),
            Name(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Value(v) if v > 0.0 && v.is_finite() => Ok(StepSize::Fixed(v)),
            Raw::Value(v) => Err(serde::de::Error::custom(format!("step must be positive, got {v}"))),
            Raw::Name(n) if n == "theoretical" => Ok(StepSize::Theoretical),
            Raw::Name(n) => Err(serde::de::Error::custom(format!("unknown step `{n}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub step: StepSize,
    #[serde(default)]
    pub kappa: f64,
    pub budget: usize,
    /// Stop once the best gap `J(ρ) - J*(ρ)` is at most `tol`.
    #[serde(default)]
    pub tol: f64,
    /// Stop the barrier method once both gradient blocks fall below the
    /// stationarity thresholds that certify a `2κ D₂` gap.
    #[serde(default)]
    pub stop_at_stationarity: bool,
}

impl OptimConfig {
    pub fn new(step: StepSize, budget: usize) -> Self {
        Self {
            step,
            kappa: 0.0,
            budget,
            tol: 0.0,
            stop_at_stationarity: false,
        }
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    fn validate(&self) -> Result<()> {
        if let StepSize::Fixed(b) = self.step {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::InvalidConfig(format!("step must be positive, got {b}")));
            }
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidConfig(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidConfig("tol must be >= 0".into()));
        }
        Ok(())
    }
}

/// Telemetry of one iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub j_rho: f64,
    pub j_mu: f64,
    /// `L_κ`; only recorded by the barrier method.
    pub l_kappa: Option<f64>,
    pub vertex_gap: f64,
    pub grad_norm1: f64,
    pub grad_norm2: f64,
    /// `‖π - π⁺‖/β` for projected descent; the gradient norm for softmax.
    pub gmap_norm: f64,
    pub pi1_lb: f64,
    pub pi2_lb: f64,
    /// `J(ρ) - J*(ρ)`.
    pub gap: f64,
    pub best_gap: f64,
    pub step: f64,
}

pub const CSV_HEADER: &str = "iter,J_rho,J_mu,L_kappa,vertex_gap,grad_norm1,grad_norm2,gmap_norm,pi1_lb,pi2_lb";

impl IterRecord {
    /// One CSV row matching [`CSV_HEADER`]; a missing `L_κ` is an empty field.
    pub fn csv_row(&self) -> String {
        let l = self.l_kappa.map(fmt_f64).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            fmt_f64(self.j_rho),
            fmt_f64(self.j_mu),
            l,
            fmt_f64(self.vertex_gap),
            fmt_f64(self.grad_norm1),
            fmt_f64(self.grad_norm2),
            fmt_f64(self.gmap_norm),
            fmt_f64(self.pi1_lb),
            fmt_f64(self.pi2_lb)
        )
    }
}

/// Shortest round-trip representation, with `inf` for overflow.
pub fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimRun {
    pub kind: ParamKind,
    pub config: OptimConfig,
    /// Step actually used at the start (resolved from `Theoretical`).
    pub initial_step: f64,
    pub halvings: usize,
    pub j_star_rho: f64,
    pub records: Vec<IterRecord>,
    pub final_policy: TwoPartPolicy,
}

impl OptimRun {
    pub fn best_gap(&self) -> f64 {
        self.records.last().map_or(f64::INFINITY, |r| r.best_gap)
    }

    /// First iteration at which the best gap is at most `eps`.
    pub fn first_iter_within(&self, eps: f64) -> Option<usize> {
        self.records.iter().find(|r| r.best_gap <= eps).map(|r| r.iter)
    }

    pub fn min_pi_lb(&self) -> (f64, f64) {
        self.records.iter().fold((f64::INFINITY, f64::INFINITY), |(a, b), r| {
            (a.min(r.pi1_lb), b.min(r.pi2_lb))
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

struct Snapshot {
    record: IterRecord,
    grad: crate::exact::GradientBundle,
}

fn snapshot(
    aug: &AugmentedMdp,
    policy: &TwoPartPolicy,
    mu: &[f64],
    rho: &[f64],
    kappa: Option<f64>,
    j_star_rho: f64,
) -> Result<Snapshot> {
    let p = to_probabilities(policy)?;
    let v = evaluate(aug, &p, mu)?;
    let occ = occupancies(aug, &p, mu)?;
    let direct = direct_from_parts(aug, mu, &v, &occ);
    let vertex_gap = vertex_gap_from(&p, &direct);
    let j_rho: f64 = rho.iter().zip(&v.j_first).map(|(a, b)| a * b).sum();
    let (grad, l_kappa) = match kappa {
        None => (direct, None),
        Some(kappa) => {
            let mut g = softmax_from_parts(aug, &p, mu, &v, &occ);
            let b = barrier_gradient(aug.dims(), &p, kappa);
            g.g1 = g.g1.axpy(1.0, &b.g1);
            g.g2 = g.g2.axpy(1.0, &b.g2);
            let n = aug.n_aug_actions() as f64;
            let l = v.j_mu + log_barrier(policy, kappa)? - 2.0 * kappa * n.ln();
            (g, Some(l))
        }
    };
    if !grad.all_finite() {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    Ok(Snapshot {
        record: IterRecord {
            iter: 0,
            j_rho,
            j_mu: v.j_mu,
            l_kappa,
            vertex_gap,
            grad_norm1: grad.norm1(),
            grad_norm2: grad.norm2(),
            gmap_norm: grad.norm(),
            pi1_lb: p.pi1_lb,
            pi2_lb: p.pi2_lb,
            gap: j_rho - j_star_rho,
            best_gap: f64::INFINITY,
            step: 0.0,
        },
        grad,
    })
}

fn optimal_value(optimal: &OptimalSolution, rho: &[f64]) -> f64 {
    rho.iter().zip(&optimal.values.j_first).map(|(a, b)| a * b).sum()
}

/// Projected gradient descent `π ← Proj(π - β ∇J(μ))`.
///
/// A fixed user step is halved whenever `J(μ)` would increase; the
/// theoretical step is used as is.
pub fn pgd_direct(
    aug: &AugmentedMdp,
    init: &TwoPartPolicy,
    mu: &[f64],
    rho: &[f64],
    cfg: &OptimConfig,
) -> Result<OptimRun> {
    cfg.validate()?;
    if init.kind() != ParamKind::Direct {
        return Err(Error::Parameterization {
            expected: "direct",
            got: init.kind().name(),
        });
    }
    let n = aug.dims().n_states;
    check_distribution(mu, n)?;
    check_distribution(rho, n)?;
    let optimal = solve_optimal(aug)?;
    let j_star_rho = optimal_value(&optimal, rho);
    let theoretical = theoretical_direct_step(aug);
    let (mut beta, guard) = match cfg.step {
        StepSize::Theoretical => (theoretical, false),
        StepSize::Fixed(b) => (b, true),
    };
    let initial_step = beta;

    let mut policy = init.clone();
    let mut current = snapshot(aug, &policy, mu, rho, None, j_star_rho)?;
    let mut records = Vec::new();
    let mut best = f64::INFINITY;
    let mut halvings = 0;
    for t in 0..=cfg.budget {
        let (t1, t2) = (policy.table1(), policy.table2());
        let mut candidate = project_policy(&t1.axpy(-beta, &current.grad.g1), &t2.axpy(-beta, &current.grad.g2))?;
        let mut next = snapshot(aug, &candidate, mu, rho, None, j_star_rho)?;
        if guard {
            while next.record.j_mu > current.record.j_mu && halvings < MAX_HALVINGS {
                beta *= 0.5;
                halvings += 1;
                candidate = project_policy(&t1.axpy(-beta, &current.grad.g1), &t2.axpy(-beta, &current.grad.g2))?;
                next = snapshot(aug, &candidate, mu, rho, None, j_star_rho)?;
            }
        }
        let moved = (candidate.table1().axpy(-1.0, t1).norm2().powi(2)
            + candidate.table2().axpy(-1.0, t2).norm2().powi(2))
        .sqrt();
        best = best.min(current.record.gap);
        let mut rec = current.record.clone();
        rec.iter = t;
        rec.gmap_norm = moved / beta;
        rec.best_gap = best;
        rec.step = beta;
        records.push(rec);
        if best <= cfg.tol || t == cfg.budget {
            break;
        }
        policy = candidate;
        current = next;
    }
    Ok(OptimRun {
        kind: ParamKind::Direct,
        config: cfg.clone(),
        initial_step,
        halvings,
        j_star_rho,
        records,
        final_policy: policy,
    })
}

/// `(1-γ)³ / (2γ|A||H|‖c̄‖∞)`.
pub fn theoretical_direct_step(aug: &AugmentedMdp) -> f64 {
    let d = aug.dims();
    let g = aug.gamma();
    let r = aug.risk();
    let c = cost_scale(aug) * (r.lambda() / r.alpha() + (1.0 - r.lambda()) + g * r.lambda());
    (1.0 - g).powi(3) / (2.0 * g * d.n_aug_actions() as f64 * c)
}

/// `1/σ_κ`.
pub fn theoretical_softmax_step(aug: &AugmentedMdp, kappa: f64) -> f64 {
    let d = aug.dims();
    let g = aug.gamma();
    let r = aug.risk();
    let scale = cost_scale(aug);
    let c = scale * (r.lambda() / r.alpha() + (1.0 - r.lambda()) + g * r.lambda());
    let sigma = 6.0 * scale * (r.lambda() / r.alpha() + r.lambda())
        + 8.0 * c / (1.0 - g).powi(3)
        + 2.0 * kappa / d.n_states as f64
        + 2.0 * kappa / d.n_aug_states() as f64;
    1.0 / sigma
}

/// Gradient descent on the logits of `L_κ`.
///
/// A fixed user step is halved whenever `L_κ` would increase.
pub fn gd_softmax_barrier(
    aug: &AugmentedMdp,
    init: &TwoPartPolicy,
    mu: &[f64],
    rho: &[f64],
    cfg: &OptimConfig,
) -> Result<OptimRun> {
    cfg.validate()?;
    if init.kind() != ParamKind::Softmax {
        return Err(Error::Parameterization {
            expected: "softmax",
            got: init.kind().name(),
        });
    }
    let d = aug.dims();
    check_distribution(mu, d.n_states)?;
    check_distribution(rho, d.n_states)?;
    let optimal = solve_optimal(aug)?;
    let j_star_rho = optimal_value(&optimal, rho);
    let kappa = cfg.kappa;
    let (mut beta, guard) = match cfg.step {
        StepSize::Theoretical => (theoretical_softmax_step(aug, kappa), false),
        StepSize::Fixed(b) => (b, true),
    };
    let initial_step = beta;
    let n = d.n_aug_actions() as f64;
    let thresh1 = kappa / (2.0 * d.n_states as f64 * n);
    let thresh2 = kappa / (2.0 * d.n_aug_states() as f64 * n);

    let step = |policy: &TwoPartPolicy, g: &crate::exact::GradientBundle, beta: f64| -> Result<TwoPartPolicy> {
        let t1: Table = policy.table1().axpy(-beta, &g.g1);
        let t2: Table = policy.table2().axpy(-beta, &g.g2);
        if !t1.all_finite() || !t2.all_finite() {
            return Err(Error::Diverged("non-finite logits".into()));
        }
        TwoPartPolicy::new(ParamKind::Softmax, t1, t2)
    };

    let mut policy = init.clone();
    let mut current = snapshot(aug, &policy, mu, rho, Some(kappa), j_star_rho)?;
    let mut records = Vec::new();
    let mut best = f64::INFINITY;
    let mut halvings = 0;
    for t in 0..=cfg.budget {
        best = best.min(current.record.gap);
        let mut rec = current.record.clone();
        rec.iter = t;
        rec.best_gap = best;
        rec.step = beta;
        records.push(rec);
        let stationary = kappa > 0.0
            && cfg.stop_at_stationarity
            && current.record.grad_norm1 <= thresh1
            && current.record.grad_norm2 <= thresh2;
        if best <= cfg.tol || stationary || t == cfg.budget {
            break;
        }
        let mut candidate = step(&policy, &current.grad, beta)?;
        let mut next = snapshot(aug, &candidate, mu, rho, Some(kappa), j_star_rho)?;
        if guard {
            let l0 = current.record.l_kappa.unwrap_or(f64::INFINITY);
            while next.record.l_kappa.unwrap_or(f64::INFINITY) > l0 && halvings < MAX_HALVINGS {
                beta *= 0.5;
                halvings += 1;
                candidate = step(&policy, &current.grad, beta)?;
                next = snapshot(aug, &candidate, mu, rho, Some(kappa), j_star_rho)?;
            }
        }
        policy = candidate;
        current = next;
    }
    Ok(OptimRun {
        kind: ParamKind::Softmax,
        config: cfg.clone(),
        initial_step,
        halvings,
        j_star_rho,
        records,
        final_policy: policy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub epsilon: f64,
    /// Iterations the theorem requires for an `epsilon` best gap.
    pub t_bound: f64,
    /// Iterations actually run.
    pub t_run: usize,
    /// First iteration with best gap at most `epsilon`, if any.
    pub first_hit: Option<usize>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub kind: ParamKind,
    pub d1: f64,
    pub d2: f64,
    pub entries: Vec<BoundEntry>,
    pub passed: bool,
}

/// Checks the iteration-complexity bound against a completed run.
///
/// The run's smallest `π₁`, `π₂` entries enter `D₁`, `D₂` and `B̄`. For each
/// `ε`, the check fails only if the run lasted at least as long as the
/// bound demands and still missed `ε`.
pub fn iteration_bound_check(
    aug: &AugmentedMdp,
    run: &OptimRun,
    mu: &[f64],
    rho: &[f64],
    epsilons: &[f64],
) -> Result<BoundReport> {
    let optimal = solve_optimal(aug)?;
    let mut p = to_probabilities(&run.final_policy)?;
    let (lb1, lb2) = run.min_pi_lb();
    p.pi1_lb = lb1;
    p.pi2_lb = lb2;
    let t_run = run.records.last().map_or(0, |r| r.iter);
    let mut entries = Vec::new();
    let mut d1 = f64::NAN;
    let mut d2 = f64::NAN;
    for &eps in epsilons {
        let c = constants_with(aug, &p, mu, rho, run.config.kappa, eps, &optimal)?;
        d1 = c.d1;
        d2 = c.d2;
        let t_bound = match run.kind {
            ParamKind::Direct => c.t_bound_direct,
            ParamKind::Softmax => c.t_bound_softmax,
        };
        let first_hit = run.first_iter_within(eps);
        let passed = first_hit.is_some() || (t_run as f64) < t_bound;
        entries.push(BoundEntry {
            epsilon: eps,
            t_bound,
            t_run,
            first_hit,
            passed,
        });
    }
    Ok(BoundReport {
        kind: run.kind,
        d1,
        d2,
        passed: entries.iter().all(|e| e.passed),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{make_random_mdp, RngStream};
    use crate::risk::{build_augmented, RiskSpec};

    fn instance(seed: u64) -> AugmentedMdp {
        let mdp = make_random_mdp(2, 2, 0.5, &mut RngStream::new(seed)).unwrap();
        build_augmented(&mdp, &RiskSpec::with_uniform_grid(0.5, 0.5, 2).unwrap()).unwrap()
    }

    #[test]
    fn step_size_serde() {
        assert_eq!(
            serde_json::from_str::<StepSize>("\"theoretical\"").unwrap(),
            StepSize::Theoretical
        );
        assert_eq!(serde_json::from_str::<StepSize>("0.5").unwrap(), StepSize::Fixed(0.5));
        assert!(serde_json::from_str::<StepSize>("-1.0").is_err());
        assert!(serde_json::from_str::<StepSize>("\"fast\"").is_err());
        assert_eq!(
            serde_json::to_string(&StepSize::Theoretical).unwrap(),
            "\"theoretical\""
        );
    }

    #[test]
    fn pgd_from_optimum_stays_put() {
        let aug = instance(1);
        let opt = solve_optimal(&aug).unwrap();
        let rho = aug.base().rho().to_vec();
        let run = pgd_direct(
            &aug,
            &opt.policy,
            &rho,
            &rho,
            &OptimConfig::new(StepSize::Theoretical, 5),
        )
        .unwrap();
        assert!(run.records[0].gmap_norm <= 1e-8);
        assert!(run.final_policy.table1().axpy(-1.0, opt.policy.table1()).max_abs() < 1e-10);
        assert!(run.records[0].gap.abs() < 1e-10);
    }

    #[test]
    fn pgd_iterates_feasible_and_monotone() {
        let aug = instance(2);
        let rho = aug.base().rho().to_vec();
        let init = TwoPartPolicy::uniform_direct(2, 2, 2);
        let run = pgd_direct(&aug, &init, &rho, &rho, &OptimConfig::new(StepSize::Theoretical, 200)).unwrap();
        assert_eq!(run.records.len(), 201);
        for w in run.records.windows(2) {
            assert!(w[1].j_mu <= w[0].j_mu + 1e-12);
        }
        for row in run
            .final_policy
            .table1()
            .iter_rows()
            .chain(run.final_policy.table2().iter_rows())
        {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn zero_mass_row_never_moves() {
        let aug = instance(3);
        let mu = [0.0, 1.0];
        let init = TwoPartPolicy::uniform_direct(2, 2, 2);
        let run = pgd_direct(&aug, &init, &mu, &mu, &OptimConfig::new(StepSize::Fixed(0.5), 50)).unwrap();
        assert_eq!(run.final_policy.table1().row(0), init.table1().row(0));
    }

    #[test]
    fn pgd_rejects_softmax_init() {
        let aug = instance(1);
        let rho = aug.base().rho().to_vec();
        let soft = TwoPartPolicy::uniform_softmax(2, 2, 2);
        assert!(pgd_direct(&aug, &soft, &rho, &rho, &OptimConfig::new(StepSize::Theoretical, 1)).is_err());
        let direct = TwoPartPolicy::uniform_direct(2, 2, 2);
        assert!(gd_softmax_barrier(&aug, &direct, &rho, &rho, &OptimConfig::new(StepSize::Theoretical, 1)).is_err());
    }

    #[test]
    fn barrier_descent_is_monotone_with_positive_floor() {
        let aug = instance(4);
        let rho = aug.base().rho().to_vec();
        let init = TwoPartPolicy::uniform_softmax(2, 2, 2);
        let cfg = OptimConfig::new(StepSize::Theoretical, 300).with_kappa(0.01);
        let run = gd_softmax_barrier(&aug, &init, &rho, &rho, &cfg).unwrap();
        for w in run.records.windows(2) {
            assert!(w[1].l_kappa.unwrap() <= w[0].l_kappa.unwrap() + 1e-12);
        }
        assert!(run.records.iter().all(|r| r.pi1_lb > 0.0 && r.pi2_lb > 0.0));
    }

    #[test]
    fn near_greedy_logits_have_tiny_gradient() {
        let aug = instance(5);
        let rho = aug.base().rho().to_vec();
        let opt = solve_optimal(&aug).unwrap();
        let logits = |t: &Table| t.map(|p| 30.0 * p);
        let init = TwoPartPolicy::new(
            ParamKind::Softmax,
            logits(opt.policy.table1()),
            logits(opt.policy.table2()),
        )
        .unwrap();
        let run = gd_softmax_barrier(&aug, &init, &rho, &rho, &OptimConfig::new(StepSize::Theoretical, 1)).unwrap();
        let g = run.records[0].gmap_norm;
        assert!(g <= 1e-6, "{g}");
    }

    #[test]
    fn bound_check_passes_when_eps_exceeds_initial_gap() {
        let aug = instance(6);
        let rho = aug.base().rho().to_vec();
        let init = TwoPartPolicy::uniform_direct(2, 2, 2);
        let run = pgd_direct(&aug, &init, &rho, &rho, &OptimConfig::new(StepSize::Fixed(1.0), 20)).unwrap();
        let big = run.records[0].gap + 1.0;
        let report = iteration_bound_check(&aug, &run, &rho, &rho, &[big, 1e-6]).unwrap();
        assert!(report.passed);
        assert_eq!(report.entries[0].first_hit, Some(0));
        assert!(report.entries[1].t_bound > 20.0);
    }

    #[test]
    fn csv_rows_match_header() {
        let aug = instance(7);
        let rho = aug.base().rho().to_vec();
        let run = gd_softmax_barrier(
            &aug,
            &TwoPartPolicy::uniform_softmax(2, 2, 2),
            &rho,
            &rho,
            &OptimConfig::new(StepSize::Fixed(0.1), 2).with_kappa(0.1),
        )
        .unwrap();
        let csv = run.to_csv();
        let cols = CSV_HEADER.split(',').count();
        for line in csv.lines() {
            assert_eq!(line.split(',').count(), cols);
        }
        assert_eq!(csv.lines().count(), 4);
    }
}
