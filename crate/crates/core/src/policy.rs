//! Two-part policies `(π₁, π₂)` under direct and softmax parameterizations.
//!
//! `table1` has one row per base state (the first-step policy over
//! `(a, η₂)`), `table2` one row per augmented state `(s, η)` (the stationary
//! policy over `(a, η')`). Columns are augmented actions `a * |H| + h'`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::Table;

const ROW_SUM_TOL: f64 = 1e-10;

/// Sizes of the base and augmented spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_eta: usize,
}

impl Dims {
    pub fn new(n_states: usize, n_actions: usize, n_eta: usize) -> Self {
        Self {
            n_states,
            n_actions,
            n_eta,
        }
    }

    pub fn n_aug_states(&self) -> usize {
        self.n_states * self.n_eta
    }

    pub fn n_aug_actions(&self) -> usize {
        self.n_actions * self.n_eta
    }

    pub fn aug_state(&self, s: usize, h: usize) -> usize {
        s * self.n_eta + h
    }

    pub fn aug_action(&self, a: usize, h: usize) -> usize {
        a * self.n_eta + h
    }

    /// `(s, h)` of an augmented state index.
    pub fn split_state(&self, x: usize) -> (usize, usize) {
        (x / self.n_eta, x % self.n_eta)
    }

    /// `(a, h')` of an augmented action index.
    pub fn split_action(&self, k: usize) -> (usize, usize) {
        (k / self.n_eta, k % self.n_eta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Direct,
    Softmax,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Direct => "direct",
            ParamKind::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy")]
pub struct TwoPartPolicy {
    kind: ParamKind,
    table1: Table,
    table2: Table,
}

#[derive(Deserialize)]
struct RawPolicy {
    kind: ParamKind,
    table1: Table,
    table2: Table,
}

impl TryFrom<RawPolicy> for TwoPartPolicy {
    type Error = Error;

    fn try_from(raw: RawPolicy) -> Result<Self> {
        TwoPartPolicy::new(raw.kind, raw.table1, raw.table2)
    }
}

impl TwoPartPolicy {
    pub fn new(kind: ParamKind, table1: Table, table2: Table) -> Result<Self> {
        let p = Self { kind, table1, table2 };
        p.dims()?;
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if !self.table1.all_finite() || !self.table2.all_finite() {
            return Err(Error::InvalidPolicy("non-finite entries".into()));
        }
        if self.kind == ParamKind::Direct {
            for (name, t) in [("table1", &self.table1), ("table2", &self.table2)] {
                for (i, row) in t.iter_rows().enumerate() {
                    check_simplex_row(row).map_err(|m| Error::InvalidPolicy(format!("{name} row {i}: {m}")))?;
                }
            }
        }
        Ok(())
    }

    /// All-zero logits, i.e. uniform rows.
    pub fn uniform_softmax(n_states: usize, n_actions: usize, n_eta: usize) -> Self {
        let d = Dims::new(n_states, n_actions, n_eta);
        Self {
            kind: ParamKind::Softmax,
            table1: Table::zeros(d.n_states, d.n_aug_actions()),
            table2: Table::zeros(d.n_aug_states(), d.n_aug_actions()),
        }
    }

    pub fn uniform_direct(n_states: usize, n_actions: usize, n_eta: usize) -> Self {
        let d = Dims::new(n_states, n_actions, n_eta);
        let u = 1.0 / d.n_aug_actions() as f64;
        Self {
            kind: ParamKind::Direct,
            table1: Table::filled(d.n_states, d.n_aug_actions(), u),
            table2: Table::filled(d.n_aug_states(), d.n_aug_actions(), u),
        }
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn table1(&self) -> &Table {
        &self.table1
    }

    pub fn table2(&self) -> &Table {
        &self.table2
    }

    pub fn into_tables(self) -> (Table, Table) {
        (self.table1, self.table2)
    }

    pub fn dims(&self) -> Result<Dims> {
        let ns = self.table1.rows();
        let nk = self.table1.cols();
        if ns == 0 || nk == 0 || !self.table2.rows().is_multiple_of(ns) {
            return Err(Error::Shape(format!(
                "table2 rows ({}) must be a positive multiple of table1 rows ({ns})",
                self.table2.rows()
            )));
        }
        let nh = self.table2.rows() / ns;
        if self.table2.cols() != nk || nh == 0 || !nk.is_multiple_of(nh) {
            return Err(Error::Shape("table columns must equal |A||H|".into()));
        }
        Ok(Dims::new(ns, nk / nh, nh))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn check_simplex_row(row: &[f64]) -> std::result::Result<(), String> {
    if row.iter().any(|&p| p < 0.0) {
        return Err("negative probability".into());
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(format!("row sums to {sum}"));
    }
    Ok(())
}

/// Row-stochastic view of a policy plus its smallest entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyProbabilities {
    pub p1: Table,
    pub p2: Table,
    pub pi1_lb: f64,
    pub pi2_lb: f64,
}

impl PolicyProbabilities {
    pub fn new(p1: Table, p2: Table) -> Self {
        let pi1_lb = p1.min();
        let pi2_lb = p2.min();
        Self { p1, p2, pi1_lb, pi2_lb }
    }

    pub fn n_eta(&self) -> usize {
        self.p2.rows() / self.p1.rows().max(1)
    }

    pub fn dims(&self) -> Dims {
        let nh = self.n_eta().max(1);
        Dims::new(self.p1.rows(), self.p1.cols() / nh, nh)
    }

    /// Wraps the probabilities as a direct-parameterized policy.
    pub fn to_direct(&self) -> Result<TwoPartPolicy> {
        TwoPartPolicy::new(ParamKind::Direct, self.p1.clone(), self.p2.clone())
    }
}

fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_softmax_row(logits: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(move |l| l - lse)
}

fn softmax_table(t: &Table) -> Table {
    let mut out = Table::zeros(t.rows(), t.cols());
    for i in 0..t.rows() {
        softmax_row(t.row(i), out.row_mut(i));
    }
    out
}

pub fn to_probabilities(policy: &TwoPartPolicy) -> Result<PolicyProbabilities> {
    if !policy.table1.all_finite() || !policy.table2.all_finite() {
        return Err(Error::InvalidPolicy("non-finite logits".into()));
    }
    Ok(match policy.kind {
        ParamKind::Direct => PolicyProbabilities::new(policy.table1.clone(), policy.table2.clone()),
        ParamKind::Softmax => PolicyProbabilities::new(softmax_table(&policy.table1), softmax_table(&policy.table2)),
    })
}

/// Euclidean projection onto the probability simplex (sort and threshold).
pub fn project_simplex(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Shape("cannot project an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite entry in projection input".into()));
    }
    let tau = simplex_threshold(v);
    Ok(v.iter().map(|x| (x - tau).max(0.0)).collect())
}

/// The `τ` with `Σ max(vᵢ - τ, 0) = 1`.
pub fn simplex_threshold(v: &[f64]) -> f64 {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            tau = t;
        }
    }
    tau
}

/// Projects every row of both tables onto its simplex.
pub fn project_policy(table1: &Table, table2: &Table) -> Result<TwoPartPolicy> {
    let project = |t: &Table| -> Result<Table> {
        let mut out = Table::zeros(t.rows(), t.cols());
        for i in 0..t.rows() {
            out.row_mut(i).copy_from_slice(&project_simplex(t.row(i))?);
        }
        Ok(out)
    };
    let p1 = project(table1)?;
    let p2 = project(table2)?;
    // projection output can sit a few ulps off the simplex; accept it directly
    let policy = TwoPartPolicy {
        kind: ParamKind::Direct,
        table1: p1,
        table2: p2,
    };
    policy.dims()?;
    Ok(policy)
}

/// Log-barrier part of the regularized objective:
/// `-(κ/(|S||A||H|)) Σ log π₁ - (κ/(|S||H||A||H|)) Σ log π₂`.
///
/// Returns `+∞` when a direct policy has a zero entry.
pub fn log_barrier(policy: &TwoPartPolicy, kappa: f64) -> Result<f64> {
    if kappa < 0.0 {
        return Err(Error::InvalidConfig(format!("kappa must be >= 0, got {kappa}")));
    }
    if kappa == 0.0 {
        return Ok(0.0);
    }
    let d = policy.dims()?;
    let sum_logs = |t: &Table| -> f64 {
        match policy.kind {
            ParamKind::Softmax => t.iter_rows().flat_map(log_softmax_row).sum(),
            ParamKind::Direct => t
                .as_slice()
                .iter()
                .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
                .sum(),
        }
    };
    let n1 = (d.n_states * d.n_aug_actions()) as f64;
    let n2 = (d.n_aug_states() * d.n_aug_actions()) as f64;
    let value = -(kappa / n1) * sum_logs(&policy.table1) - (kappa / n2) * sum_logs(&policy.table2);
    Ok(if value.is_nan() { f64::INFINITY } else { value })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GreedyActions {
    /// Argmax of each `π₁` row.
    pub first: Vec<usize>,
    /// Argmax of each `π₂` row.
    pub step: Vec<usize>,
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_actions(p: &PolicyProbabilities) -> GreedyActions {
    GreedyActions {
        first: p.p1.iter_rows().map(argmax_lowest).collect(),
        step: p.p2.iter_rows().map(argmax_lowest).collect(),
    }
}
