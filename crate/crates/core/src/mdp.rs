//! Finite discounted MDPs, environment builders and trajectory sampling.
//!
//! States and actions are dense indices. The transition tensor is stored
//! flat with index `(s * n_actions + a) * n_states + s_next`.
//!
//! Immediate costs come in two flavours. The usual one is a deterministic
//! table `C(s, a)`. Environments whose cost depends on the realized outcome
//! (the stochastic Cliffwalk charges 5 only when the agent actually slips)
//! additionally carry an outcome table `C(s, a, s')`; `cost(s, a)` is then the
//! expectation of that table under `P(. | s, a)`.

use rand::RngCore;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyProbabilities;
use crate::risk::{modified_cost_first, modified_cost_step, RiskSpec};

const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    cost: Vec<f64>,
    outcome_cost: Option<Vec<f64>>,
    transition: Vec<f64>,
    gamma: f64,
    rho: Vec<f64>,
    terminal: Vec<usize>,
    is_terminal: Vec<bool>,
}

impl TabularMdp {
    /// Builds and validates an MDP with deterministic costs.
    ///
    /// `cost` is `n_states * n_actions` row-major, `transition` is
    /// `n_states * n_actions * n_states`.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        cost: Vec<f64>,
        transition: Vec<f64>,
        gamma: f64,
        rho: Vec<f64>,
        terminal: Vec<usize>,
    ) -> Result<Self> {
        Self::build(n_states, n_actions, Some(cost), None, transition, gamma, rho, terminal)
    }

    /// Builds an MDP whose cost depends on the sampled successor state.
    pub fn with_outcome_costs(
        n_states: usize,
        n_actions: usize,
        outcome_cost: Vec<f64>,
        transition: Vec<f64>,
        gamma: f64,
        rho: Vec<f64>,
        terminal: Vec<usize>,
    ) -> Result<Self> {
        Self::build(
            n_states,
            n_actions,
            None,
            Some(outcome_cost),
            transition,
            gamma,
            rho,
            terminal,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        n_states: usize,
        n_actions: usize,
        cost: Option<Vec<f64>>,
        outcome_cost: Option<Vec<f64>>,
        transition: Vec<f64>,
        gamma: f64,
        rho: Vec<f64>,
        terminal: Vec<usize>,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidMdp(m));
        if n_states == 0 || n_actions == 0 {
            return bad("need at least one state and one action".into());
        }
        let sa = n_states
            .checked_mul(n_actions)
            .ok_or_else(|| Error::TooLarge("state-action count overflows".into()))?;
        let sas = sa
            .checked_mul(n_states)
            .ok_or_else(|| Error::TooLarge("transition tensor overflows".into()))?;
        if !(gamma > 0.0 && gamma < 1.0) {
            return bad(format!("gamma must lie in (0,1), got {gamma}"));
        }
        if transition.len() != sas {
            return bad(format!("transition needs {sas} entries, got {}", transition.len()));
        }
        if rho.len() != n_states {
            return bad(format!("rho needs {n_states} entries, got {}", rho.len()));
        }
        check_distribution(&rho).map_err(|m| Error::InvalidMdp(format!("rho: {m}")))?;
        for (i, row) in transition.chunks(n_states).enumerate() {
            check_distribution(row).map_err(|m| {
                Error::InvalidMdp(format!(
                    "transition row (s={}, a={}): {m}",
                    i / n_actions,
                    i % n_actions
                ))
            })?;
        }

        let cost = match (cost, &outcome_cost) {
            (Some(c), None) => {
                if c.len() != sa {
                    return bad(format!("cost needs {sa} entries, got {}", c.len()));
                }
                c
            }
            (None, Some(oc)) => {
                if oc.len() != sas {
                    return bad(format!("outcome cost needs {sas} entries, got {}", oc.len()));
                }
                transition
                    .chunks(n_states)
                    .zip(oc.chunks(n_states))
                    .map(|(p, c)| p.iter().zip(c).map(|(p, c)| p * c).sum())
                    .collect()
            }
            _ => unreachable!("exactly one cost representation"),
        };
        let costs_finite = cost.iter().all(|c| c.is_finite())
            && outcome_cost.as_ref().is_none_or(|oc| oc.iter().all(|c| c.is_finite()));
        if !costs_finite {
            return bad("costs must be finite".into());
        }

        let mut is_terminal = vec![false; n_states];
        for &s in &terminal {
            if s >= n_states {
                return bad(format!("terminal state {s} out of range"));
            }
            is_terminal[s] = true;
            for a in 0..n_actions {
                let row = &transition[(s * n_actions + a) * n_states..][..n_states];
                if row[s] != 1.0 {
                    return bad(format!("terminal state {s} is not absorbing under action {a}"));
                }
                if cost[s * n_actions + a] != 0.0 {
                    return bad(format!("terminal state {s} has nonzero cost under action {a}"));
                }
            }
        }
        let mut terminal = terminal;
        terminal.sort_unstable();
        terminal.dedup();

        Ok(Self {
            n_states,
            n_actions,
            cost,
            outcome_cost,
            transition,
            gamma,
            rho,
            terminal,
            is_terminal,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn terminal_states(&self) -> &[usize] {
        &self.terminal
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.is_terminal[s]
    }

    /// Expected immediate cost of taking `a` in `s`.
    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.cost[s * self.n_actions + a]
    }

    /// Cost charged when `(s, a)` leads to `s_next`.
    pub fn outcome_cost(&self, s: usize, a: usize, s_next: usize) -> f64 {
        match &self.outcome_cost {
            Some(oc) => oc[(s * self.n_actions + a) * self.n_states + s_next],
            None => self.cost(s, a),
        }
    }

    pub fn has_outcome_costs(&self) -> bool {
        self.outcome_cost.is_some()
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn prob(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transition_row(s, a)[s_next]
    }

    /// Largest absolute cost any transition can charge.
    pub fn max_abs_cost(&self) -> f64 {
        match &self.outcome_cost {
            Some(oc) => oc.iter().fold(0.0_f64, |m, c| m.max(c.abs())),
            None => self.cost.iter().fold(0.0_f64, |m, c| m.max(c.abs())),
        }
    }

    /// Same dynamics with a different initial distribution.
    pub fn with_rho(&self, rho: Vec<f64>) -> Result<Self> {
        if rho.len() != self.n_states {
            return Err(Error::InvalidMdp(format!(
                "rho needs {} entries, got {}",
                self.n_states,
                rho.len()
            )));
        }
        check_distribution(&rho).map_err(|m| Error::InvalidMdp(format!("rho: {m}")))?;
        Ok(Self { rho, ..self.clone() })
    }

    /// Same dynamics with a different discount factor.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidMdp(format!("gamma must lie in (0,1), got {gamma}")));
        }
        Ok(Self { gamma, ..self.clone() })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&MdpDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpDocument = serde_json::from_str(text)?;
        doc.try_into()
    }
}

fn check_distribution(p: &[f64]) -> std::result::Result<(), String> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err("entries must be finite and nonnegative".into());
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(format!("sums to {sum}, not 1"));
    }
    Ok(())
}

/// On-disk JSON layout of a [`TabularMdp`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub rho: Vec<f64>,
    pub cost: Vec<Vec<f64>>,
    pub transition: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub terminal: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome_cost: Option<Vec<Vec<Vec<f64>>>>,
}

impl From<&TabularMdp> for MdpDocument {
    fn from(m: &TabularMdp) -> Self {
        let ns = m.n_states;
        let na = m.n_actions;
        let nested = |flat: &[f64]| -> Vec<Vec<Vec<f64>>> {
            flat.chunks(na * ns)
                .map(|per_s| per_s.chunks(ns).map(<[f64]>::to_vec).collect())
                .collect()
        };
        Self {
            n_states: ns,
            n_actions: na,
            gamma: m.gamma,
            rho: m.rho.clone(),
            cost: m.cost.chunks(na).map(<[f64]>::to_vec).collect(),
            transition: nested(&m.transition),
            terminal: m.terminal.clone(),
            outcome_cost: m.outcome_cost.as_deref().map(nested),
        }
    }
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        let flatten3 = |t: &Vec<Vec<Vec<f64>>>, what: &str| -> Result<Vec<f64>> {
            if t.len() != doc.n_states
                || t.iter()
                    .any(|per_s| per_s.len() != doc.n_actions || per_s.iter().any(|r| r.len() != doc.n_states))
            {
                return Err(Error::InvalidMdp(format!("{what} has the wrong shape")));
            }
            Ok(t.iter().flatten().flatten().copied().collect())
        };
        let transition = flatten3(&doc.transition, "transition")?;
        match &doc.outcome_cost {
            Some(oc) => TabularMdp::with_outcome_costs(
                doc.n_states,
                doc.n_actions,
                flatten3(oc, "outcome_cost")?,
                transition,
                doc.gamma,
                doc.rho,
                doc.terminal,
            ),
            None => {
                if doc.cost.len() != doc.n_states || doc.cost.iter().any(|r| r.len() != doc.n_actions) {
                    return Err(Error::InvalidMdp("cost has the wrong shape".into()));
                }
                TabularMdp::new(
                    doc.n_states,
                    doc.n_actions,
                    doc.cost.concat(),
                    transition,
                    doc.gamma,
                    doc.rho,
                    doc.terminal,
                )
            }
        }
    }
}

/// Seeded pseudo-random stream.
///
/// Backed by SplitMix64: the state is a 64-bit counter advanced by the odd
/// constant `0x9E3779B97F4A7C15` per draw and passed through the
/// `0xBF58476D1CE4E5B9` / `0x94D049BB133111EB` finalizer.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    draws: u64,
    inner: SplitMix64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            draws: 0,
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 64-bit words drawn so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Independent stream for sub-task `index`, derived from this seed.
    pub fn fork(&self, index: u64) -> RngStream {
        let mut mixer = SplitMix64::seed_from_u64(self.seed ^ index.wrapping_mul(0xA076_1D64_78BD_642F));
        RngStream::new(mixer.next_u64())
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "cannot draw from an empty range");
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Draws an index with probability proportional to `probs`.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let total: f64 = probs.iter().sum();
        let target = self.uniform() * total;
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last_positive = i;
                if target < acc {
                    return i;
                }
            }
        }
        last_positive
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

/// Random instance generator used by the verification suites.
///
/// Transition rows are normalized uniform draws shifted away from zero, so
/// every transition probability is strictly positive; costs are uniform in
/// `[0, 1]` and `rho` is strictly positive.
pub fn make_random_mdp(n_states: usize, n_actions: usize, gamma: f64, rng: &mut RngStream) -> Result<TabularMdp> {
    if n_states == 0 || n_actions == 0 {
        return Err(Error::InvalidMdp("need at least one state and one action".into()));
    }
    let positive_simplex = |rng: &mut RngStream, n: usize| -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| 0.05 + rng.uniform()).collect();
        let total: f64 = raw.iter().sum();
        let mut p: Vec<f64> = raw.iter().map(|x| x / total).collect();
        // push the rounding residue into the largest entry
        let residue = 1.0 - p.iter().sum::<f64>();
        let imax = (0..n).max_by(|&i, &j| p[i].total_cmp(&p[j])).unwrap_or(0);
        p[imax] += residue;
        p
    };
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        transition.extend(positive_simplex(rng, n_states));
    }
    let cost = (0..n_states * n_actions).map(|_| rng.uniform()).collect();
    let rho = positive_simplex(rng, n_states);
    TabularMdp::new(n_states, n_actions, cost, transition, gamma, rho, Vec::new())
}

/// Grid moves in the order used for action indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Up = 0,
    Right = 1,
    Down = 2,
    Left = 3,
}

impl Move {
    pub const ALL: [Move; 4] = [Move::Up, Move::Right, Move::Down, Move::Left];

    pub fn from_index(a: usize) -> Option<Move> {
        Self::ALL.get(a).copied()
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Move::Up => (-1, 0),
            Move::Right => (0, 1),
            Move::Down => (1, 0),
            Move::Left => (0, -1),
        }
    }
}

pub const CLIFF_COST: f64 = 5.0;
pub const STEP_COST: f64 = 1.0;

/// Stochastic Cliffwalk on a `height x width` grid.
///
/// Cells are addressed `[row, col]` with row 0 at the top and flattened as
/// `row * width + col`. The start is the bottom-left cell, the goal the
/// bottom-right one, the cliff the bottom row between them and the slippery
/// cells the row directly above the cliff. Entering a slippery cell drops
/// the agent into the cliff with probability `slip_prob`. Falling into the
/// cliff costs 5 in total and relocates the agent to the start. Cliff cells
/// are never occupied; their rows copy the start cell's dynamics.
#[derive(Debug, Clone)]
pub struct CliffWalk {
    mdp: TabularMdp,
    width: usize,
    height: usize,
    slip_prob: f64,
}

impl CliffWalk {
    pub fn new(slip_prob: f64, width: usize, height: usize, gamma: f64) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::InvalidMdp(format!(
                "cliffwalk grid must be at least 2x2, got {height}x{width}"
            )));
        }
        if !(0.0..=1.0).contains(&slip_prob) {
            return Err(Error::InvalidMdp(format!("slip probability {slip_prob} outside [0,1]")));
        }
        let geometry = Geometry { width, height };
        let n = width * height;
        let na = Move::ALL.len();
        let start = geometry.start();
        let goal = geometry.goal();
        let mut transition = vec![0.0; n * na * n];
        let mut outcome_cost = vec![0.0; n * na * n];
        for s in 0..n {
            for (a, mv) in Move::ALL.iter().enumerate() {
                let base = (s * na + a) * n;
                if s == goal {
                    transition[base + goal] = 1.0;
                    continue;
                }
                let from = if geometry.is_cliff(s) { start } else { s };
                let dest = geometry.step(from, *mv);
                let mut put = |to: usize, p: f64, c: f64| {
                    transition[base + to] += p;
                    outcome_cost[base + to] = c;
                };
                if geometry.is_cliff(dest) {
                    put(start, 1.0, CLIFF_COST);
                } else if geometry.is_slippery(dest) && dest != from {
                    if slip_prob < 1.0 {
                        put(dest, 1.0 - slip_prob, STEP_COST);
                    }
                    if slip_prob > 0.0 {
                        put(start, slip_prob, CLIFF_COST);
                    }
                } else {
                    put(dest, 1.0, STEP_COST);
                }
            }
        }
        let mut rho = vec![0.0; n];
        rho[start] = 1.0;
        let mdp = TabularMdp::with_outcome_costs(n, na, outcome_cost, transition, gamma, rho, vec![goal])?;
        Ok(Self {
            mdp,
            width,
            height,
            slip_prob,
        })
    }

    fn geometry(&self) -> Geometry {
        Geometry {
            width: self.width,
            height: self.height,
        }
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn into_mdp(self) -> TabularMdp {
        self.mdp
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn slip_prob(&self) -> f64 {
        self.slip_prob
    }

    pub fn state(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn cell(&self, s: usize) -> [usize; 2] {
        [s / self.width, s % self.width]
    }

    pub fn start(&self) -> usize {
        self.geometry().start()
    }

    pub fn goal(&self) -> usize {
        self.geometry().goal()
    }

    pub fn is_cliff(&self, s: usize) -> bool {
        self.geometry().is_cliff(s)
    }

    pub fn is_slippery(&self, s: usize) -> bool {
        self.geometry().is_slippery(s)
    }

    /// Cells an episode may start from: everything but the goal and the cliff.
    pub fn start_candidates(&self) -> Vec<usize> {
        (0..self.width * self.height)
            .filter(|&s| s != self.goal() && !self.is_cliff(s))
            .collect()
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    width: usize,
    height: usize,
}

impl Geometry {
    fn start(self) -> usize {
        (self.height - 1) * self.width
    }

    fn goal(self) -> usize {
        (self.height - 1) * self.width + self.width - 1
    }

    fn is_cliff(self, s: usize) -> bool {
        let (r, c) = (s / self.width, s % self.width);
        r == self.height - 1 && c > 0 && c < self.width - 1
    }

    fn is_slippery(self, s: usize) -> bool {
        let (r, c) = (s / self.width, s % self.width);
        r + 2 == self.height && c > 0 && c < self.width - 1
    }

    fn step(self, s: usize, mv: Move) -> usize {
        let (r, c) = ((s / self.width) as isize, (s % self.width) as isize);
        let (dr, dc) = mv.delta();
        let (nr, nc) = (r + dr, c + dc);
        if nr < 0 || nc < 0 || nr >= self.height as isize || nc >= self.width as isize {
            s
        } else {
            nr as usize * self.width + nc as usize
        }
    }
}

/// Cliffwalk MDP with discount 0.98 (the value used for the risk experiments).
pub fn make_cliffwalk(slip_prob: f64, width: usize, height: usize) -> Result<TabularMdp> {
    Ok(CliffWalk::new(slip_prob, width, height, 0.98)?.into_mdp())
}

/// One transition of a sampled episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    /// Grid index of the η carried into this step; `None` on the first step.
    pub eta_in: Option<usize>,
    pub action: usize,
    pub eta_next: usize,
    pub next_state: usize,
    pub raw_cost: f64,
    pub modified_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start_state: usize,
    pub steps: Vec<Step>,
    /// True when the episode ended in a terminal state rather than by truncation.
    pub terminated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_raw_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.raw_cost).sum()
    }

    /// Visited states including the final one.
    pub fn states(&self) -> Vec<usize> {
        let mut out = vec![self.start_state];
        out.extend(self.steps.iter().map(|s| s.next_state));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Start {
    State(usize),
    Rho,
}

/// Rolls out the two-part policy from `start`.
///
/// Step 1 draws `(a, η₂)` from `π₁(.|s₁)`; every later step draws
/// `(a, η')` from `π₂(.|s, η)` with `η` the value chosen one step earlier.
/// Each step records the raw cost and the modified ECRM cost.
pub fn sample_trajectory(
    mdp: &TabularMdp,
    policy: &PolicyProbabilities,
    risk: &RiskSpec,
    max_steps: usize,
    start: Start,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    let n_eta = risk.n_eta();
    let n_aug = mdp.n_actions() * n_eta;
    if policy.p1.rows() != mdp.n_states()
        || policy.p1.cols() != n_aug
        || policy.p2.rows() != mdp.n_states() * n_eta
        || policy.p2.cols() != n_aug
    {
        return Err(Error::Shape("policy does not match MDP and risk grid".into()));
    }
    if max_steps == 0 {
        return Err(Error::InvalidConfig("max_steps must be at least 1".into()));
    }
    if !policy.p1.all_finite() || !policy.p2.all_finite() {
        return Err(Error::InvalidPolicy("non-finite policy probabilities".into()));
    }
    let s1 = match start {
        Start::State(s) if s < mdp.n_states() => s,
        Start::State(s) => return Err(Error::Shape(format!("start state {s} out of range"))),
        Start::Rho => rng.categorical(mdp.rho()),
    };
    let gamma = mdp.gamma();
    let etas = risk.eta_grid();
    let mut steps = Vec::new();
    let mut state = s1;
    let mut eta_in: Option<usize> = None;
    while steps.len() < max_steps && !mdp.is_terminal(state) {
        let row = match eta_in {
            None => policy.p1.row(state),
            Some(h) => policy.p2.row(state * n_eta + h),
        };
        let k = rng.categorical(row);
        let (action, eta_next) = (k / n_eta, k % n_eta);
        let next_state = rng.categorical(mdp.transition_row(state, action));
        let raw_cost = mdp.outcome_cost(state, action, next_state);
        let modified_cost = match eta_in {
            None => modified_cost_first(raw_cost, etas[eta_next], risk, gamma),
            Some(h) => modified_cost_step(raw_cost, etas[h], etas[eta_next], risk, gamma),
        };
        steps.push(Step {
            state,
            eta_in,
            action,
            eta_next,
            next_state,
            raw_cost,
            modified_cost,
        });
        state = next_state;
        eta_in = Some(eta_next);
    }
    Ok(Trajectory {
        start_state: s1,
        steps,
        terminated: mdp.is_terminal(state),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{to_probabilities, TwoPartPolicy};

    fn walk() -> CliffWalk {
        CliffWalk::new(0.1, 4, 4, 0.98).unwrap()
    }

    #[test]
    fn slippery_entry_splits_outcomes() {
        let cw = walk();
        let m = cw.mdp();
        let from = cw.state(2, 0);
        let right = Move::Right as usize;
        assert!((m.prob(from, right, cw.state(2, 1)) - 0.9).abs() < 1e-15);
        assert!((m.prob(from, right, cw.start()) - 0.1).abs() < 1e-15);
        assert_eq!(m.outcome_cost(from, right, cw.state(2, 1)), 1.0);
        assert_eq!(m.outcome_cost(from, right, cw.start()), 5.0);
        assert!((m.cost(from, right) - (0.9 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn off_grid_move_is_noop() {
        let cw = walk();
        let down = Move::Down as usize;
        assert_eq!(cw.mdp().prob(cw.start(), down, cw.start()), 1.0);
        assert_eq!(cw.mdp().outcome_cost(cw.start(), down, cw.start()), 1.0);
    }

    #[test]
    fn cliff_entry_costs_five_and_restarts() {
        let cw = walk();
        let right = Move::Right as usize;
        assert_eq!(cw.mdp().prob(cw.start(), right, cw.start()), 1.0);
        assert_eq!(cw.mdp().cost(cw.start(), right), 5.0);
    }

    #[test]
    fn goal_is_absorbing_and_free() {
        let cw = walk();
        for a in 0..4 {
            assert_eq!(cw.mdp().prob(cw.goal(), a, cw.goal()), 1.0);
            assert_eq!(cw.mdp().cost(cw.goal(), a), 0.0);
        }
        assert_eq!(cw.mdp().terminal_states(), &[cw.goal()]);
    }

    #[test]
    fn deterministic_safe_path_costs_seven() {
        let cw = CliffWalk::new(0.0, 4, 4, 0.98).unwrap();
        let m = cw.mdp();
        let path = [
            (Move::Up, 2, 0),
            (Move::Up, 1, 0),
            (Move::Right, 1, 1),
            (Move::Right, 1, 2),
            (Move::Right, 1, 3),
            (Move::Down, 2, 3),
            (Move::Down, 3, 3),
        ];
        let mut s = cw.start();
        let mut total = 0.0;
        for (mv, r, c) in path {
            let next = cw.state(r, c);
            assert_eq!(m.prob(s, mv as usize, next), 1.0);
            total += m.outcome_cost(s, mv as usize, next);
            s = next;
        }
        assert_eq!(s, cw.goal());
        assert_eq!(total, 7.0);
    }

    #[test]
    fn tiny_grids_rejected() {
        assert!(CliffWalk::new(0.1, 1, 4, 0.98).is_err());
        assert!(CliffWalk::new(0.1, 4, 1, 0.98).is_err());
        assert!(CliffWalk::new(1.5, 4, 4, 0.98).is_err());
    }

    #[test]
    fn random_mdp_is_deterministic_and_stochastic() {
        let a = make_random_mdp(3, 2, 0.9, &mut RngStream::new(7)).unwrap();
        let b = make_random_mdp(3, 2, 0.9, &mut RngStream::new(7)).unwrap();
        assert_eq!(a, b);
        for s in 0..3 {
            for act in 0..2 {
                let sum: f64 = a.transition_row(s, act).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
                assert!(a.transition_row(s, act).iter().all(|&p| p > 0.0));
            }
        }
        assert!(a.rho().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn single_state_random_mdp_self_loops() {
        let m = make_random_mdp(1, 1, 0.5, &mut RngStream::new(3)).unwrap();
        assert_eq!(m.transition_row(0, 0), &[1.0]);
    }

    #[test]
    fn json_round_trip_keeps_outcome_costs() {
        let m = walk().into_mdp();
        let back = TabularMdp::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn invalid_documents_rejected() {
        let doc = r#"{"n_states":1,"n_actions":1,"gamma":1.0,"rho":[1.0],"cost":[[0.0]],"transition":[[[1.0]]],"terminal":[]}"#;
        assert!(TabularMdp::from_json(doc).is_err());
        let doc = r#"{"n_states":1,"n_actions":1,"gamma":0.5,"rho":[1.0],"cost":[[0.0]],"transition":[[[0.9]]],"terminal":[]}"#;
        assert!(TabularMdp::from_json(doc).is_err());
        let doc = r#"{"n_states":1,"n_actions":1,"gamma":0.5,"rho":[1.0],"cost":[[1.0]],"transition":[[[1.0]]],"terminal":[0]}"#;
        assert!(TabularMdp::from_json(doc).is_err());
    }

    #[test]
    fn trivial_chain_runs_to_step_limit() {
        let m = TabularMdp::new(1, 1, vec![0.3], vec![1.0], 0.9, vec![1.0], vec![]).unwrap();
        let risk = RiskSpec::new(0.5, 0.2, vec![0.0]).unwrap();
        let p = to_probabilities(&TwoPartPolicy::uniform_softmax(1, 1, 1)).unwrap();
        let t = sample_trajectory(&m, &p, &risk, 3, Start::Rho, &mut RngStream::new(1)).unwrap();
        assert_eq!(t.len(), 3);
        assert!(!t.terminated);
        assert!(t
            .steps
            .windows(2)
            .all(|w| w[0].state == w[1].state && w[0].action == w[1].action));
        assert_eq!(t.steps[1].eta_in, Some(t.steps[0].eta_next));
    }

    #[test]
    fn risk_neutral_modified_costs_match_raw() {
        let cw = walk();
        let risk = RiskSpec::new(0.0, 0.05, vec![1.0, 5.0]).unwrap();
        let p = to_probabilities(&TwoPartPolicy::uniform_softmax(16, 4, 2)).unwrap();
        let t = sample_trajectory(
            cw.mdp(),
            &p,
            &risk,
            200,
            Start::State(cw.start()),
            &mut RngStream::new(11),
        )
        .unwrap();
        for step in &t.steps[1..] {
            assert_eq!(step.modified_cost, step.raw_cost);
        }
    }

    #[test]
    fn sampling_rejects_non_finite_policies() {
        let m = TabularMdp::new(1, 1, vec![0.3], vec![1.0], 0.9, vec![1.0], vec![]).unwrap();
        let risk = RiskSpec::new(0.5, 0.2, vec![0.0]).unwrap();
        let mut p = to_probabilities(&TwoPartPolicy::uniform_softmax(1, 1, 1)).unwrap();
        p.p2.set(0, 0, f64::NAN);
        assert!(sample_trajectory(&m, &p, &risk, 3, Start::Rho, &mut RngStream::new(1)).is_err());
    }
}
