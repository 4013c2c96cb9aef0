//! Sampled risk-averse REINFORCE with softmax two-part policies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::barrier_gradient;
use crate::mdp::{sample_trajectory, RngStream, Start, TabularMdp, Trajectory};
use crate::policy::{greedy_actions, to_probabilities, Dims, ParamKind, PolicyProbabilities, TwoPartPolicy};
use crate::risk::RiskSpec;
use crate::table::Table;

/// Step size chosen by calibration on the stochastic Cliffwalk; the source
/// algorithm does not state one.
pub const CALIBRATED_STEP_SIZE: f64 = 5e-4;
/// Episode truncation used with [`CALIBRATED_STEP_SIZE`].
pub const CALIBRATED_MAX_STEPS: usize = 100;

fn default_eval_rollouts() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReinforceConfig {
    pub episodes: usize,
    pub max_steps: usize,
    pub step_size: f64,
    #[serde(default)]
    pub kappa: f64,
    pub seed: u64,
    /// Record the greedy test cost every this many episodes; 0 disables it.
    pub eval_every: usize,
    pub eval_start_state: usize,
    #[serde(default = "default_eval_rollouts")]
    pub eval_rollouts: usize,
    /// Training start states, drawn uniformly. Defaults to every non-terminal state.
    #[serde(default)]
    pub start_states: Option<Vec<usize>>,
    /// Weight the step-`t` score term by `γ^{t-1}`. Off by default, as in the
    /// algorithm; on, the expected update is the discounted policy gradient.
    #[serde(default)]
    pub discount_visits: bool,
    /// Tie `θ₁(s)` to `θ₂(s, η₁)` with the dummy `η₁` fixed to the first grid
    /// element, so first-step and later visits of a state share one logit row.
    #[serde(default)]
    pub share_first_step: bool,
}

impl ReinforceConfig {
    pub fn new(episodes: usize, max_steps: usize, step_size: f64, seed: u64) -> Self {
        Self {
            episodes,
            max_steps,
            step_size,
            kappa: 0.0,
            seed,
            eval_every: 0,
            eval_start_state: 0,
            eval_rollouts: 1,
            start_states: None,
            discount_visits: false,
            share_first_step: false,
        }
    }

    /// The calibrated Cliffwalk setting: shared first-step row, no barrier.
    pub fn calibrated(episodes: usize, seed: u64) -> Self {
        Self {
            share_first_step: true,
            ..Self::new(episodes, CALIBRATED_MAX_STEPS, CALIBRATED_STEP_SIZE, seed)
        }
    }

    fn validate(&self, mdp: &TabularMdp) -> Result<()> {
        if self.episodes == 0 || self.max_steps == 0 {
            return Err(Error::InvalidConfig("episodes and max_steps must be at least 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidConfig(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        if self.eval_start_state >= mdp.n_states() {
            return Err(Error::InvalidConfig("eval start state out of range".into()));
        }
        if self.eval_every > 0 && self.eval_rollouts == 0 {
            return Err(Error::InvalidConfig("eval_rollouts must be at least 1".into()));
        }
        if let Some(starts) = &self.start_states {
            if starts.is_empty() || starts.iter().any(|&s| s >= mdp.n_states()) {
                return Err(Error::InvalidConfig("start states empty or out of range".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Number of completed training episodes.
    pub episode: usize,
    pub test_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub policy: TwoPartPolicy,
    pub curve: Vec<CurvePoint>,
}

/// Discounted returns-to-go `G_t = Σ_{τ≥t} γ^{τ-t} c̄_τ`.
pub fn returns_to_go(costs: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; costs.len()];
    let mut acc = 0.0;
    for (t, &c) in costs.iter().enumerate().rev() {
        acc = c + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Score-function update of one episode, before scaling by the step size.
///
/// Row `s₁` of the first block holds `(e_k - π₁) G₁`; rows of the second
/// block accumulate `w_t (e_k - π₂) G_t` over steps `t ≥ 2`.
pub fn episode_update(
    traj: &Trajectory,
    probs: &PolicyProbabilities,
    dims: Dims,
    gamma: f64,
    discount_visits: bool,
) -> (Table, Table) {
    let nk = dims.n_aug_actions();
    let mut u1 = Table::zeros(dims.n_states, nk);
    let mut u2 = Table::zeros(dims.n_aug_states(), nk);
    if traj.steps.is_empty() {
        return (u1, u2);
    }
    let costs: Vec<f64> = traj.steps.iter().map(|s| s.modified_cost).collect();
    let g = returns_to_go(&costs, gamma);
    for (t, step) in traj.steps.iter().enumerate() {
        let weight = if discount_visits { gamma.powi(t as i32) } else { 1.0 };
        let k = dims.aug_action(step.action, step.eta_next);
        let (row, probs_row, w) = match step.eta_in {
            None => (u1.row_mut(step.state), probs.p1.row(step.state), 1.0),
            Some(h) => {
                let x = dims.aug_state(step.state, h);
                (u2.row_mut(x), probs.p2.row(x), weight)
            }
        };
        for (j, (r, &p)) in row.iter_mut().zip(probs_row).enumerate() {
            let e = if j == k { 1.0 } else { 0.0 };
            *r += w * (e - p) * g[t];
        }
    }
    (u1, u2)
}

/// Moves the first-block change onto the shared rows `(s, η₁)` of the second
/// block and copies those rows back into the first block.
fn tie_first_step(t1: &mut Table, t2: &mut Table, dims: Dims, t1_prev: Option<&Table>) {
    for s in 0..dims.n_states {
        let x = dims.aug_state(s, 0);
        for k in 0..dims.n_aug_actions() {
            let delta = t1_prev.map_or(0.0, |p| t1.get(s, k) - p.get(s, k));
            let v = t2.get(x, k) + delta;
            t2.set(x, k, v);
            t1.set(s, k, v);
        }
    }
}

/// Algorithm 1: one sampled trajectory and one logit update per episode.
///
/// Starts from all-zero logits unless `init` is given. The barrier gradient
/// is exact (it needs no sampling) and is added to every update when `κ > 0`.
pub fn train(
    mdp: &TabularMdp,
    risk: &RiskSpec,
    cfg: &ReinforceConfig,
    init: Option<&TwoPartPolicy>,
) -> Result<TrainOutcome> {
    cfg.validate(mdp)?;
    let dims = Dims::new(mdp.n_states(), mdp.n_actions(), risk.n_eta());
    let mut policy = match init {
        Some(p) if p.kind() != ParamKind::Softmax => {
            return Err(Error::Parameterization {
                expected: "softmax",
                got: p.kind().name(),
            })
        }
        Some(p) if p.dims()? != dims => return Err(Error::Shape("initial policy does not match MDP".into())),
        Some(p) => p.clone(),
        None => TwoPartPolicy::uniform_softmax(dims.n_states, dims.n_actions, dims.n_eta),
    };
    if cfg.share_first_step {
        let (mut t1, mut t2) = policy.into_tables();
        tie_first_step(&mut t1, &mut t2, dims, None);
        policy = TwoPartPolicy::new(ParamKind::Softmax, t1, t2)?;
    }
    let starts: Vec<usize> = match &cfg.start_states {
        Some(s) => s.clone(),
        None => (0..mdp.n_states()).filter(|&s| !mdp.is_terminal(s)).collect(),
    };
    if starts.is_empty() {
        return Err(Error::InvalidConfig("no non-terminal start state".into()));
    }
    let mut rng = RngStream::new(cfg.seed);
    let eval_rng = rng.fork(1);
    let gamma = mdp.gamma();
    let beta = cfg.step_size;
    let mut curve = Vec::new();

    for episode in 1..=cfg.episodes {
        let probs = to_probabilities(&policy)?;
        let s0 = starts[rng.index(starts.len())];
        let traj = sample_trajectory(mdp, &probs, risk, cfg.max_steps, Start::State(s0), &mut rng)?;
        let (u1, u2) = episode_update(&traj, &probs, dims, gamma, cfg.discount_visits);
        let (mut t1, mut t2) = policy.into_tables();
        let t1_prev = cfg.share_first_step.then(|| t1.clone());
        t1 = t1.axpy(-beta, &u1);
        t2 = t2.axpy(-beta, &u2);
        if cfg.kappa > 0.0 {
            let b = barrier_gradient(dims, &probs, cfg.kappa);
            t1 = t1.axpy(-beta, &b.g1);
            t2 = t2.axpy(-beta, &b.g2);
        }
        if cfg.share_first_step {
            tie_first_step(&mut t1, &mut t2, dims, t1_prev.as_ref());
        }
        if !t1.all_finite() || !t2.all_finite() {
            return Err(Error::Diverged(format!(
                "non-finite logits after episode {episode}; reduce the step size"
            )));
        }
        policy = TwoPartPolicy::new(ParamKind::Softmax, t1, t2)?;

        if cfg.eval_every > 0 && episode % cfg.eval_every == 0 {
            // a fresh stream per evaluation keeps the curve independent of eval_every
            let mut er = eval_rng.fork(episode as u64);
            let eval = evaluate_greedy(
                mdp,
                risk,
                &policy,
                cfg.eval_start_state,
                cfg.max_steps,
                &mut er,
                cfg.eval_rollouts,
            )?;
            curve.push(CurvePoint {
                episode,
                test_cost: eval.mean_cost,
            });
        }
    }
    Ok(TrainOutcome { policy, curve })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyEval {
    /// Mean undiscounted raw cost over the rollouts.
    pub mean_cost: f64,
    pub costs: Vec<f64>,
    /// Realized state path of the first rollout.
    pub path: Vec<usize>,
    pub reached_goal: bool,
}

/// The deterministic policy picking the most probable `(a, η)` in each row.
pub fn greedy_policy(policy: &TwoPartPolicy) -> Result<PolicyProbabilities> {
    let p = to_probabilities(policy)?;
    let g = greedy_actions(&p);
    let nk = p.p1.cols();
    let one_hot = |choices: &[usize]| {
        let mut t = Table::zeros(choices.len(), nk);
        for (i, &k) in choices.iter().enumerate() {
            t.set(i, k, 1.0);
        }
        t
    };
    Ok(PolicyProbabilities::new(one_hot(&g.first), one_hot(&g.step)))
}

/// Rolls out the greedy policy `n_rollouts` times from `start`.
pub fn evaluate_greedy(
    mdp: &TabularMdp,
    risk: &RiskSpec,
    policy: &TwoPartPolicy,
    start: usize,
    max_steps: usize,
    rng: &mut RngStream,
    n_rollouts: usize,
) -> Result<GreedyEval> {
    if n_rollouts == 0 {
        return Err(Error::InvalidConfig("need at least one rollout".into()));
    }
    let greedy = greedy_policy(policy)?;
    let mut costs = Vec::with_capacity(n_rollouts);
    let mut path = Vec::new();
    let mut reached_goal = false;
    for i in 0..n_rollouts {
        let traj = sample_trajectory(mdp, &greedy, risk, max_steps, Start::State(start), rng)?;
        costs.push(traj.total_raw_cost());
        if i == 0 {
            path = traj.states();
            reached_goal = traj.terminated;
        }
    }
    Ok(GreedyEval {
        mean_cost: costs.iter().sum::<f64>() / n_rollouts as f64,
        costs,
        path,
        reached_goal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{CliffWalk, Move};

    fn cliff_risk() -> RiskSpec {
        RiskSpec::new(1.0, 0.05, vec![1.0, 5.0]).unwrap()
    }

    /// Softmax policy that deterministically follows `moves[s]` with η index 0.
    fn scripted(cw: &CliffWalk, moves: &dyn Fn(usize) -> Move) -> TwoPartPolicy {
        let m = cw.mdp();
        let nh = 2;
        let mut t1 = Table::zeros(m.n_states(), 4 * nh);
        let mut t2 = Table::zeros(m.n_states() * nh, 4 * nh);
        for s in 0..m.n_states() {
            let k = moves(s) as usize * nh;
            t1.set(s, k, 50.0);
            for h in 0..nh {
                t2.set(s * nh + h, k, 50.0);
            }
        }
        TwoPartPolicy::new(ParamKind::Softmax, t1, t2).unwrap()
    }

    fn safe_moves(cw: &CliffWalk) -> impl Fn(usize) -> Move + '_ {
        move |s| {
            let [r, c] = cw.cell(s);
            match (r, c) {
                (3, 0) | (2, 0) => Move::Up,
                (1, 3) | (2, 3) => Move::Down,
                (1, _) => Move::Right,
                _ => Move::Up,
            }
        }
    }

    fn short_moves(cw: &CliffWalk) -> impl Fn(usize) -> Move + '_ {
        move |s| {
            let [r, c] = cw.cell(s);
            match (r, c) {
                (3, 0) => Move::Up,
                (2, 3) => Move::Down,
                (2, _) => Move::Right,
                _ => Move::Down,
            }
        }
    }

    #[test]
    fn returns_to_go_discount() {
        assert_eq!(returns_to_go(&[1.0, 2.0, 4.0], 0.5), vec![3.0, 4.0, 4.0]);
        assert!(returns_to_go(&[], 0.9).is_empty());
    }

    #[test]
    fn safe_path_costs_seven_every_time() {
        for slip in [0.0, 0.1] {
            let cw = CliffWalk::new(slip, 4, 4, 0.98).unwrap();
            let pol = scripted(&cw, &safe_moves(&cw));
            let mut rng = RngStream::new(3);
            let e = evaluate_greedy(cw.mdp(), &cliff_risk(), &pol, cw.start(), 100, &mut rng, 20).unwrap();
            assert!(e.costs.iter().all(|&c| c == 7.0));
            assert_eq!(e.path.len(), 8);
            assert!(e.reached_goal);
        }
    }

    #[test]
    fn goal_adjacent_start_costs_one() {
        let cw = CliffWalk::new(0.1, 4, 4, 0.98).unwrap();
        let pol = scripted(&cw, &safe_moves(&cw));
        let e = evaluate_greedy(
            cw.mdp(),
            &cliff_risk(),
            &pol,
            cw.state(2, 3),
            100,
            &mut RngStream::new(1),
            1,
        )
        .unwrap();
        assert_eq!(e.mean_cost, 1.0);
    }

    #[test]
    fn short_path_slips_with_expected_frequency() {
        let cw = CliffWalk::new(0.1, 4, 4, 0.98).unwrap();
        let pol = scripted(&cw, &short_moves(&cw));
        let n = 20_000;
        let e = evaluate_greedy(
            cw.mdp(),
            &cliff_risk(),
            &pol,
            cw.start(),
            1000,
            &mut RngStream::new(9),
            n,
        )
        .unwrap();
        let clean = e.costs.iter().filter(|&&c| c == 5.0).count() as f64 / n as f64;
        let se = (0.81 * 0.19 / n as f64).sqrt();
        assert!((clean - 0.81).abs() < 3.0 * se, "{clean}");
        assert!(e.costs.iter().all(|&c| c == 5.0 || c >= 10.0));
    }

    #[test]
    fn single_step_episode_leaves_theta2_alone() {
        let m = TabularMdp::new(
            2,
            1,
            vec![1.0, 0.0],
            vec![0.0, 1.0, 0.0, 1.0],
            0.9,
            vec![1.0, 0.0],
            vec![1],
        )
        .unwrap();
        let risk = RiskSpec::new(0.5, 0.5, vec![0.0, 1.0]).unwrap();
        let mut cfg = ReinforceConfig::new(5, 10, 0.1, 4);
        cfg.start_states = Some(vec![0]);
        let out = train(&m, &risk, &cfg, None).unwrap();
        let (t1, t2) = out.policy.into_tables();
        assert!(t2.as_slice().iter().all(|&v| v == 0.0));
        assert!(t1.row(0).iter().any(|&v| v != 0.0));
    }

    /// Plain REINFORCE on the base MDP, written independently. The policy
    /// keeps separate logits for the first step and for later steps.
    fn classic_reinforce(m: &TabularMdp, cfg: &ReinforceConfig) -> (Table, Table) {
        let (ns, na) = (m.n_states(), m.n_actions());
        let mut first = Table::zeros(ns, na);
        let mut rest = Table::zeros(ns, na);
        let mut rng = RngStream::new(cfg.seed);
        let starts: Vec<usize> = (0..ns).filter(|&s| !m.is_terminal(s)).collect();
        let softmax = |row: &[f64]| {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect::<Vec<_>>()
        };
        for _ in 0..cfg.episodes {
            let (f0, r0) = (first.clone(), rest.clone());
            let mut s = starts[rng.index(starts.len())];
            let mut visited = Vec::new();
            while visited.len() < cfg.max_steps && !m.is_terminal(s) {
                let pi = softmax(if visited.is_empty() { f0.row(s) } else { r0.row(s) });
                let a = rng.categorical(&pi);
                let sn = rng.categorical(m.transition_row(s, a));
                visited.push((s, a, m.outcome_cost(s, a, sn), pi));
                s = sn;
            }
            let costs: Vec<f64> = visited.iter().map(|v| v.2).collect();
            let mut g = vec![0.0; costs.len()];
            let mut acc = 0.0;
            for t in (0..costs.len()).rev() {
                acc = costs[t] + m.gamma() * acc;
                g[t] = acc;
            }
            let mut du_first = Table::zeros(ns, na);
            let mut du_rest = Table::zeros(ns, na);
            for (t, (s, a, _, pi)) in visited.into_iter().enumerate() {
                let table = if t == 0 { &mut du_first } else { &mut du_rest };
                for (j, p) in pi.iter().enumerate() {
                    let e = if j == a { 1.0 } else { 0.0 };
                    table.set(s, j, table.get(s, j) + (e - p) * g[t]);
                }
            }
            first = first.axpy(-cfg.step_size, &du_first);
            rest = rest.axpy(-cfg.step_size, &du_rest);
        }
        (first, rest)
    }

    #[test]
    fn risk_neutral_single_eta_matches_classic_reinforce() {
        let cw = CliffWalk::new(0.1, 4, 4, 0.9).unwrap();
        let risk = RiskSpec::new(0.0, 0.05, vec![0.0]).unwrap();
        let cfg = ReinforceConfig::new(300, 30, 0.01, 77);
        let out = train(cw.mdp(), &risk, &cfg, None).unwrap();
        let (first, rest) = classic_reinforce(cw.mdp(), &cfg);
        let (t1, t2) = out.policy.into_tables();
        assert_eq!(t1, first);
        assert_eq!(t2, rest);
        assert!(t2.max_abs() > 0.0);
    }

    #[test]
    fn training_is_deterministic() {
        let cw = CliffWalk::new(0.1, 4, 4, 0.98).unwrap();
        let mut cfg = ReinforceConfig::new(200, 100, 1e-3, 5);
        cfg.eval_every = 50;
        cfg.eval_start_state = cw.start();
        cfg.start_states = Some(cw.start_candidates());
        let a = train(cw.mdp(), &cliff_risk(), &cfg, None).unwrap();
        let b = train(cw.mdp(), &cliff_risk(), &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.curve.len(), 4);
    }

    #[test]
    fn divergence_is_reported() {
        let cw = CliffWalk::new(0.1, 4, 4, 0.98).unwrap();
        let cfg = ReinforceConfig::new(2000, 100, f64::MAX / 4.0, 5);
        assert!(matches!(
            train(cw.mdp(), &cliff_risk(), &cfg, None),
            Err(Error::Diverged(_))
        ));
    }

    #[test]
    fn shared_first_step_rows_stay_tied() {
        let cw = CliffWalk::new(0.1, 4, 4, 0.98).unwrap();
        let mut cfg = ReinforceConfig::new(300, 50, 1e-3, 9);
        cfg.share_first_step = true;
        cfg.kappa = 0.5;
        cfg.start_states = Some(cw.start_candidates());
        let init = scripted(&cw, &short_moves(&cw));
        let out = train(cw.mdp(), &cliff_risk(), &cfg, Some(&init)).unwrap();
        let (t1, t2) = (out.policy.table1(), out.policy.table2());
        for s in 0..cw.mdp().n_states() {
            assert_eq!(t1.row(s), t2.row(s * 2));
        }
        // the untied run moves the two rows apart
        cfg.share_first_step = false;
        let free = train(cw.mdp(), &cliff_risk(), &cfg, Some(&init)).unwrap();
        let s = cw.start();
        assert_ne!(free.policy.table1().row(s), free.policy.table2().row(s * 2));
    }
}
