//! Exact reference implementation of the reweighted dynamics, its value
//! function, and the dynamic-programming KL divergence. Everything here is
//! ground truth: learned policies are scored against these tables.

use crate::walk::{self, Action, Trajectory, WalkConfig};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("state (x={x}, t={t}) lies outside the reachable cone")]
    UnreachableState { x: i64, t: usize },
    #[error("policy assigns zero probability at reachable state (x={x}, t={t})")]
    DegeneratePolicy { x: i64, t: usize },
}

/// Any time-dependent Markov policy over the two actions.
pub trait MarkovPolicy {
    /// Probability of stepping down from `x` at time `t`.
    fn down_prob(&self, x: i64, t: usize) -> f64;

    fn up_prob(&self, x: i64, t: usize) -> f64 {
        1.0 - self.down_prob(x, t)
    }

    fn action_prob(&self, x: i64, t: usize, action: Action) -> f64 {
        match action {
            Action::Down => self.down_prob(x, t),
            Action::Up => self.up_prob(x, t),
        }
    }
}

impl<F: Fn(i64, usize) -> f64> MarkovPolicy for F {
    fn down_prob(&self, x: i64, t: usize) -> f64 {
        self(x, t)
    }
}

/// The untilted walk viewed as a policy.
pub struct OriginalDynamics(pub WalkConfig);

impl MarkovPolicy for OriginalDynamics {
    fn down_prob(&self, _x: i64, _t: usize) -> f64 {
        self.0.down_prob()
    }
}

/// Uniform coin-flip policy.
pub struct UniformPolicy;

impl MarkovPolicy for UniformPolicy {
    fn down_prob(&self, _x: i64, _t: usize) -> f64 {
        0.5
    }
}

/// Dense (x, t) table over x in [-T, T], t in [0, T]. Cells outside the cone
/// |x| <= t hold NaN and are excluded from every sum.
#[derive(Debug, Clone)]
pub struct StateGrid {
    horizon: usize,
    data: Vec<f64>,
}

impl StateGrid {
    pub fn filled(horizon: usize, value: f64) -> Self {
        Self { horizon, data: vec![value; (horizon + 1) * (2 * horizon + 1)] }
    }

    fn idx(&self, x: i64, t: usize) -> usize {
        debug_assert!(t <= self.horizon && x.abs() as usize <= self.horizon);
        t * (2 * self.horizon + 1) + (x + self.horizon as i64) as usize
    }

    pub fn get(&self, x: i64, t: usize) -> f64 {
        self.data[self.idx(x, t)]
    }

    pub fn set(&mut self, x: i64, t: usize, value: f64) {
        let i = self.idx(x, t);
        self.data[i] = value;
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
}

/// Positions reachable from the origin after `t` steps: |x| <= t with
/// matching parity.
pub fn reachable_positions(t: usize) -> impl Iterator<Item = i64> {
    let t = t as i64;
    (-t..=t).step_by(2)
}

/// The reweighted dynamics as explicit tables: the log of the backward
/// normalizer g and the two transition probabilities.
///
/// Up- and down-probabilities are stored separately because near the cone
/// edge one of them is so small that `1 - p` rounds it away.
#[derive(Debug, Clone)]
pub struct ReweightedTables {
    cfg: WalkConfig,
    log_g: StateGrid,
    p_down: StateGrid,
    p_up: StateGrid,
}

/// Builds the g-table by backward recursion and the transition table from it.
///
/// The recursion runs in log space with log-sum-exp; the direct product form
/// underflows long before T = 200.
pub fn compute_g(cfg: &WalkConfig) -> ReweightedTables {
    let t_max = cfg.horizon;
    let mut log_g = StateGrid::filled(t_max, f64::NAN);
    for x in -(t_max as i64)..=t_max as i64 {
        log_g.set(x, t_max, 0.0);
    }
    let ln_up = cfg.up_prob().ln();
    let ln_down = cfg.down_prob().ln();
    for t in (0..t_max).rev() {
        for x in -(t as i64)..=t as i64 {
            let up = ln_up + walk::log_weight(cfg, x + 1, t + 1) + log_g.get(x + 1, t + 1);
            let down = ln_down + walk::log_weight(cfg, x - 1, t + 1) + log_g.get(x - 1, t + 1);
            log_g.set(x, t, log_sum_exp(up, down));
        }
    }

    let mut p_down = StateGrid::filled(t_max, f64::NAN);
    let mut p_up = StateGrid::filled(t_max, f64::NAN);
    for t in 0..t_max {
        for x in -(t as i64)..=t as i64 {
            let log_down = ln_down + walk::log_weight(cfg, x - 1, t + 1)
                + log_g.get(x - 1, t + 1)
                - log_g.get(x, t);
            let log_up = ln_up + walk::log_weight(cfg, x + 1, t + 1) + log_g.get(x + 1, t + 1)
                - log_g.get(x, t);
            p_down.set(x, t, log_down.exp().clamp(0.0, 1.0));
            p_up.set(x, t, log_up.exp().clamp(0.0, 1.0));
        }
    }
    ReweightedTables { cfg: *cfg, log_g, p_down, p_up }
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl ReweightedTables {
    pub fn config(&self) -> &WalkConfig {
        &self.cfg
    }

    pub fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    /// ln g(x, t); zero at the horizon by the boundary condition.
    pub fn log_g(&self, x: i64, t: usize) -> f64 {
        self.log_g.get(x, t)
    }

    /// ln of the normalizer E_P[W], which the recursion yields at the origin.
    pub fn log_normalizer(&self) -> f64 {
        self.log_g.get(0, 0)
    }

    /// P_W(x-1 | x, t), the reweighted probability of stepping down.
    pub fn transition_down(&self, x: i64, t: usize) -> Result<f64, OracleError> {
        if t >= self.cfg.horizon || x.abs() as usize > t {
            return Err(OracleError::UnreachableState { x, t });
        }
        Ok(self.p_down.get(x, t))
    }

    /// P_W(x+1 | x, t), computed in log space rather than as `1 - p_down`.
    pub fn transition_up(&self, x: i64, t: usize) -> Result<f64, OracleError> {
        if t >= self.cfg.horizon || x.abs() as usize > t {
            return Err(OracleError::UnreachableState { x, t });
        }
        Ok(self.p_up.get(x, t))
    }
}

impl MarkovPolicy for ReweightedTables {
    fn down_prob(&self, x: i64, t: usize) -> f64 {
        self.transition_down(x, t)
            .unwrap_or_else(|e| panic!("reweighted transition query failed: {e}"))
    }

    fn up_prob(&self, x: i64, t: usize) -> f64 {
        self.transition_up(x, t)
            .unwrap_or_else(|e| panic!("reweighted transition query failed: {e}"))
    }
}

/// A policy stored as an explicit down-probability table.
#[derive(Debug, Clone)]
pub struct TablePolicy {
    down: StateGrid,
}

impl TablePolicy {
    /// Tabulates `policy` over the reachable cone.
    pub fn tabulate(horizon: usize, policy: &impl MarkovPolicy) -> Self {
        let mut down = StateGrid::filled(horizon, f64::NAN);
        for t in 0..horizon {
            for x in reachable_positions(t) {
                down.set(x, t, policy.down_prob(x, t));
            }
        }
        Self { down }
    }

    pub fn horizon(&self) -> usize {
        self.down.horizon()
    }

    /// Rows (t, x, p_down) over the reachable cone, for CSV export.
    pub fn rows(&self) -> Vec<(usize, i64, f64)> {
        let mut out = Vec::new();
        for t in 0..self.down.horizon() {
            for x in reachable_positions(t) {
                out.push((t, x, self.down.get(x, t)));
            }
        }
        out
    }
}

impl MarkovPolicy for TablePolicy {
    fn down_prob(&self, x: i64, t: usize) -> f64 {
        self.down.get(x, t)
    }
}

/// Probability of a trajectory under the reweighted dynamics, as the product
/// of its transition probabilities.
pub fn reweighted_traj_prob(tables: &ReweightedTables, traj: &Trajectory) -> f64 {
    log_reweighted_traj_prob(tables, traj).exp()
}

pub fn log_reweighted_traj_prob(tables: &ReweightedTables, traj: &Trajectory) -> f64 {
    let mut log_p = 0.0;
    for t in 1..=traj.horizon() {
        let x_prev = traj.positions()[t - 1];
        let p = if traj.step(t) == -1 {
            tables.down_prob(x_prev, t - 1)
        } else {
            tables.up_prob(x_prev, t - 1)
        };
        log_p += p.ln();
    }
    log_p
}

/// Draws one trajectory from an arbitrary Markov policy.
pub fn sample_markov(
    policy: &impl MarkovPolicy,
    cfg: &WalkConfig,
    rng: &mut impl Rng,
) -> Trajectory {
    let mut actions = Vec::with_capacity(cfg.horizon);
    let mut x = cfg.start;
    for t in 0..cfg.horizon {
        let a = if rng.gen::<f64>() < policy.down_prob(x, t) { Action::Down } else { Action::Up };
        actions.push(a);
        x += a.value();
    }
    Trajectory::from_actions(&actions)
}

/// Draws `n` i.i.d. trajectories from the reweighted dynamics.
pub fn sample_reweighted(
    tables: &ReweightedTables,
    cfg: &WalkConfig,
    rng: &mut impl Rng,
    n: usize,
) -> Vec<Trajectory> {
    (0..n).map(|_| sample_markov(tables, cfg, rng)).collect()
}

/// Exact value function of a policy, indexed like the other state grids.
#[derive(Debug, Clone)]
pub struct ValueTable {
    v: StateGrid,
}

impl ValueTable {
    /// Tabulates an arbitrary state-value function over the reachable cone.
    pub fn tabulate(horizon: usize, value: impl Fn(i64, usize) -> f64) -> Self {
        let mut v = StateGrid::filled(horizon, f64::NAN);
        for t in 0..=horizon {
            for x in reachable_positions(t) {
                v.set(x, t, value(x, t));
            }
        }
        Self { v }
    }

    pub fn get(&self, x: i64, t: usize) -> f64 {
        self.v.get(x, t)
    }

    pub fn horizon(&self) -> usize {
        self.v.horizon()
    }

    /// Expected return of the policy from the start state.
    pub fn at_origin(&self) -> f64 {
        self.v.get(0, 0)
    }

    pub fn rows(&self) -> Vec<(usize, i64, f64)> {
        let mut out = Vec::new();
        for t in 0..=self.v.horizon() {
            for x in reachable_positions(t) {
                out.push((t, x, self.v.get(x, t)));
            }
        }
        out
    }
}

/// Backward Bellman sweep: V(x, t) = E_{a ~ pi}[ r + V(x + a, t + 1) ] with
/// V(., T) = 0. The reward uses the policy's own step probabilities.
pub fn exact_value_function(
    cfg: &WalkConfig,
    policy: &impl MarkovPolicy,
) -> Result<ValueTable, OracleError> {
    let t_max = cfg.horizon;
    let mut v = StateGrid::filled(t_max, f64::NAN);
    for x in reachable_positions(t_max) {
        v.set(x, t_max, 0.0);
    }
    for t in (0..t_max).rev() {
        for x in reachable_positions(t) {
            let mut total = 0.0;
            for (next, pi) in [(x + 1, policy.up_prob(x, t)), (x - 1, policy.down_prob(x, t))] {
                if pi == 0.0 {
                    return Err(OracleError::DegeneratePolicy { x, t });
                }
                let p = walk::step_prob(cfg, x, next);
                let reward = walk::log_weight(cfg, next, t + 1) - (pi.ln() - p.ln());
                total += pi * (reward + v.get(next, t + 1));
            }
            v.set(x, t, total);
        }
    }
    Ok(ValueTable { v })
}

/// KL divergence D(P_theta || P_W) of a policy from the reweighted dynamics,
/// by forward propagation of state marginals. O(T^2), no trajectory
/// enumeration.
pub fn exact_kl(
    cfg: &WalkConfig,
    policy: &impl MarkovPolicy,
    tables: &ReweightedTables,
) -> f64 {
    let t_max = cfg.horizon;
    let mut marginal = StateGrid::filled(t_max, 0.0);
    marginal.set(0, 0, 1.0);
    let mut kl = 0.0;
    for t in 0..t_max {
        for x in reachable_positions(t) {
            let mu = marginal.get(x, t);
            if mu == 0.0 {
                continue;
            }
            for (next, pi, pw) in [
                (x - 1, policy.down_prob(x, t), tables.down_prob(x, t)),
                (x + 1, policy.up_prob(x, t), tables.up_prob(x, t)),
            ] {
                if pi > 0.0 {
                    kl += mu * pi * (pi.ln() - pw.ln());
                    let m = marginal.get(next, t + 1);
                    marginal.set(next, t + 1, m + mu * pi);
                }
            }
        }
    }
    kl
}
