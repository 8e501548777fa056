//! The stochastic environment: a 1D random walk with ±1 steps, its endpoint
//! tilt, and the per-step rewards and returns used by the training loops.
//!
//! All quantities that are products over the horizon are also available in
//! natural-log form, which is what the rest of the crate uses internally to
//! stay stable at long horizons.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum WalkError {
    #[error("horizon must be at least 2, got {0}")]
    HorizonTooShort(usize),
    #[error("bias must lie in [0, 1/2), got {0}")]
    BiasOutOfRange(f64),
    #[error("tilt strength must be positive, got {0}")]
    TiltNotPositive(f64),
    #[error("horizon must be even for bridge probabilities, got {0}")]
    OddHorizon(usize),
    #[error("invalid trajectory: step at t={t} is {step}, expected +1 or -1")]
    InvalidStep { t: usize, step: i64 },
    #[error("trajectory must start at 0, got {0}")]
    BadStart(i64),
    #[error("trajectory has {got} positions, expected {want}")]
    BadLength { got: usize, want: usize },
    #[error("policy probability must be positive, got {0}")]
    DegeneratePolicy(f64),
}

/// Walk parameters: horizon, step bias, endpoint tilt strength, start position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WalkConfig {
    /// Number of time steps `T`.
    pub horizon: usize,
    /// Step bias: up-steps have probability `1/2 + bias`.
    pub bias: f64,
    /// Tilt strength multiplying the squared endpoint.
    pub tilt: f64,
    /// Start position, fixed at the origin.
    pub start: i64,
}

impl WalkConfig {
    pub fn new(horizon: usize, bias: f64, tilt: f64) -> Result<Self, WalkError> {
        if horizon < 2 {
            return Err(WalkError::HorizonTooShort(horizon));
        }
        if !(0.0..0.5).contains(&bias) {
            return Err(WalkError::BiasOutOfRange(bias));
        }
        if !(tilt > 0.0) {
            return Err(WalkError::TiltNotPositive(tilt));
        }
        Ok(Self { horizon, bias, tilt, start: 0 })
    }

    pub fn up_prob(&self) -> f64 {
        0.5 + self.bias
    }

    pub fn down_prob(&self) -> f64 {
        0.5 - self.bias
    }
}

/// One step of the agent: up or down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Up,
    Down,
}

impl Action {
    pub fn value(self) -> i64 {
        match self {
            Action::Up => 1,
            Action::Down => -1,
        }
    }

    pub fn from_step(step: i64) -> Option<Self> {
        match step {
            1 => Some(Action::Up),
            -1 => Some(Action::Down),
            _ => None,
        }
    }
}

/// A position sequence `x_0..x_T` with unit steps, starting at the origin.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trajectory {
    positions: Vec<i64>,
}

impl Trajectory {
    pub fn new(positions: Vec<i64>) -> Result<Self, WalkError> {
        if positions.len() < 2 {
            return Err(WalkError::BadLength { got: positions.len(), want: 2 });
        }
        if positions[0] != 0 {
            return Err(WalkError::BadStart(positions[0]));
        }
        for t in 1..positions.len() {
            let step = positions[t] - positions[t - 1];
            if step.abs() != 1 {
                return Err(WalkError::InvalidStep { t, step });
            }
        }
        Ok(Self { positions })
    }

    pub fn from_actions(actions: &[Action]) -> Self {
        let mut positions = Vec::with_capacity(actions.len() + 1);
        positions.push(0);
        let mut x = 0;
        for a in actions {
            x += a.value();
            positions.push(x);
        }
        Self { positions }
    }

    pub fn positions(&self) -> &[i64] {
        &self.positions
    }

    pub fn horizon(&self) -> usize {
        self.positions.len() - 1
    }

    pub fn endpoint(&self) -> i64 {
        *self.positions.last().unwrap()
    }

    /// Whether the trajectory is a random-walk bridge (returns to the origin).
    pub fn is_bridge(&self) -> bool {
        self.endpoint() == 0
    }

    pub fn step(&self, t: usize) -> i64 {
        self.positions[t] - self.positions[t - 1]
    }

    /// Counts of up- and down-steps.
    pub fn step_counts(&self) -> (usize, usize) {
        let ups = (1..self.positions.len()).filter(|&t| self.step(t) == 1).count();
        (ups, self.positions.len() - 1 - ups)
    }
}

/// What the agent recorded while taking one step.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    /// Time index of the transition (the step into `x_next` happens at `t`).
    pub t: usize,
    pub x_prev: i64,
    pub x_next: i64,
    /// Probability the policy assigned to the step it took.
    pub policy_prob: f64,
    pub reward: f64,
}

/// Transition probability of the original dynamics.
pub fn step_prob(cfg: &WalkConfig, x_prev: i64, x_next: i64) -> f64 {
    match x_next - x_prev {
        1 => cfg.up_prob(),
        -1 => cfg.down_prob(),
        _ => 0.0,
    }
}

/// Probability of a whole trajectory under the original dynamics.
pub fn trajectory_prob(cfg: &WalkConfig, traj: &Trajectory) -> Result<f64, WalkError> {
    Ok(log_trajectory_prob(cfg, traj)?.exp())
}

/// Log-probability of a trajectory under the original dynamics.
pub fn log_trajectory_prob(cfg: &WalkConfig, traj: &Trajectory) -> Result<f64, WalkError> {
    if traj.horizon() != cfg.horizon {
        return Err(WalkError::BadLength { got: traj.horizon() + 1, want: cfg.horizon + 1 });
    }
    let (ups, downs) = traj.step_counts();
    for t in 1..=traj.horizon() {
        let step = traj.step(t);
        if step.abs() != 1 {
            return Err(WalkError::InvalidStep { t, step });
        }
    }
    Ok(ups as f64 * cfg.up_prob().ln() + downs as f64 * cfg.down_prob().ln())
}

/// Natural log of the binomial coefficient C(n, k).
///
/// Exact integer arithmetic up to n = 60, log-gamma beyond; long-horizon runs
/// (T = 200) would overflow u128 otherwise.
pub fn ln_binomial(n: usize, k: usize) -> f64 {
    debug_assert!(k <= n);
    if n <= 60 {
        let mut c: u128 = 1;
        let k = k.min(n - k);
        for i in 0..k {
            c = c * (n - i) as u128 / (i + 1) as u128;
        }
        (c as f64).ln()
    } else {
        libm::lgamma((n + 1) as f64) - libm::lgamma((k + 1) as f64) - libm::lgamma((n - k + 1) as f64)
    }
}

/// Probability that the walk ends at `x` after `horizon` steps (binomial law).
pub fn endpoint_prob(cfg: &WalkConfig, x: i64) -> f64 {
    let t = cfg.horizon as i64;
    if x.abs() > t || (t + x) % 2 != 0 {
        return 0.0;
    }
    let ups = ((t + x) / 2) as usize;
    let downs = ((t - x) / 2) as usize;
    let log_p = ln_binomial(cfg.horizon, ups)
        + ups as f64 * cfg.up_prob().ln()
        + downs as f64 * cfg.down_prob().ln();
    log_p.exp()
}

/// Probability of generating a random-walk bridge under the original dynamics.
pub fn rwb_prob(cfg: &WalkConfig) -> Result<f64, WalkError> {
    if cfg.horizon % 2 != 0 {
        return Err(WalkError::OddHorizon(cfg.horizon));
    }
    Ok(endpoint_prob(cfg, 0))
}

/// Large-deviation rate of the bridge probability: -ln(2 sqrt(1/4 - eps^2)).
pub fn rate_function(epsilon: f64) -> Result<f64, WalkError> {
    if !(0.0..0.5).contains(&epsilon) {
        return Err(WalkError::BiasOutOfRange(epsilon));
    }
    Ok(-(2.0 * (0.25 - epsilon * epsilon).sqrt()).ln())
}

/// Step weight: exp(-s x^2) at the final step, 1 before it.
pub fn weight(cfg: &WalkConfig, x: i64, t: usize) -> f64 {
    log_weight(cfg, x, t).exp()
}

/// Log of the step weight: -s x^2 at t = T, 0 otherwise.
pub fn log_weight(cfg: &WalkConfig, x: i64, t: usize) -> f64 {
    if t == cfg.horizon {
        -cfg.tilt * (x * x) as f64
    } else {
        0.0
    }
}

/// Per-step reward: ln W(x_t, t) - ln(pi / P(x_t | x_{t-1})).
pub fn step_reward(cfg: &WalkConfig, rec: &StepRecord) -> Result<f64, WalkError> {
    if !(rec.policy_prob > 0.0) {
        return Err(WalkError::DegeneratePolicy(rec.policy_prob));
    }
    let p = step_prob(cfg, rec.x_prev, rec.x_next);
    debug_assert!(p > 0.0, "reward queried on a zero-probability step");
    Ok(log_weight(cfg, rec.x_next, rec.t) - (rec.policy_prob.ln() - p.ln()))
}

/// Return of a trajectory: the sum of its step rewards.
pub fn trajectory_return(_cfg: &WalkConfig, steps: &[StepRecord]) -> f64 {
    steps.iter().map(|r| r.reward).sum()
}

/// Return in tilt form: -s x_T^2 - sum ln(pi / P). Identical to summing the
/// step rewards; kept as an independent route for cross-checks.
pub fn trajectory_return_tilt_form(
    cfg: &WalkConfig,
    traj: &Trajectory,
    policy_probs: &[f64],
) -> Result<f64, WalkError> {
    if policy_probs.len() != cfg.horizon || traj.horizon() != cfg.horizon {
        return Err(WalkError::BadLength { got: policy_probs.len(), want: cfg.horizon });
    }
    let x_t = traj.endpoint();
    let mut log_ratio = 0.0;
    for t in 1..=cfg.horizon {
        let pi = policy_probs[t - 1];
        if !(pi > 0.0) {
            return Err(WalkError::DegeneratePolicy(pi));
        }
        let p = step_prob(cfg, traj.positions()[t - 1], traj.positions()[t]);
        log_ratio += pi.ln() - p.ln();
    }
    Ok(-cfg.tilt * (x_t * x_t) as f64 - log_ratio)
}

/// All `2^T` trajectories of the given horizon, in lexicographic step order.
/// Only usable for short horizons; the test oracles enumerate with this.
pub fn enumerate_trajectories(horizon: usize) -> impl Iterator<Item = Trajectory> {
    assert!(horizon <= 24, "enumeration is exponential in the horizon");
    (0u32..1 << horizon).map(move |bits| {
        let actions: Vec<Action> = (0..horizon)
            .map(|t| if bits >> t & 1 == 1 { Action::Up } else { Action::Down })
            .collect();
        Trajectory::from_actions(&actions)
    })
}
