//! Policy-gradient and actor-critic training loops, generic over the circuit
//! and network approximators.
//!
//! Updates follow the pseudocode exactly: plain per-class-rate gradient
//! ascent on the Monte-Carlo gradient estimate, one update per batch. An
//! adaptive-moment optimizer sits behind a config flag, off by default.
//!
//! Every agent owns a counter-based RNG stream derived from (seed, agent), so
//! serial and parallel schedules produce bitwise-identical results.

use crate::nn::{self, Head, MlpParams, MlpSpec};
use crate::oracle::{self, MarkovPolicy, TablePolicy, ValueTable};
use crate::policy::{PqcCritic, SoftmaxPqcPolicy};
use crate::qsim::{CircuitSpec, Gradient};
use crate::walk::{self, Action, StepRecord, Trajectory, WalkConfig, WalkError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Walk(#[from] WalkError),
    #[error("agent diverged at batch {batch}: {reason}")]
    Diverged { batch: usize, reason: String },
}

/// Per-class learning rates. Circuit models read phi/lambda/omega, network
/// models read net.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub phi: f64,
    pub lambda: f64,
    pub omega: f64,
    pub net: f64,
}

impl LearningRates {
    pub fn pqc(phi: f64, lambda: f64, omega: f64) -> Self {
        Self { phi, lambda, omega, net: 0.0 }
    }

    pub fn nn(alpha: f64) -> Self {
        Self { phi: 0.0, lambda: 0.0, omega: 0.0, net: alpha }
    }

    pub fn zero() -> Self {
        Self { phi: 0.0, lambda: 0.0, omega: 0.0, net: 0.0 }
    }
}

/// A trainable policy: evaluation, score gradients, and the ascent step.
/// Gradients travel as flat vectors with a model-defined layout.
pub trait PolicyModel: MarkovPolicy {
    fn param_len(&self) -> usize;
    /// Gradient of ln pi(action | x, t) in the model's flat layout.
    fn log_prob_grad(&self, x: i64, t: usize, action: Action) -> Vec<f64>;
    /// theta += direction, scaled per class by the rates.
    fn ascend(&mut self, direction: &[f64], rates: &LearningRates);
    fn params_finite(&self) -> bool;
}

/// A trainable state-value approximator.
pub trait CriticModel {
    fn param_len(&self) -> usize;
    fn value(&self, x: i64, t: usize) -> f64;
    fn value_grad(&self, x: i64, t: usize) -> Vec<f64>;
    fn ascend(&mut self, direction: &[f64], rates: &LearningRates);
    fn params_finite(&self) -> bool;
}

fn flatten_gradient(g: &Gradient) -> Vec<f64> {
    let mut flat = Vec::with_capacity(g.phi.len() + g.lambda.len() + 1);
    flat.extend_from_slice(&g.phi);
    flat.extend_from_slice(&g.lambda);
    flat.push(g.omega);
    flat
}

impl PolicyModel for SoftmaxPqcPolicy {
    fn param_len(&self) -> usize {
        self.params.phi.len() + self.params.lambda.len() + 1
    }

    fn log_prob_grad(&self, x: i64, t: usize, action: Action) -> Vec<f64> {
        flatten_gradient(&self.log_prob_gradient(x, t, action))
    }

    fn ascend(&mut self, direction: &[f64], rates: &LearningRates) {
        let (n_phi, n_lambda) = (self.params.phi.len(), self.params.lambda.len());
        for (p, d) in self.params.phi.iter_mut().zip(&direction[..n_phi]) {
            *p += rates.phi * d;
        }
        for (l, d) in self.params.lambda.iter_mut().zip(&direction[n_phi..n_phi + n_lambda]) {
            *l += rates.lambda * d;
        }
        self.params.omega += rates.omega * direction[n_phi + n_lambda];
    }

    fn params_finite(&self) -> bool {
        self.params.all_finite()
    }
}

impl CriticModel for PqcCritic {
    fn param_len(&self) -> usize {
        self.params.phi.len() + self.params.lambda.len() + 1
    }

    fn value(&self, x: i64, t: usize) -> f64 {
        PqcCritic::value(self, x, t)
    }

    fn value_grad(&self, x: i64, t: usize) -> Vec<f64> {
        flatten_gradient(&self.value_gradient(x, t).expect("critic gradient failed"))
    }

    fn ascend(&mut self, direction: &[f64], rates: &LearningRates) {
        let (n_phi, n_lambda) = (self.params.phi.len(), self.params.lambda.len());
        for (p, d) in self.params.phi.iter_mut().zip(&direction[..n_phi]) {
            *p += rates.phi * d;
        }
        for (l, d) in self.params.lambda.iter_mut().zip(&direction[n_phi..n_phi + n_lambda]) {
            *l += rates.lambda * d;
        }
        self.params.omega += rates.omega * direction[n_phi + n_lambda];
    }

    fn params_finite(&self) -> bool {
        self.params.all_finite()
    }
}

/// Network policy: two logits through the same beta-softmax as the circuit
/// policy.
#[derive(Debug, Clone)]
pub struct MlpPolicy {
    pub spec: MlpSpec,
    pub params: MlpParams,
    pub beta: f64,
}

impl MlpPolicy {
    pub fn new(spec: MlpSpec, beta: f64, rng: &mut impl Rng) -> Self {
        assert_eq!(spec.head, Head::Policy);
        let params = MlpParams::init(&spec, rng);
        Self { spec, params, beta }
    }

    fn action_probs(&self, x: i64, t: usize) -> (f64, f64) {
        let logits = nn::forward(&self.spec, &self.params, x as f64, t as f64)
            .expect("network forward failed");
        let m = self.beta * logits[0].max(logits[1]);
        let e_up = (self.beta * logits[0] - m).exp();
        let e_down = (self.beta * logits[1] - m).exp();
        (e_up / (e_up + e_down), e_down / (e_up + e_down))
    }
}

impl MarkovPolicy for MlpPolicy {
    fn down_prob(&self, x: i64, t: usize) -> f64 {
        self.action_probs(x, t).1
    }

    fn up_prob(&self, x: i64, t: usize) -> f64 {
        self.action_probs(x, t).0
    }
}

impl PolicyModel for MlpPolicy {
    fn param_len(&self) -> usize {
        self.params.flat.len()
    }

    fn log_prob_grad(&self, x: i64, t: usize, action: Action) -> Vec<f64> {
        let (up, down) = self.action_probs(x, t);
        // grad ln pi(a) = beta (grad l_a - sum_a' pi(a') grad l_a'), folded
        // into one backward pass.
        let upstream = match action {
            Action::Up => [self.beta * (1.0 - up), self.beta * (0.0 - down)],
            Action::Down => [self.beta * (0.0 - up), self.beta * (1.0 - down)],
        };
        nn::backward(&self.spec, &self.params, x as f64, t as f64, &upstream)
            .expect("network backward failed")
    }

    fn ascend(&mut self, direction: &[f64], rates: &LearningRates) {
        for (p, d) in self.params.flat.iter_mut().zip(direction) {
            *p += rates.net * d;
        }
    }

    fn params_finite(&self) -> bool {
        self.params.all_finite()
    }
}

/// Network critic: a single linear output head.
#[derive(Debug, Clone)]
pub struct MlpCritic {
    pub spec: MlpSpec,
    pub params: MlpParams,
}

impl MlpCritic {
    pub fn new(spec: MlpSpec, rng: &mut impl Rng) -> Self {
        assert_eq!(spec.head, Head::Critic);
        let params = MlpParams::init(&spec, rng);
        Self { spec, params }
    }
}

impl CriticModel for MlpCritic {
    fn param_len(&self) -> usize {
        self.params.flat.len()
    }

    fn value(&self, x: i64, t: usize) -> f64 {
        nn::forward(&self.spec, &self.params, x as f64, t as f64)
            .expect("network forward failed")[0]
    }

    fn value_grad(&self, x: i64, t: usize) -> Vec<f64> {
        nn::backward(&self.spec, &self.params, x as f64, t as f64, &[1.0])
            .expect("network backward failed")
    }

    fn ascend(&mut self, direction: &[f64], rates: &LearningRates) {
        for (p, d) in self.params.flat.iter_mut().zip(direction) {
            *p += rates.net * d;
        }
    }

    fn params_finite(&self) -> bool {
        self.params.all_finite()
    }
}

/// One sampled episode with everything the updates need.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub steps: Vec<StepRecord>,
    /// Score gradient at each visited state, in the model's flat layout.
    pub log_prob_grads: Vec<Vec<f64>>,
    /// return_suffix[t] = sum of rewards of transitions after state x_t;
    /// return_suffix[T] = 0 and return_suffix[0] is the episode return.
    pub return_suffix: Vec<f64>,
}

impl Rollout {
    pub fn episode_return(&self) -> f64 {
        self.return_suffix[0]
    }
}

/// Samples one episode from the policy, recording per-step probabilities,
/// rewards, and score gradients.
pub fn rollout(
    policy: &impl PolicyModel,
    cfg: &WalkConfig,
    rng: &mut impl Rng,
) -> Result<Rollout, TrainError> {
    let mut actions = Vec::with_capacity(cfg.horizon);
    let mut steps = Vec::with_capacity(cfg.horizon);
    let mut grads = Vec::with_capacity(cfg.horizon);
    let mut x = cfg.start;
    for t in 0..cfg.horizon {
        let down = policy.down_prob(x, t);
        let action = if rng.gen::<f64>() < down { Action::Down } else { Action::Up };
        let prob = match action {
            Action::Down => down,
            Action::Up => policy.up_prob(x, t),
        };
        let x_next = x + action.value();
        let mut rec = StepRecord { t: t + 1, x_prev: x, x_next, policy_prob: prob, reward: 0.0 };
        rec.reward = walk::step_reward(cfg, &rec)?;
        grads.push(policy.log_prob_grad(x, t, action));
        steps.push(rec);
        actions.push(action);
        x = x_next;
    }
    let mut return_suffix = vec![0.0; cfg.horizon + 1];
    for t in (0..cfg.horizon).rev() {
        return_suffix[t] = steps[t].reward + return_suffix[t + 1];
    }
    Ok(Rollout { trajectory: Trajectory::from_actions(&actions), steps, log_prob_grads: grads, return_suffix })
}

/// Plain or adaptive-moment transform applied to the ascent direction.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, step: usize },
}

impl Optimizer {
    pub fn new(adaptive: bool, param_len: usize) -> Self {
        if adaptive {
            Optimizer::Adam { m: vec![0.0; param_len], v: vec![0.0; param_len], step: 0 }
        } else {
            Optimizer::Sgd
        }
    }

    fn transform(&mut self, direction: &mut [f64]) {
        match self {
            Optimizer::Sgd => {}
            Optimizer::Adam { m, v, step } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                *step += 1;
                let bc1 = 1.0 - B1.powi(*step as i32);
                let bc2 = 1.0 - B2.powi(*step as i32);
                for i in 0..direction.len() {
                    let g = direction[i];
                    m[i] = B1 * m[i] + (1.0 - B1) * g;
                    v[i] = B2 * v[i] + (1.0 - B2) * g * g;
                    direction[i] = (m[i] / bc1) / ((v[i] / bc2).sqrt() + EPS);
                }
            }
        }
    }
}

/// REINFORCE update: theta += rate * (1/N) sum_i sum_t R_suffix grad ln pi.
pub fn pg_update(
    policy: &mut impl PolicyModel,
    batch: &[Rollout],
    rates: &LearningRates,
    optimizer: &mut Optimizer,
) {
    assert!(!batch.is_empty());
    let mut direction = vec![0.0; policy.param_len()];
    for rollout in batch {
        for (t, grad) in rollout.log_prob_grads.iter().enumerate() {
            let coeff = rollout.return_suffix[t];
            for (d, g) in direction.iter_mut().zip(grad) {
                *d += coeff * g;
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for d in direction.iter_mut() {
        *d *= scale;
    }
    optimizer.transform(&mut direction);
    policy.ascend(&direction, rates);
}

/// Actor-critic update from one batch: the critic ascends sum delta_td grad V
/// and the actor ascends sum delta_td grad ln pi.
///
/// The value at the horizon is the critic's own output unless
/// `zero_value_at_horizon` pins it to zero.
pub fn ac_update(
    actor: &mut impl PolicyModel,
    critic: &mut impl CriticModel,
    batch: &[Rollout],
    actor_rates: &LearningRates,
    critic_rates: &LearningRates,
    zero_value_at_horizon: bool,
    actor_opt: &mut Optimizer,
    critic_opt: &mut Optimizer,
) {
    assert!(!batch.is_empty());
    let horizon = batch[0].steps.len();
    let mut actor_dir = vec![0.0; actor.param_len()];
    let mut critic_dir = vec![0.0; critic.param_len()];
    for rollout in batch {
        for (t, step) in rollout.steps.iter().enumerate() {
            let v_here = critic.value(step.x_prev, t);
            let v_next = if t + 1 == horizon && zero_value_at_horizon {
                0.0
            } else {
                critic.value(step.x_next, t + 1)
            };
            let delta_td = v_next + step.reward - v_here;
            for (d, g) in actor_dir.iter_mut().zip(&rollout.log_prob_grads[t]) {
                *d += delta_td * g;
            }
            for (d, g) in critic_dir.iter_mut().zip(&critic.value_grad(step.x_prev, t)) {
                *d += delta_td * g;
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for d in actor_dir.iter_mut() {
        *d *= scale;
    }
    for d in critic_dir.iter_mut() {
        *d *= scale;
    }
    actor_opt.transform(&mut actor_dir);
    critic_opt.transform(&mut critic_dir);
    actor.ascend(&actor_dir, actor_rates);
    critic.ascend(&critic_dir, critic_rates);
}

/// Per-batch training metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchMetrics {
    pub batch: usize,
    pub mean_return: f64,
    /// Fraction of the batch's episodes ending at the origin.
    pub rwb_fraction: f64,
    /// Distinct bridge trajectories within the batch.
    pub distinct_rwb: usize,
}

/// Exponential moving average with S_0 = x_0.
pub fn ema(series: &[f64], alpha: f64) -> Vec<f64> {
    assert!(alpha > 0.0 && alpha <= 1.0);
    let mut out = Vec::with_capacity(series.len());
    let mut s = match series.first() {
        Some(&x) => x,
        None => return out,
    };
    out.push(s);
    for &x in &series[1..] {
        s = alpha * x + (1.0 - alpha) * s;
        out.push(s);
    }
    out
}

/// Full training configuration shared by the PG and AC drivers.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub walk: WalkConfig,
    /// Episodes per batch (N).
    pub batch_size: usize,
    /// Number of batches (B).
    pub batches: usize,
    /// Independent agents, each with its own RNG stream.
    pub agents: usize,
    pub seed: u64,
    /// Inverse temperature of the softmax policies.
    pub beta: f64,
    pub rates: LearningRates,
    /// Critic rates; unused by PG runs.
    pub critic_rates: LearningRates,
    /// Treat V(., T) as zero instead of the critic output.
    pub zero_value_at_horizon: bool,
    /// Adaptive-moment optimizer instead of plain ascent.
    pub adaptive_moment: bool,
    /// Stop an agent once it has generated this many bridges in total.
    pub stop_after_bridges: Option<usize>,
    /// Record exact KL to the reweighted dynamics before and after training.
    pub track_kl: bool,
}

impl TrainConfig {
    pub fn new(walk: WalkConfig) -> Self {
        Self {
            walk,
            batch_size: 10,
            batches: 1000,
            agents: 10,
            seed: 0,
            beta: 1.0,
            rates: LearningRates::pqc(0.01, 0.05, 0.1),
            critic_rates: LearningRates::pqc(0.01, 0.05, 0.7),
            zero_value_at_horizon: false,
            adaptive_moment: false,
            stop_after_bridges: None,
            track_kl: false,
        }
    }
}

/// Outcome of one agent's training run.
#[derive(Debug, Clone)]
pub struct AgentResult {
    pub agent: usize,
    pub metrics: Vec<BatchMetrics>,
    /// Divergence diagnostic if the agent was aborted early.
    pub aborted: Option<String>,
    pub final_policy: TablePolicy,
    /// Critic snapshot for actor-critic runs.
    pub final_value: Option<ValueTable>,
    pub initial_kl: Option<f64>,
    pub final_kl: Option<f64>,
}

impl AgentResult {
    pub fn returns(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.mean_return).collect()
    }

    pub fn rwb_fractions(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.rwb_fraction).collect()
    }
}

/// RNG for (seed, agent): one ChaCha stream per agent so schedules cannot
/// change the draws.
pub fn agent_rng(seed: u64, agent: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(agent as u64 + 1);
    rng
}

fn thread_pool() -> rayon::ThreadPool {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("RARETRAJ_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        builder = builder.num_threads(n.max(1));
    }
    builder.build().expect("failed to build thread pool")
}

fn batch_metrics(batch_index: usize, batch: &[Rollout]) -> BatchMetrics {
    let n = batch.len() as f64;
    let mean_return = batch.iter().map(Rollout::episode_return).sum::<f64>() / n;
    let bridges: Vec<&Rollout> = batch.iter().filter(|r| r.trajectory.is_bridge()).collect();
    let distinct: BTreeSet<&[i64]> =
        bridges.iter().map(|r| r.trajectory.positions()).collect();
    BatchMetrics {
        batch: batch_index,
        mean_return,
        rwb_fraction: bridges.len() as f64 / n,
        distinct_rwb: distinct.len(),
    }
}

fn divergence_reason(cfg: &TrainConfig, metrics: &BatchMetrics, finite: bool) -> Option<String> {
    if !finite {
        return Some("non-finite parameters".to_string());
    }
    let cap = 10.0 * cfg.walk.tilt * (cfg.walk.horizon * cfg.walk.horizon) as f64;
    if !metrics.mean_return.is_finite() || metrics.mean_return.abs() > cap {
        return Some(format!("runaway return {}", metrics.mean_return));
    }
    None
}

/// Generic per-agent loop over batches: draw with the current policy, record
/// metrics, update, check the divergence guard.
fn train_agent_loop<S>(
    cfg: &TrainConfig,
    agent: usize,
    state: &mut S,
    policy_of: impl Fn(&S) -> &dyn PolicyModel,
    mut update: impl FnMut(&mut S, &[Rollout]),
    finite: impl Fn(&S) -> bool,
) -> (Vec<BatchMetrics>, Option<String>) {
    let mut rng = agent_rng(cfg.seed, agent);
    let mut metrics = Vec::with_capacity(cfg.batches);
    let mut aborted = None;
    let mut bridges_seen = 0usize;
    for batch_index in 0..cfg.batches {
        let batch: Vec<Rollout> = {
            let policy = policy_of(state);
            (0..cfg.batch_size)
                .map(|_| rollout_dyn(policy, &cfg.walk, &mut rng).expect("rollout failed"))
                .collect()
        };
        update(state, &batch);
        let m = batch_metrics(batch_index, &batch);
        bridges_seen += batch.iter().filter(|r| r.trajectory.is_bridge()).count();
        metrics.push(m);
        if let Some(reason) = divergence_reason(cfg, &m, finite(state)) {
            aborted = Some(format!("batch {batch_index}: {reason}"));
            break;
        }
        if cfg.stop_after_bridges.map_or(false, |limit| bridges_seen >= limit) {
            break;
        }
    }
    (metrics, aborted)
}

// Object-safe rollout used by the generic loop.
fn rollout_dyn(
    policy: &dyn PolicyModel,
    cfg: &WalkConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout, TrainError> {
    struct Dyn<'a>(&'a dyn PolicyModel);
    impl MarkovPolicy for Dyn<'_> {
        fn down_prob(&self, x: i64, t: usize) -> f64 {
            self.0.down_prob(x, t)
        }
        fn up_prob(&self, x: i64, t: usize) -> f64 {
            self.0.up_prob(x, t)
        }
    }
    impl PolicyModel for Dyn<'_> {
        fn param_len(&self) -> usize {
            self.0.param_len()
        }
        fn log_prob_grad(&self, x: i64, t: usize, action: Action) -> Vec<f64> {
            self.0.log_prob_grad(x, t, action)
        }
        fn ascend(&mut self, _direction: &[f64], _rates: &LearningRates) {
            unreachable!("rollouts never update");
        }
        fn params_finite(&self) -> bool {
            self.0.params_finite()
        }
    }
    rollout(&Dyn(policy), cfg, rng)
}

/// Trains `cfg.agents` policy-gradient agents in parallel.
pub fn train_pg<P, F>(cfg: &TrainConfig, make_policy: F) -> Vec<AgentResult>
where
    P: PolicyModel + Send,
    F: Fn(&mut ChaCha8Rng) -> P + Sync,
{
    let tables = if cfg.track_kl { Some(oracle::compute_g(&cfg.walk)) } else { None };
    thread_pool().install(|| {
        (0..cfg.agents)
            .into_par_iter()
            .map(|agent| {
                let mut init_rng = agent_rng(cfg.seed ^ 0x9e37_79b9, agent);
                let policy = make_policy(&mut init_rng);
                let initial_kl =
                    tables.as_ref().map(|t| oracle::exact_kl(&cfg.walk, &policy, t));
                let optimizer = Optimizer::new(cfg.adaptive_moment, policy.param_len());
                let mut state = (policy, optimizer);
                let (metrics, aborted) = train_agent_loop(
                    cfg,
                    agent,
                    &mut state,
                    |s| &s.0 as &dyn PolicyModel,
                    |s, batch| pg_update(&mut s.0, batch, &cfg.rates, &mut s.1),
                    |s| s.0.params_finite(),
                );
                let (policy, _) = state;
                let final_kl = tables.as_ref().map(|t| oracle::exact_kl(&cfg.walk, &policy, t));
                AgentResult {
                    agent,
                    metrics,
                    aborted,
                    final_policy: TablePolicy::tabulate(cfg.walk.horizon, &policy),
                    final_value: None,
                    initial_kl,
                    final_kl,
                }
            })
            .collect()
    })
}

/// Trains `cfg.agents` actor-critic agents in parallel.
pub fn train_ac<P, C, F, G>(cfg: &TrainConfig, make_actor: F, make_critic: G) -> Vec<AgentResult>
where
    P: PolicyModel + Send,
    C: CriticModel + Send,
    F: Fn(&mut ChaCha8Rng) -> P + Sync,
    G: Fn(&mut ChaCha8Rng) -> C + Sync,
{
    let tables = if cfg.track_kl { Some(oracle::compute_g(&cfg.walk)) } else { None };
    thread_pool().install(|| {
        (0..cfg.agents)
            .into_par_iter()
            .map(|agent| {
                let mut init_rng = agent_rng(cfg.seed ^ 0x9e37_79b9, agent);
                let actor = make_actor(&mut init_rng);
                let critic = make_critic(&mut init_rng);
                let initial_kl =
                    tables.as_ref().map(|t| oracle::exact_kl(&cfg.walk, &actor, t));
                let actor_opt = Optimizer::new(cfg.adaptive_moment, actor.param_len());
                let critic_opt = Optimizer::new(cfg.adaptive_moment, critic.param_len());
                let mut state = (actor, critic, actor_opt, critic_opt);
                let (metrics, aborted) = train_agent_loop(
                    cfg,
                    agent,
                    &mut state,
                    |s| &s.0 as &dyn PolicyModel,
                    |s, batch| {
                        ac_update(
                            &mut s.0,
                            &mut s.1,
                            batch,
                            &cfg.rates,
                            &cfg.critic_rates,
                            cfg.zero_value_at_horizon,
                            &mut s.2,
                            &mut s.3,
                        )
                    },
                    |s| s.0.params_finite() && s.1.params_finite(),
                );
                let (actor, critic, _, _) = state;
                let final_kl = tables.as_ref().map(|t| oracle::exact_kl(&cfg.walk, &actor, t));
                AgentResult {
                    agent,
                    metrics,
                    aborted,
                    final_policy: TablePolicy::tabulate(cfg.walk.horizon, &actor),
                    final_value: Some(ValueTable::tabulate(cfg.walk.horizon, |x, t| {
                        critic.value(x, t)
                    })),
                    initial_kl,
                    final_kl,
                }
            })
            .collect()
    })
}

/// Convenience: PG training of a softmax circuit policy.
pub fn train_pg_pqc(cfg: &TrainConfig, spec: &CircuitSpec) -> Vec<AgentResult> {
    train_pg(cfg, |rng| SoftmaxPqcPolicy::new(spec.clone(), cfg.beta, rng))
}

/// Convenience: AC training of circuit actor and critic.
pub fn train_ac_pqc(
    cfg: &TrainConfig,
    actor_spec: &CircuitSpec,
    critic_spec: &CircuitSpec,
) -> Vec<AgentResult> {
    train_ac(
        cfg,
        |rng| SoftmaxPqcPolicy::new(actor_spec.clone(), cfg.beta, rng),
        |rng| PqcCritic::new(critic_spec.clone(), rng),
    )
}

/// Convenience: PG training of a network policy.
pub fn train_pg_nn(cfg: &TrainConfig, spec: &MlpSpec) -> Vec<AgentResult> {
    train_pg(cfg, |rng| MlpPolicy::new(spec.clone(), cfg.beta, rng))
}

/// Mean metric series across agents, padded with each agent's last value if
/// it stopped early.
pub fn mean_series(results: &[AgentResult], pick: impl Fn(&BatchMetrics) -> f64) -> Vec<f64> {
    let len = results.iter().map(|r| r.metrics.len()).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let total: f64 = results
                .iter()
                .map(|r| {
                    let m = r.metrics.get(i).or_else(|| r.metrics.last()).expect("empty metrics");
                    pick(m)
                })
                .sum();
            total / results.len() as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::UniformPolicy;
    use crate::walk::enumerate_trajectories;

    /// Minimal tabular policy for exercising the update arithmetic: one logit
    /// per (x, t), pi_up = sigmoid(logit).
    #[derive(Clone)]
    struct LogitTablePolicy {
        horizon: usize,
        logits: Vec<f64>,
    }

    impl LogitTablePolicy {
        fn new(horizon: usize) -> Self {
            Self { horizon, logits: vec![0.0; (horizon + 1) * (2 * horizon + 1)] }
        }

        fn idx(&self, x: i64, t: usize) -> usize {
            t * (2 * self.horizon + 1) + (x + self.horizon as i64) as usize
        }
    }

    impl MarkovPolicy for LogitTablePolicy {
        fn down_prob(&self, x: i64, t: usize) -> f64 {
            1.0 - self.up_prob(x, t)
        }

        fn up_prob(&self, x: i64, t: usize) -> f64 {
            1.0 / (1.0 + (-self.logits[self.idx(x, t)]).exp())
        }
    }

    impl PolicyModel for LogitTablePolicy {
        fn param_len(&self) -> usize {
            self.logits.len()
        }

        fn log_prob_grad(&self, x: i64, t: usize, action: Action) -> Vec<f64> {
            let mut grad = vec![0.0; self.logits.len()];
            let up = self.up_prob(x, t);
            grad[self.idx(x, t)] = match action {
                Action::Up => 1.0 - up,
                Action::Down => -up,
            };
            grad
        }

        fn ascend(&mut self, direction: &[f64], rates: &LearningRates) {
            for (p, d) in self.logits.iter_mut().zip(direction) {
                *p += rates.net * d;
            }
        }

        fn params_finite(&self) -> bool {
            self.logits.iter().all(|v| v.is_finite())
        }
    }

    /// Critic backed by a fixed value table; never trains.
    struct FrozenCritic(ValueTable);

    impl CriticModel for FrozenCritic {
        fn param_len(&self) -> usize {
            1
        }

        fn value(&self, x: i64, t: usize) -> f64 {
            self.0.get(x, t)
        }

        fn value_grad(&self, _x: i64, _t: usize) -> Vec<f64> {
            vec![0.0]
        }

        fn ascend(&mut self, _direction: &[f64], _rates: &LearningRates) {}

        fn params_finite(&self) -> bool {
            true
        }
    }

    fn walk_cfg(horizon: usize, tilt: f64) -> WalkConfig {
        WalkConfig::new(horizon, 0.0, tilt).unwrap()
    }

    #[test]
    fn suffix_returns_telescope() {
        let cfg = walk_cfg(12, 1.0);
        let policy = LogitTablePolicy::new(12);
        let mut rng = agent_rng(1, 0);
        for _ in 0..20 {
            let r = rollout(&policy, &cfg, &mut rng).unwrap();
            assert_eq!(r.return_suffix[12], 0.0);
            for t in 0..12 {
                let lhs = r.return_suffix[t];
                let rhs = r.steps[t].reward + r.return_suffix[t + 1];
                assert!((lhs - rhs).abs() < 1e-12);
            }
            // Total return also matches the closed tilt form.
            let probs: Vec<f64> = r.steps.iter().map(|s| s.policy_prob).collect();
            let closed =
                walk::trajectory_return_tilt_form(&cfg, &r.trajectory, &probs).unwrap();
            assert!((r.episode_return() - closed).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_rollouts_match_binomial_endpoints() {
        let cfg = walk_cfg(20, 1.0);
        let policy = LogitTablePolicy::new(20); // zero logits = uniform
        let mut rng = agent_rng(2, 0);
        let n = 100_000;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..n {
            let r = rollout(&policy, &cfg, &mut rng).unwrap();
            *counts.entry(r.trajectory.endpoint()).or_insert(0usize) += 1;
        }
        // Chi-squared over endpoints with expected count >= 5.
        let mut chi2 = 0.0;
        let mut dof = 0;
        for x in (-20..=20).step_by(2) {
            let expect = walk::endpoint_prob(&cfg, x) * n as f64;
            if expect < 5.0 {
                continue;
            }
            let got = *counts.get(&x).unwrap_or(&0) as f64;
            chi2 += (got - expect).powi(2) / expect;
            dof += 1;
        }
        // dof ~ 11; 1e-4 quantile is ~40. Deterministic seed, so this is a
        // regression check rather than a flaky bound.
        assert!(chi2 < 40.0, "chi2 {chi2} dof {dof}");
    }

    #[test]
    fn pg_update_arithmetic_is_exact() {
        let cfg = walk_cfg(2, 5.0);
        let mut policy = LogitTablePolicy::new(2);
        let mut rng = agent_rng(3, 0);
        let batch: Vec<Rollout> =
            (0..4).map(|_| rollout(&policy, &cfg, &mut rng).unwrap()).collect();
        // Hand-computed direction.
        let mut expect = vec![0.0; policy.param_len()];
        for r in &batch {
            for t in 0..2 {
                for (e, g) in expect.iter_mut().zip(&r.log_prob_grads[t]) {
                    *e += r.return_suffix[t] * g / 4.0;
                }
            }
        }
        let before = policy.logits.clone();
        pg_update(&mut policy, &batch, &LearningRates::nn(0.3), &mut Optimizer::Sgd);
        for i in 0..expect.len() {
            assert!((policy.logits[i] - before[i] - 0.3 * expect[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn pg_update_noops() {
        let cfg = walk_cfg(4, 1.0);
        let mut policy = LogitTablePolicy::new(4);
        let mut rng = agent_rng(4, 0);
        let batch: Vec<Rollout> =
            (0..3).map(|_| rollout(&policy, &cfg, &mut rng).unwrap()).collect();
        let before = policy.logits.clone();
        // Zero learning rate: unchanged.
        pg_update(&mut policy, &batch, &LearningRates::nn(0.0), &mut Optimizer::Sgd);
        assert_eq!(policy.logits, before);
        // Zero gradients: unchanged.
        let mut zeroed = batch.clone();
        for r in zeroed.iter_mut() {
            for g in r.log_prob_grads.iter_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        pg_update(&mut policy, &zeroed, &LearningRates::nn(0.5), &mut Optimizer::Sgd);
        assert_eq!(policy.logits, before);
    }

    #[test]
    fn pg_update_batch_permutation_invariance() {
        let cfg = walk_cfg(6, 2.0);
        let base = LogitTablePolicy::new(6);
        let mut rng = agent_rng(5, 0);
        let batch: Vec<Rollout> =
            (0..6).map(|_| rollout(&base, &cfg, &mut rng).unwrap()).collect();
        let mut reversed = batch.clone();
        reversed.reverse();
        let mut p1 = base.clone();
        let mut p2 = base.clone();
        pg_update(&mut p1, &batch, &LearningRates::nn(0.2), &mut Optimizer::Sgd);
        pg_update(&mut p2, &reversed, &LearningRates::nn(0.2), &mut Optimizer::Sgd);
        for (a, b) in p1.logits.iter().zip(&p2.logits) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pg_drives_bridge_probability_up_on_a_tiny_walk() {
        // T=2, large tilt: the optimal policy returns to the origin. One
        // update from a rewarded batch must increase the bridge probability.
        let cfg = walk_cfg(2, 5.0);
        let mut policy = LogitTablePolicy::new(2);
        let mut rng = agent_rng(6, 0);
        let p_before = {
            let up0 = policy.up_prob(0, 0);
            up0 * policy.down_prob(1, 1) + (1.0 - up0) * policy.up_prob(-1, 1)
        };
        for _ in 0..50 {
            let batch: Vec<Rollout> =
                (0..10).map(|_| rollout(&policy, &cfg, &mut rng).unwrap()).collect();
            pg_update(&mut policy, &batch, &LearningRates::nn(0.2), &mut Optimizer::Sgd);
        }
        let p_after = {
            let up0 = policy.up_prob(0, 0);
            up0 * policy.down_prob(1, 1) + (1.0 - up0) * policy.up_prob(-1, 1)
        };
        assert!(p_after > p_before + 0.2, "before {p_before} after {p_after}");
    }

    #[test]
    fn exact_critic_zeroes_expected_td_error() {
        // With the critic equal to the true value function of the behavior
        // policy, the action-averaged delta_td vanishes at every state.
        let cfg = walk_cfg(8, 1.0);
        let truth = oracle::exact_value_function(&cfg, &UniformPolicy).unwrap();
        let critic = FrozenCritic(truth);
        for t in 0..8 {
            for x in oracle::reachable_positions(t) {
                let mut expected_delta = 0.0;
                for action in [Action::Up, Action::Down] {
                    let x_next = x + action.value();
                    let rec = StepRecord {
                        t: t + 1,
                        x_prev: x,
                        x_next,
                        policy_prob: 0.5,
                        reward: 0.0,
                    };
                    let reward = walk::step_reward(&cfg, &rec).unwrap();
                    let delta =
                        critic.value(x_next, t + 1) + reward - critic.value(x, t);
                    expected_delta += 0.5 * delta;
                }
                assert!(expected_delta.abs() < 1e-10, "state ({x},{t}): {expected_delta}");
            }
        }
    }

    #[test]
    fn ac_update_with_zero_signal_is_a_noop() {
        let cfg = walk_cfg(4, 1.0);
        let mut actor = LogitTablePolicy::new(4);
        let mut critic = FrozenCritic(ValueTable::tabulate(4, |_, _| 0.0));
        let mut rng = agent_rng(8, 0);
        let mut batch: Vec<Rollout> =
            (0..3).map(|_| rollout(&actor, &cfg, &mut rng).unwrap()).collect();
        // Zero every reward: with a zero critic, every delta_td is zero.
        for r in batch.iter_mut() {
            for s in r.steps.iter_mut() {
                s.reward = 0.0;
            }
        }
        let before = actor.logits.clone();
        ac_update(
            &mut actor,
            &mut critic,
            &batch,
            &LearningRates::nn(0.5),
            &LearningRates::nn(0.5),
            false,
            &mut Optimizer::Sgd,
            &mut Optimizer::Sgd,
        );
        assert_eq!(actor.logits, before);
    }

    #[test]
    fn ac_with_suffix_return_coefficients_reduces_to_pg() {
        // Replacing delta_td by the suffix return in the actor sum gives the
        // PG direction; check by running ac_update with a critic rigged so
        // delta_td(t) == return_suffix[t].
        // V(x_t, t) := -suffix stored per rollout is not a function of state,
        // so instead verify the identity directly on the accumulated sums.
        let cfg = walk_cfg(6, 2.0);
        let policy = LogitTablePolicy::new(6);
        let mut rng = agent_rng(9, 0);
        let batch: Vec<Rollout> =
            (0..5).map(|_| rollout(&policy, &cfg, &mut rng).unwrap()).collect();
        let mut pg_dir = vec![0.0; policy.param_len()];
        let mut ac_like = vec![0.0; policy.param_len()];
        for r in &batch {
            for t in 0..6 {
                for (d, g) in pg_dir.iter_mut().zip(&r.log_prob_grads[t]) {
                    *d += r.return_suffix[t] * g;
                }
                // delta substituted by the suffix return.
                let delta = r.return_suffix[t];
                for (d, g) in ac_like.iter_mut().zip(&r.log_prob_grads[t]) {
                    *d += delta * g;
                }
            }
        }
        assert_eq!(pg_dir, ac_like);
    }

    #[test]
    fn ema_cases() {
        assert_eq!(ema(&[3.0, 3.0, 3.0], 0.1), vec![3.0, 3.0, 3.0]);
        assert_eq!(ema(&[1.0, 7.0, -2.0], 1.0), vec![1.0, 7.0, -2.0]);
        let s = ema(&[0.0, 10.0], 0.1);
        assert!((s[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_seeds_give_identical_metrics() {
        let mut cfg = TrainConfig::new(walk_cfg(8, 1.0));
        cfg.batches = 20;
        cfg.agents = 3;
        cfg.seed = 77;
        cfg.track_kl = true;
        let spec = CircuitSpec::one_qubit(1);
        let a = train_pg_pqc(&cfg, &spec);
        let b = train_pg_pqc(&cfg, &spec);
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.metrics, rb.metrics);
            assert_eq!(ra.initial_kl, rb.initial_kl);
            assert_eq!(ra.final_kl, rb.final_kl);
        }
        // Different agents draw different streams.
        assert_ne!(a[0].metrics, a[1].metrics);
    }

    #[test]
    fn pqc_pg_learns_on_a_small_walk() {
        let mut cfg = TrainConfig::new(walk_cfg(8, 2.0));
        cfg.batches = 400;
        cfg.agents = 3;
        cfg.seed = 5;
        cfg.rates = LearningRates::pqc(0.05, 0.05, 0.1);
        let results = train_pg_pqc(&cfg, &CircuitSpec::one_qubit(2));
        for r in &results {
            assert!(r.aborted.is_none());
        }
        let returns = mean_series(&results, |m| m.mean_return);
        let first: f64 = returns[..50].iter().sum::<f64>() / 50.0;
        let last: f64 = returns[350..].iter().sum::<f64>() / 50.0;
        assert!(last > first + 0.3, "{first} -> {last}");
    }

    #[test]
    fn reweighted_policy_rollout_statistics() {
        // A fixed tabular policy equal to P_W must reproduce the oracle's
        // bridge fraction and mean return.
        let cfg = walk_cfg(20, 1.0);
        let tables = oracle::compute_g(&cfg);
        let policy = TablePolicyModel(TablePolicy::tabulate(20, &tables));
        let mut rng = agent_rng(10, 0);
        let n = 100_000;
        let mut bridges = 0usize;
        let mut total_return = 0.0;
        for _ in 0..n {
            let r = rollout(&policy, &cfg, &mut rng).unwrap();
            bridges += r.trajectory.is_bridge() as usize;
            total_return += r.episode_return();
        }
        let frac = bridges as f64 / n as f64;
        let mean = total_return / n as f64;
        assert!((frac - 0.97).abs() < 0.01, "bridge fraction {frac}");
        assert!((mean - (-1.70)).abs() < 0.1, "mean return {mean}");
    }

    /// Table policy with the PolicyModel plumbing stubbed out, for replaying
    /// fixed dynamics through the rollout machinery.
    struct TablePolicyModel(TablePolicy);

    impl MarkovPolicy for TablePolicyModel {
        fn down_prob(&self, x: i64, t: usize) -> f64 {
            self.0.down_prob(x, t)
        }
    }

    impl PolicyModel for TablePolicyModel {
        fn param_len(&self) -> usize {
            0
        }

        fn log_prob_grad(&self, _x: i64, _t: usize, _action: Action) -> Vec<f64> {
            Vec::new()
        }

        fn ascend(&mut self, _direction: &[f64], _rates: &LearningRates) {}

        fn params_finite(&self) -> bool {
            true
        }
    }

    #[test]
    fn stop_after_bridges_halts_early() {
        let mut cfg = TrainConfig::new(walk_cfg(8, 1.0));
        cfg.batches = 500;
        cfg.agents = 1;
        cfg.stop_after_bridges = Some(5);
        let results = train_pg_pqc(&cfg, &CircuitSpec::one_qubit(1));
        assert!(results[0].metrics.len() < 500);
    }

    #[test]
    fn enumeration_sanity_for_tilted_returns() {
        // E_P[R] under the uniform policy by enumeration equals -s E[x_T^2].
        let cfg = walk_cfg(10, 0.7);
        let mut expect = 0.0;
        for traj in enumerate_trajectories(10) {
            let p = walk::trajectory_prob(&cfg, &traj).unwrap();
            expect += p * (-0.7) * (traj.endpoint() * traj.endpoint()) as f64;
        }
        assert!((expect - (-0.7 * 10.0)).abs() < 1e-9);
    }
}
