//! Softmax policy and value-function approximator on top of the circuit
//! simulator. The two action observables are O_{+1} = omega Z...Z and
//! O_{-1} = -O_{+1}, so the policy reduces to a logistic function of the
//! scaled expectation value.

use crate::oracle::MarkovPolicy;
use crate::qsim::{
    self, CircuitSpec, Gradient, Observable, ParameterSet, QsimError,
};
use crate::walk::Action;
use rand::Rng;

/// Softmax-PQC policy with inverse temperature beta.
#[derive(Debug, Clone)]
pub struct SoftmaxPqcPolicy {
    pub spec: CircuitSpec,
    pub params: ParameterSet,
    pub beta: f64,
    obs: Observable,
}

impl SoftmaxPqcPolicy {
    pub fn new(spec: CircuitSpec, beta: f64, rng: &mut impl Rng) -> Self {
        assert!(beta > 0.0, "inverse temperature must be positive");
        let params = ParameterSet::init(&spec, rng);
        let obs = Observable::z_all(&spec);
        Self { spec, params, beta, obs }
    }

    pub fn with_params(spec: CircuitSpec, params: ParameterSet, beta: f64) -> Self {
        let obs = Observable::z_all(&spec);
        Self { spec, params, beta, obs }
    }

    /// omega-scaled expectation of the up-action observable.
    pub fn logit_value(&self, x: i64, t: usize) -> f64 {
        qsim::scaled_expectation(&self.spec, &self.params, x, t, &self.obs)
            .expect("policy circuit evaluation failed")
    }

    /// (up, down) action probabilities: a max-subtracted two-way softmax over
    /// logits +-beta<O>.
    pub fn probs(&self, x: i64, t: usize) -> (f64, f64) {
        let logit = self.beta * self.logit_value(x, t);
        softmax_pair(logit)
    }

    /// Gradient of ln pi(a | x, t) over (phi, lambda, omega).
    ///
    /// With antisymmetric observables the softmax score reduces to
    /// 2 beta pi(-a) grad<O> for a = up and -2 beta pi(+a) grad<O> for down.
    pub fn log_prob_gradient(&self, x: i64, t: usize, action: Action) -> Gradient {
        let mut grad = qsim::gradient(&self.spec, &self.params, x, t, &self.obs)
            .expect("policy gradient evaluation failed");
        let (up, down) = self.probs(x, t);
        let coeff = match action {
            Action::Up => 2.0 * self.beta * down,
            Action::Down => -2.0 * self.beta * up,
        };
        grad.scale(coeff);
        grad
    }
}

/// Numerically stable (up, down) from the up-logit of an antisymmetric pair.
fn softmax_pair(logit: f64) -> (f64, f64) {
    // Subtracting the max logit keeps both exponents non-positive.
    let m = logit.abs();
    let e_up = (logit - m).exp();
    let e_down = (-logit - m).exp();
    let z = e_up + e_down;
    (e_up / z, e_down / z)
}

impl MarkovPolicy for SoftmaxPqcPolicy {
    fn down_prob(&self, x: i64, t: usize) -> f64 {
        self.probs(x, t).1
    }

    fn up_prob(&self, x: i64, t: usize) -> f64 {
        self.probs(x, t).0
    }
}

/// Value-function approximator: an independent circuit read out through its
/// own output scaling.
#[derive(Debug, Clone)]
pub struct PqcCritic {
    pub spec: CircuitSpec,
    pub params: ParameterSet,
    obs: Observable,
}

impl PqcCritic {
    pub fn new(spec: CircuitSpec, rng: &mut impl Rng) -> Self {
        let params = ParameterSet::init(&spec, rng);
        let obs = Observable::z_all(&spec);
        Self { spec, params, obs }
    }

    pub fn value(&self, x: i64, t: usize) -> f64 {
        qsim::scaled_expectation(&self.spec, &self.params, x, t, &self.obs)
            .expect("critic circuit evaluation failed")
    }

    pub fn value_gradient(&self, x: i64, t: usize) -> Result<Gradient, QsimError> {
        qsim::gradient(&self.spec, &self.params, x, t, &self.obs)
    }
}
