//! Dense statevector simulator for the data re-uploading circuits used by the
//! policies, with exact expectation values and parameter-shift gradients.
//!
//! Rotation convention: R_P(a) = exp(-i a P / 2), so that
//! R_x(a)|0> = (cos(a/2), -i sin(a/2)).
//!
//! Circuit structure per data-uploading layer:
//! - one-qubit layout: Rx(t') -> Ry,Rz -> Rx(x') -> Ry,Rz, all on one wire;
//! - two-qubit layout (per copy): Rx(x') on the even wire and Rx(t') on the
//!   odd wire, then Ry,Rz on each wire, then CZ entanglers: one inside each
//!   copy plus a ring across copy boundaries.

use num_complex::Complex64;
use rand::Rng;
use thiserror::Error;

/// Hard cap on the simulator size; everything in this crate uses at most 8.
pub const MAX_QUBITS: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum QsimError {
    #[error("parameter set has {got} {class} parameters, spec wants {want}")]
    ShapeMismatch { class: &'static str, got: usize, want: usize },
    #[error("circuit would need {0} qubits, the simulator caps at {MAX_QUBITS}")]
    TooManyQubits(usize),
    #[error("error rate must lie in [0, 1], got {0}")]
    BadErrorRate(f64),
}

/// Wire arrangement of the encoding gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Position and time share one wire, uploaded sequentially.
    OneQubit,
    /// Position on even wires, time on odd wires, `copies` two-qubit blocks.
    TwoQubit,
}

/// Which gate families are active. Deactivated gates become identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateToggles {
    pub rx_encoding: bool,
    pub ry_variational: bool,
    pub rz_variational: bool,
    pub cz_entangler: bool,
    /// Trainable arctan input scaling; off pins every lambda to 1.
    pub input_scaling: bool,
    /// Trainable output scaling; off pins omega to 1.
    pub output_scaling: bool,
}

impl Default for GateToggles {
    fn default() -> Self {
        Self {
            rx_encoding: true,
            ry_variational: true,
            rz_variational: true,
            cz_entangler: true,
            input_scaling: true,
            output_scaling: true,
        }
    }
}

/// Circuit architecture: layout, depth, copies, and gate toggles.
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitSpec {
    pub layout: Layout,
    pub layers: usize,
    /// Number of entangled two-qubit blocks (two-qubit layout only).
    pub copies: usize,
    pub toggles: GateToggles,
    /// Additive coherent-error offsets, one per encoding gate; empty = none.
    pub encoding_offsets: Vec<f64>,
}

impl CircuitSpec {
    pub fn one_qubit(layers: usize) -> Self {
        Self {
            layout: Layout::OneQubit,
            layers,
            copies: 1,
            toggles: GateToggles::default(),
            encoding_offsets: Vec::new(),
        }
    }

    pub fn two_qubit(layers: usize) -> Self {
        Self::two_qubit_copies(layers, 1)
    }

    pub fn two_qubit_copies(layers: usize, copies: usize) -> Self {
        Self {
            layout: Layout::TwoQubit,
            layers,
            copies,
            toggles: GateToggles::default(),
            encoding_offsets: Vec::new(),
        }
    }

    pub fn n_qubits(&self) -> usize {
        match self.layout {
            Layout::OneQubit => 1,
            Layout::TwoQubit => 2 * self.copies,
        }
    }

    /// Number of encoding gates over the whole circuit, layer-major.
    pub fn encoding_gate_count(&self) -> usize {
        match self.layout {
            Layout::OneQubit => 2 * self.layers,
            Layout::TwoQubit => 2 * self.copies * self.layers,
        }
    }

    /// Number of variational rotation angles.
    pub fn phi_count(&self) -> usize {
        // Both layouts: two variational rotations per encoding gate slot.
        2 * self.encoding_gate_count()
    }

    pub fn lambda_count(&self) -> usize {
        self.encoding_gate_count()
    }

    /// Total trainable parameter count (phi + lambda + omega).
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        if self.toggles.ry_variational {
            n += self.phi_count() / 2;
        }
        if self.toggles.rz_variational {
            n += self.phi_count() / 2;
        }
        if self.toggles.input_scaling && self.toggles.rx_encoding {
            n += self.lambda_count();
        }
        if self.toggles.output_scaling {
            n += 1;
        }
        n
    }

    fn validate(&self) -> Result<(), QsimError> {
        if self.n_qubits() > MAX_QUBITS {
            return Err(QsimError::TooManyQubits(self.n_qubits()));
        }
        if !self.encoding_offsets.is_empty()
            && self.encoding_offsets.len() != self.encoding_gate_count()
        {
            return Err(QsimError::ShapeMismatch {
                class: "encoding offset",
                got: self.encoding_offsets.len(),
                want: self.encoding_gate_count(),
            });
        }
        Ok(())
    }

    fn offset(&self, gate: usize) -> f64 {
        if self.encoding_offsets.is_empty() {
            0.0
        } else {
            self.encoding_offsets[gate]
        }
    }
}

/// Trainable parameters: rotation angles, input scalings, output scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub phi: Vec<f64>,
    pub lambda: Vec<f64>,
    pub omega: f64,
}

impl ParameterSet {
    /// Paper initialization: phi uniform on [0, 2pi), lambda and omega at 1.
    pub fn init(spec: &CircuitSpec, rng: &mut impl Rng) -> Self {
        let phi = (0..spec.phi_count())
            .map(|_| rng.gen::<f64>() * std::f64::consts::TAU)
            .collect();
        Self { phi, lambda: vec![1.0; spec.lambda_count()], omega: 1.0 }
    }

    pub fn zeros(spec: &CircuitSpec) -> Self {
        Self { phi: vec![0.0; spec.phi_count()], lambda: vec![1.0; spec.lambda_count()], omega: 1.0 }
    }

    fn validate(&self, spec: &CircuitSpec) -> Result<(), QsimError> {
        if self.phi.len() != spec.phi_count() {
            return Err(QsimError::ShapeMismatch {
                class: "phi",
                got: self.phi.len(),
                want: spec.phi_count(),
            });
        }
        if self.lambda.len() != spec.lambda_count() {
            return Err(QsimError::ShapeMismatch {
                class: "lambda",
                got: self.lambda.len(),
                want: spec.lambda_count(),
            });
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.phi.iter().chain(self.lambda.iter()).all(|v| v.is_finite()) && self.omega.is_finite()
    }
}

/// Gradient of an expectation value with respect to each parameter class.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub phi: Vec<f64>,
    pub lambda: Vec<f64>,
    pub omega: f64,
}

impl Gradient {
    pub fn zeros(spec: &CircuitSpec) -> Self {
        Self { phi: vec![0.0; spec.phi_count()], lambda: vec![0.0; spec.lambda_count()], omega: 0.0 }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.phi.iter_mut().chain(self.lambda.iter_mut()) {
            *v *= factor;
        }
        self.omega *= factor;
    }
}

/// Dense complex amplitudes over 2^n basis states.
#[derive(Debug, Clone)]
pub struct StateVector {
    amps: Vec<Complex64>,
    n_qubits: usize,
}

impl StateVector {
    /// |0...0>.
    pub fn zero_state(n_qubits: usize) -> Self {
        assert!(n_qubits <= MAX_QUBITS);
        let mut amps = vec![Complex64::ZERO; 1 << n_qubits];
        amps[0] = Complex64::ONE;
        Self { amps, n_qubits }
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn norm_sq(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn apply_rx(&mut self, qubit: usize, angle: f64) {
        let (c, s) = ((angle / 2.0).cos(), (angle / 2.0).sin());
        let is = Complex64::new(0.0, -s);
        self.apply_pairwise(qubit, |a0, a1| (c * a0 + is * a1, is * a0 + c * a1));
    }

    pub fn apply_ry(&mut self, qubit: usize, angle: f64) {
        let (c, s) = ((angle / 2.0).cos(), (angle / 2.0).sin());
        self.apply_pairwise(qubit, |a0, a1| (c * a0 - s * a1, s * a0 + c * a1));
    }

    pub fn apply_rz(&mut self, qubit: usize, angle: f64) {
        let phase0 = Complex64::from_polar(1.0, -angle / 2.0);
        let phase1 = Complex64::from_polar(1.0, angle / 2.0);
        self.apply_pairwise(qubit, |a0, a1| (phase0 * a0, phase1 * a1));
    }

    pub fn apply_cz(&mut self, q1: usize, q2: usize) {
        let mask = (1usize << q1) | (1 << q2);
        for (i, amp) in self.amps.iter_mut().enumerate() {
            if i & mask == mask {
                *amp = -*amp;
            }
        }
    }

    fn apply_pairwise(
        &mut self,
        qubit: usize,
        f: impl Fn(Complex64, Complex64) -> (Complex64, Complex64),
    ) {
        let bit = 1usize << qubit;
        for i in 0..self.amps.len() {
            if i & bit == 0 {
                let (a0, a1) = (self.amps[i], self.amps[i | bit]);
                let (b0, b1) = f(a0, a1);
                self.amps[i] = b0;
                self.amps[i | bit] = b1;
            }
        }
    }
}

/// Tensor product of Pauli-Z over a set of wires.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observable {
    mask: usize,
}

impl Observable {
    pub fn z_product(support: &[usize]) -> Self {
        assert!(!support.is_empty(), "observable needs a nonempty support");
        let mut mask = 0usize;
        for &q in support {
            assert!(q < MAX_QUBITS);
            mask |= 1 << q;
        }
        Self { mask }
    }

    /// Z on every wire of the circuit.
    pub fn z_all(spec: &CircuitSpec) -> Self {
        Self::z_product(&(0..spec.n_qubits()).collect::<Vec<_>>())
    }
}

/// <state| Z-product |state>; real, in [-1, 1].
pub fn expectation(state: &StateVector, obs: &Observable) -> f64 {
    debug_assert!(obs.mask < 1 << state.n_qubits);
    state
        .amps
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let sign = if (i & obs.mask).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            sign * a.norm_sqr()
        })
        .sum()
}

/// Arctan input encoding: bounded in (-pi/2, pi/2) for any input magnitude.
pub fn encode_input(value: f64, lambda: f64) -> f64 {
    (value * lambda).atan()
}

/// Per-encoding-gate angles for the state (x, t) under arctan scaling.
fn encoding_angles(spec: &CircuitSpec, params: &ParameterSet, x: f64, t: f64) -> Vec<f64> {
    (0..spec.encoding_gate_count())
        .map(|g| {
            let value = if gate_encodes_x(spec, g) { x } else { t };
            let lambda = if spec.toggles.input_scaling { params.lambda[g] } else { 1.0 };
            encode_input(value, lambda) + spec.offset(g)
        })
        .collect()
}

/// Whether encoding gate `g` (layer-major index) uploads the position.
fn gate_encodes_x(spec: &CircuitSpec, g: usize) -> bool {
    match spec.layout {
        // Within a one-qubit layer: t first, then x.
        Layout::OneQubit => g % 2 == 1,
        // Within a two-qubit layer: x on the even wire of each copy.
        Layout::TwoQubit => g % 2 == 0,
    }
}

/// Runs the circuit with explicit per-encoding-gate angles.
fn run_with_angles(spec: &CircuitSpec, phi: &[f64], enc_angles: &[f64]) -> StateVector {
    let n = spec.n_qubits();
    let mut state = StateVector::zero_state(n);
    let t = &spec.toggles;
    let mut phi = phi.iter().copied();
    let mut next_phi = || phi.next().expect("phi exhausted");

    match spec.layout {
        Layout::OneQubit => {
            for layer in 0..spec.layers {
                for half in 0..2 {
                    if t.rx_encoding {
                        state.apply_rx(0, enc_angles[2 * layer + half]);
                    }
                    let (ry, rz) = (next_phi(), next_phi());
                    if t.ry_variational {
                        state.apply_ry(0, ry);
                    }
                    if t.rz_variational {
                        state.apply_rz(0, rz);
                    }
                }
            }
        }
        Layout::TwoQubit => {
            let wires = 2 * spec.copies;
            for layer in 0..spec.layers {
                if t.rx_encoding {
                    for w in 0..wires {
                        state.apply_rx(w, enc_angles[layer * wires + w]);
                    }
                }
                for w in 0..wires {
                    let (ry, rz) = (next_phi(), next_phi());
                    if t.ry_variational {
                        state.apply_ry(w, ry);
                    }
                    if t.rz_variational {
                        state.apply_rz(w, rz);
                    }
                }
                if t.cz_entangler {
                    for c in 0..spec.copies {
                        state.apply_cz(2 * c, 2 * c + 1);
                    }
                    if spec.copies > 1 {
                        for c in 0..spec.copies {
                            state.apply_cz(2 * c + 1, (2 * c + 2) % wires);
                        }
                    }
                }
            }
        }
    }
    debug_assert!((state.norm_sq() - 1.0).abs() < 1e-12);
    state
}

/// Runs the circuit on the walk state (x, t) with arctan input encoding.
pub fn run_circuit(
    spec: &CircuitSpec,
    params: &ParameterSet,
    x: i64,
    t: usize,
) -> Result<StateVector, QsimError> {
    spec.validate()?;
    params.validate(spec)?;
    let angles = encoding_angles(spec, params, x as f64, t as f64);
    Ok(run_with_angles(spec, &params.phi, &angles))
}

/// Runs the circuit with raw encoding angles, the same pair in every layer.
/// This is the band-limited regime the Fourier analysis works in.
pub fn run_circuit_raw(
    spec: &CircuitSpec,
    params: &ParameterSet,
    x_angle: f64,
    t_angle: f64,
) -> Result<StateVector, QsimError> {
    spec.validate()?;
    params.validate(spec)?;
    let angles: Vec<f64> = (0..spec.encoding_gate_count())
        .map(|g| if gate_encodes_x(spec, g) { x_angle } else { t_angle } + spec.offset(g))
        .collect();
    Ok(run_with_angles(spec, &params.phi, &angles))
}

fn omega_factor(spec: &CircuitSpec, params: &ParameterSet) -> f64 {
    if spec.toggles.output_scaling {
        params.omega
    } else {
        1.0
    }
}

/// Expectation of the observable before output scaling.
pub fn raw_expectation(
    spec: &CircuitSpec,
    params: &ParameterSet,
    x: i64,
    t: usize,
    obs: &Observable,
) -> Result<f64, QsimError> {
    Ok(expectation(&run_circuit(spec, params, x, t)?, obs))
}

/// omega-scaled expectation <O> = omega <Z...Z>.
pub fn scaled_expectation(
    spec: &CircuitSpec,
    params: &ParameterSet,
    x: i64,
    t: usize,
    obs: &Observable,
) -> Result<f64, QsimError> {
    Ok(omega_factor(spec, params) * raw_expectation(spec, params, x, t, obs)?)
}

/// Exact gradient of the omega-scaled expectation.
///
/// Rotation angles use the parameter-shift rule (+-pi/2 shifts, halved
/// difference). Input scalings chain the shift on the encoding angle through
/// d arctan(v lambda)/d lambda = v / (1 + (v lambda)^2). The omega component
/// is the unscaled expectation.
pub fn gradient(
    spec: &CircuitSpec,
    params: &ParameterSet,
    x: i64,
    t: usize,
    obs: &Observable,
) -> Result<Gradient, QsimError> {
    spec.validate()?;
    params.validate(spec)?;
    const SHIFT: f64 = std::f64::consts::FRAC_PI_2;
    let mut grad = Gradient::zeros(spec);
    let omega = omega_factor(spec, params);
    let base_angles = encoding_angles(spec, params, x as f64, t as f64);

    let mut phi = params.phi.clone();
    for i in 0..phi.len() {
        if !phi_active(spec, i) {
            continue;
        }
        phi[i] = params.phi[i] + SHIFT;
        let plus = expectation(&run_with_angles(spec, &phi, &base_angles), obs);
        phi[i] = params.phi[i] - SHIFT;
        let minus = expectation(&run_with_angles(spec, &phi, &base_angles), obs);
        phi[i] = params.phi[i];
        grad.phi[i] = omega * (plus - minus) / 2.0;
    }

    if spec.toggles.input_scaling && spec.toggles.rx_encoding {
        let mut angles = base_angles.clone();
        for g in 0..angles.len() {
            let value = if gate_encodes_x(spec, g) { x as f64 } else { t as f64 };
            let lambda = params.lambda[g];
            let chain = value / (1.0 + (value * lambda).powi(2));
            if chain == 0.0 {
                continue;
            }
            angles[g] = base_angles[g] + SHIFT;
            let plus = expectation(&run_with_angles(spec, &params.phi, &angles), obs);
            angles[g] = base_angles[g] - SHIFT;
            let minus = expectation(&run_with_angles(spec, &params.phi, &angles), obs);
            angles[g] = base_angles[g];
            grad.lambda[g] = omega * chain * (plus - minus) / 2.0;
        }
    }

    if spec.toggles.output_scaling {
        grad.omega = expectation(&run_with_angles(spec, &params.phi, &base_angles), obs);
    }
    Ok(grad)
}

/// Whether the i-th rotation angle is active under the toggles. Angles come
/// in (Ry, Rz) pairs.
fn phi_active(spec: &CircuitSpec, i: usize) -> bool {
    if i % 2 == 0 {
        spec.toggles.ry_variational
    } else {
        spec.toggles.rz_variational
    }
}

/// Returns a copy of the circuit where each encoding gate picked up, with
/// probability `rate`, an additive angle perturbation ~ N(0, sigma).
pub fn inject_coherent_error(
    spec: &CircuitSpec,
    rate: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<CircuitSpec, QsimError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(QsimError::BadErrorRate(rate));
    }
    let mut perturbed = spec.clone();
    perturbed.encoding_offsets = (0..spec.encoding_gate_count())
        .map(|g| {
            let base = spec.offset(g);
            if rng.gen::<f64>() < rate {
                base + sigma * normal_sample(rng)
            } else {
                base
            }
        })
        .collect();
    Ok(perturbed)
}

/// Standard normal via Box-Muller; rand_distr would be a dependency for one
/// distribution.
fn normal_sample(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
