use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{QsimError, Result};
use crate::state::{measure, ObservableSet, StateVector};
use crate::MAX_QUBITS;

/// Rotation axis of a single-qubit gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Trainable rotations applied to each qubit in every layer, in order.
pub const LAYER_AXES: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

/// Named entangler topologies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Entangler {
    /// CNOT from qubit `i` to `(i + 1) mod n` for every `i`.
    Ring,
    /// CNOT from qubit `i` to `i + 1` for `i < n − 1`.
    Line,
}

impl Entangler {
    pub fn placements(self, n_qubits: usize) -> Vec<(usize, usize)> {
        match self {
            Entangler::Ring => (0..n_qubits)
                .map(|i| (i, (i + 1) % n_qubits))
                .filter(|(c, t)| c != t)
                .collect(),
            Entangler::Line => (0..n_qubits.saturating_sub(1)).map(|i| (i, i + 1)).collect(),
        }
    }
}

/// Where a rotation gate takes its angle from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngleSource {
    Input(usize),
    Theta(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Rotation { qubit: usize, axis: Axis, angle: AngleSource },
    Cnot { control: usize, target: usize },
}

/// Structure of a QNN circuit, independent of its angles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CircuitLayout {
    n_qubits: usize,
    n_layers: usize,
    embedding: Vec<Axis>,
    entangler: Vec<(usize, usize)>,
    gates: Vec<Gate>,
}

impl CircuitLayout {
    /// `R_y` embedding on every qubit and the given entangler after each layer.
    pub fn new(n_qubits: usize, n_layers: usize, entangler: Entangler) -> Result<Self> {
        Self::with_parts(
            vec![Axis::Y; n_qubits],
            n_layers,
            entangler.placements(n_qubits),
        )
    }

    pub fn with_parts(
        embedding: Vec<Axis>,
        n_layers: usize,
        entangler: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let n_qubits = embedding.len();
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(QsimError::Config(format!(
                "qubit count {n_qubits} outside 1..={MAX_QUBITS}"
            )));
        }
        if let Some(&(c, t)) = entangler.iter().find(|&&(c, t)| c >= n_qubits || t >= n_qubits || c == t) {
            return Err(QsimError::Config(format!("invalid CNOT placement ({c}, {t})")));
        }
        let mut gates: Vec<Gate> = embedding
            .iter()
            .enumerate()
            .map(|(q, &axis)| Gate::Rotation { qubit: q, axis, angle: AngleSource::Input(q) })
            .collect();
        let mut k = 0;
        for _ in 0..n_layers {
            for q in 0..n_qubits {
                for axis in LAYER_AXES {
                    gates.push(Gate::Rotation { qubit: q, axis, angle: AngleSource::Theta(k) });
                    k += 1;
                }
            }
            gates.extend(entangler.iter().map(|&(control, target)| Gate::Cnot { control, target }));
        }
        Ok(Self { n_qubits, n_layers, embedding, entangler, gates })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn embedding(&self) -> &[Axis] {
        &self.embedding
    }

    pub fn entangler(&self) -> &[(usize, usize)] {
        &self.entangler
    }

    /// Number of trainable angles: `n_layers × n_qubits × 3`.
    pub fn num_params(&self) -> usize {
        self.n_layers * self.n_qubits * LAYER_AXES.len()
    }

    /// Embedding gates followed by the trainable layers.
    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    fn check(&self, inputs: &[f64], theta: &[f64]) -> Result<()> {
        if inputs.len() != self.n_qubits {
            return Err(QsimError::Shape(format!(
                "{} embedding angles for {} qubits",
                inputs.len(),
                self.n_qubits
            )));
        }
        if theta.len() != self.num_params() {
            return Err(QsimError::Shape(format!(
                "{} angles for a circuit with {} parameters",
                theta.len(),
                self.num_params()
            )));
        }
        Ok(())
    }
}

/// A layout together with its trainable angles.
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitSpec {
    pub layout: CircuitLayout,
    pub theta: Vec<f64>,
}

impl CircuitSpec {
    pub fn new(layout: CircuitLayout, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != layout.num_params() {
            return Err(QsimError::Shape(format!(
                "{} angles for a circuit with {} parameters",
                theta.len(),
                layout.num_params()
            )));
        }
        Ok(Self { layout, theta })
    }
}

fn angle(src: AngleSource, inputs: &[f64], theta: &[f64]) -> f64 {
    match src {
        AngleSource::Input(i) => inputs[i],
        AngleSource::Theta(k) => theta[k],
    }
}

fn apply_gate(state: &mut StateVector, gate: Gate, inputs: &[f64], theta: &[f64], sign: f64) {
    match gate {
        Gate::Rotation { qubit, axis, angle: src } => {
            state.rotate(qubit, axis, sign * angle(src, inputs, theta))
        }
        Gate::Cnot { control, target } => state.cnot(control, target),
    }
}

/// Encodes `z` by rotating qubit `i` of `|0…0⟩` by `z_i` about its embedding axis.
pub fn embed(layout: &CircuitLayout, z: &[f64]) -> Result<StateVector> {
    if z.len() != layout.n_qubits {
        return Err(QsimError::Shape(format!(
            "{} embedding angles for {} qubits",
            z.len(),
            layout.n_qubits
        )));
    }
    let mut state = StateVector::zero(layout.n_qubits)?;
    for (q, (&axis, &a)) in layout.embedding.iter().zip(z).enumerate() {
        state.rotate(q, axis, a);
    }
    Ok(state)
}

fn trainable_gates(layout: &CircuitLayout) -> &[Gate] {
    &layout.gates[layout.n_qubits..]
}

/// Applies the trainable layers to `state`.
pub fn apply_pqc(state: &StateVector, spec: &CircuitSpec) -> Result<StateVector> {
    if state.n_qubits() != spec.layout.n_qubits {
        return Err(QsimError::Shape(format!(
            "{}-qubit state for a {}-qubit circuit",
            state.n_qubits(),
            spec.layout.n_qubits
        )));
    }
    let mut out = state.clone();
    for &g in trainable_gates(&spec.layout) {
        apply_gate(&mut out, g, &[], &spec.theta, 1.0);
    }
    Ok(out)
}

/// Undoes [`apply_pqc`].
pub fn apply_pqc_inverse(state: &StateVector, spec: &CircuitSpec) -> Result<StateVector> {
    if state.n_qubits() != spec.layout.n_qubits {
        return Err(QsimError::Shape(format!(
            "{}-qubit state for a {}-qubit circuit",
            state.n_qubits(),
            spec.layout.n_qubits
        )));
    }
    let mut out = state.clone();
    for &g in trainable_gates(&spec.layout).iter().rev() {
        apply_gate(&mut out, g, &[], &spec.theta, -1.0);
    }
    Ok(out)
}

/// Embedding followed by the trainable layers.
pub fn simulate(layout: &CircuitLayout, inputs: &[f64], theta: &[f64]) -> Result<StateVector> {
    layout.check(inputs, theta)?;
    let mut state = StateVector::zero(layout.n_qubits)?;
    for &g in &layout.gates {
        apply_gate(&mut state, g, inputs, theta, 1.0);
    }
    Ok(state)
}

/// Parameter-shift gradient of `⟨Z_observable⟩` with respect to every trainable angle.
pub fn param_shift_grad(z: &[f64], spec: &CircuitSpec, observable: usize) -> Result<Vec<f64>> {
    let obs = ObservableSet::new(vec![observable]);
    let f = |theta: &[f64]| -> Result<f64> {
        Ok(measure(&simulate(&spec.layout, z, theta)?, &obs)?[0])
    };
    let mut theta = spec.theta.clone();
    (0..theta.len())
        .map(|k| {
            let orig = theta[k];
            theta[k] = orig + FRAC_PI_2;
            let plus = f(&theta)?;
            theta[k] = orig - FRAC_PI_2;
            let minus = f(&theta)?;
            theta[k] = orig;
            Ok(0.5 * (plus - minus))
        })
        .collect()
}

/// Result of an adjoint sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointGrads {
    /// `⟨Z_q⟩` for every qubit.
    pub expectations: Vec<f64>,
    /// Derivative of `Σ_q w_q⟨Z_q⟩` with respect to each embedding angle.
    pub grad_inputs: Vec<f64>,
    /// Derivative of `Σ_q w_q⟨Z_q⟩` with respect to each trainable angle.
    pub grad_theta: Vec<f64>,
}

/// Exact gradients of `Σ_q weights_q ⟨Z_q⟩` by reverse traversal of the gate list.
///
/// With `ψ_k` the state after gate `k` and `λ_k` the weighted observable applied
/// to the final state and pulled back to the same point, a rotation
/// `exp(−iθσ/2)` contributes `Im⟨λ_k|σ|ψ_k⟩`.
pub fn adjoint_grads(
    layout: &CircuitLayout,
    inputs: &[f64],
    theta: &[f64],
    weights: &[f64],
) -> Result<AdjointGrads> {
    if weights.len() != layout.n_qubits {
        return Err(QsimError::Shape(format!(
            "{} observable weights for {} qubits",
            weights.len(),
            layout.n_qubits
        )));
    }
    let mut psi = simulate(layout, inputs, theta)?;
    let expectations = psi.z_expectations();
    let mut lambda = psi.clone();
    lambda.apply_weighted_z(weights);
    let mut grad_inputs = vec![0.0; layout.n_qubits];
    let mut grad_theta = vec![0.0; theta.len()];
    for &g in layout.gates.iter().rev() {
        if let Gate::Rotation { qubit, axis, angle: src } = g {
            let d = lambda.im_pauli_overlap(&psi, qubit, axis);
            match src {
                AngleSource::Input(i) => grad_inputs[i] += d,
                AngleSource::Theta(k) => grad_theta[k] += d,
            }
        }
        apply_gate(&mut psi, g, inputs, theta, -1.0);
        apply_gate(&mut lambda, g, inputs, theta, -1.0);
    }
    Ok(AdjointGrads { expectations, grad_inputs, grad_theta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn ry_only(theta: f64) -> CircuitSpec {
        // one qubit, one trainable Ry: use a layout whose X and Z angles are zero
        let layout = CircuitLayout::new(1, 1, Entangler::Ring).unwrap();
        CircuitSpec::new(layout, vec![0.0, theta, 0.0]).unwrap()
    }

    #[test]
    fn zero_embedding_is_ground_state() {
        let layout = CircuitLayout::new(3, 1, Entangler::Ring).unwrap();
        let s = embed(&layout, &[0.0; 3]).unwrap();
        assert_eq!(s, StateVector::zero(3).unwrap());
    }

    #[test]
    fn pi_embedding_flips_qubit() {
        let layout = CircuitLayout::new(1, 1, Entangler::Ring).unwrap();
        let s = embed(&layout, &[PI]).unwrap();
        assert!(s.amplitudes()[0].norm() < 1e-15);
        assert!((s.amplitudes()[1].norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn half_pi_embedding_amplitudes() {
        let layout = CircuitLayout::new(1, 1, Entangler::Ring).unwrap();
        let s = embed(&layout, &[PI / 2.0]).unwrap();
        let r = (PI / 4.0).cos();
        assert!((s.amplitudes()[0].re - r).abs() < 1e-15);
        assert!((s.amplitudes()[1].re - (PI / 4.0).sin()).abs() < 1e-15);
    }

    #[test]
    fn embedding_length_mismatch() {
        let layout = CircuitLayout::new(2, 1, Entangler::Ring).unwrap();
        assert!(matches!(embed(&layout, &[0.0; 3]), Err(QsimError::Shape(_))));
    }

    #[test]
    fn zero_angles_leave_ground_state() {
        let layout = CircuitLayout::new(4, 3, Entangler::Ring).unwrap();
        let spec = CircuitSpec::new(layout.clone(), vec![0.0; layout.num_params()]).unwrap();
        let out = apply_pqc(&StateVector::zero(4).unwrap(), &spec).unwrap();
        assert_eq!(out, StateVector::zero(4).unwrap());
    }

    #[test]
    fn pqc_dimension_mismatch() {
        let layout = CircuitLayout::new(2, 1, Entangler::Ring).unwrap();
        let spec = CircuitSpec::new(layout.clone(), vec![0.1; layout.num_params()]).unwrap();
        assert!(matches!(apply_pqc(&StateVector::zero(3).unwrap(), &spec), Err(QsimError::Shape(_))));
        assert!(CircuitSpec::new(layout, vec![0.0; 5]).is_err());
    }

    #[test]
    fn invalid_layouts() {
        assert!(CircuitLayout::new(0, 1, Entangler::Ring).is_err());
        assert!(CircuitLayout::new(MAX_QUBITS + 1, 1, Entangler::Ring).is_err());
        assert!(CircuitLayout::with_parts(vec![Axis::Y; 2], 1, vec![(0, 2)]).is_err());
        assert!(CircuitLayout::with_parts(vec![Axis::Y; 2], 1, vec![(1, 1)]).is_err());
    }

    #[test]
    fn ring_placements() {
        assert_eq!(Entangler::Ring.placements(1), vec![]);
        assert_eq!(Entangler::Ring.placements(2), vec![(0, 1), (1, 0)]);
        assert_eq!(Entangler::Ring.placements(3), vec![(0, 1), (1, 2), (2, 0)]);
        assert_eq!(Entangler::Line.placements(3), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn default_block_has_ninety_angles() {
        assert_eq!(CircuitLayout::new(6, 5, Entangler::Ring).unwrap().num_params(), 90);
    }

    #[test]
    fn param_shift_on_single_ry() {
        let g0 = param_shift_grad(&[0.0], &ry_only(0.0), 0).unwrap();
        assert!(g0[1].abs() < 1e-15);
        let g1 = param_shift_grad(&[0.0], &ry_only(PI / 2.0), 0).unwrap();
        assert!((g1[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn adjoint_matches_param_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 1..=4 {
            let layout = CircuitLayout::new(n, 2, Entangler::Ring).unwrap();
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-PI..PI)).collect();
            let theta: Vec<f64> = (0..layout.num_params()).map(|_| rng.gen_range(-PI..PI)).collect();
            let spec = CircuitSpec::new(layout.clone(), theta.clone()).unwrap();
            for obs in 0..n {
                let mut w = vec![0.0; n];
                w[obs] = 1.0;
                let adj = adjoint_grads(&layout, &z, &theta, &w).unwrap();
                let ps = param_shift_grad(&z, &spec, obs).unwrap();
                for (a, p) in adj.grad_theta.iter().zip(&ps) {
                    assert!((a - p).abs() < 1e-12, "{a} vs {p}");
                }
            }
        }
    }

    #[test]
    fn adjoint_input_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let layout = CircuitLayout::new(3, 2, Entangler::Ring).unwrap();
        let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-PI..PI)).collect();
        let theta: Vec<f64> = (0..layout.num_params()).map(|_| rng.gen_range(-PI..PI)).collect();
        let w = [0.3, -1.2, 0.7];
        let f = |z: &[f64]| -> f64 {
            let e = simulate(&layout, z, &theta).unwrap().z_expectations();
            e.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let adj = adjoint_grads(&layout, &z, &theta, &w).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!((fd - adj.grad_inputs[i]).abs() < 1e-8);
        }
    }
}
