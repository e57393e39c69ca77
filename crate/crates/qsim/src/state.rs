use num_complex::Complex64;

use crate::circuit::Axis;
use crate::error::{QsimError, Result};
use crate::MAX_QUBITS;

/// Tolerance on `‖ψ‖²` before [`measure`] refuses a state.
pub const NORM_TOLERANCE: f64 = 1e-9;

/// Amplitudes of an `n`-qubit register.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    amps: Vec<Complex64>,
}

impl StateVector {
    /// `|0…0⟩`.
    pub fn zero(n_qubits: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(QsimError::Config(format!(
                "qubit count {n_qubits} outside 1..={MAX_QUBITS}"
            )));
        }
        let mut amps = vec![Complex64::new(0.0, 0.0); 1 << n_qubits];
        amps[0] = Complex64::new(1.0, 0.0);
        Ok(Self { n_qubits, amps })
    }

    /// Wraps raw amplitudes; the length must be a power of two.
    pub fn from_amplitudes(amps: Vec<Complex64>) -> Result<Self> {
        let len = amps.len();
        if len < 2 || !len.is_power_of_two() || len.trailing_zeros() as usize > MAX_QUBITS {
            return Err(QsimError::Shape(format!("{len} amplitudes is not 2^n for 1 ≤ n ≤ {MAX_QUBITS}")));
        }
        Ok(Self { n_qubits: len.trailing_zeros() as usize, amps })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Applies `R_axis(θ) = exp(−iθσ/2)` to qubit `q`.
    pub fn rotate(&mut self, q: usize, axis: Axis, theta: f64) {
        let (s, c) = (0.5 * theta).sin_cos();
        let stride = 1usize << q;
        let amps = &mut self.amps;
        match axis {
            Axis::X => {
                let ms = Complex64::new(0.0, -s);
                for_pairs(amps.len(), stride, |i, j| {
                    let (a, b) = (amps[i], amps[j]);
                    amps[i] = a * c + b * ms;
                    amps[j] = a * ms + b * c;
                });
            }
            Axis::Y => for_pairs(amps.len(), stride, |i, j| {
                let (a, b) = (amps[i], amps[j]);
                amps[i] = a * c - b * s;
                amps[j] = a * s + b * c;
            }),
            Axis::Z => {
                let lo = Complex64::new(c, -s);
                let hi = Complex64::new(c, s);
                for_pairs(amps.len(), stride, |i, j| {
                    amps[i] *= lo;
                    amps[j] *= hi;
                });
            }
        }
    }

    /// Controlled-NOT with control `c` and target `t`.
    pub fn cnot(&mut self, c: usize, t: usize) {
        let (cm, tm) = (1usize << c, 1usize << t);
        for i in 0..self.amps.len() {
            if i & cm != 0 && i & tm == 0 {
                self.amps.swap(i, i | tm);
            }
        }
    }

    /// `⟨Z_q⟩` for every qubit.
    pub fn z_expectations(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_qubits];
        for (i, a) in self.amps.iter().enumerate() {
            let p = a.norm_sqr();
            for (q, o) in out.iter_mut().enumerate() {
                if i >> q & 1 == 0 {
                    *o += p;
                } else {
                    *o -= p;
                }
            }
        }
        out
    }

    /// Multiplies each amplitude by the eigenvalue of `Σ_q w_q Z_q` on its basis state.
    pub(crate) fn apply_weighted_z(&mut self, weights: &[f64]) {
        for (i, a) in self.amps.iter_mut().enumerate() {
            let ev: f64 = weights
                .iter()
                .enumerate()
                .map(|(q, w)| if i >> q & 1 == 0 { *w } else { -*w })
                .sum();
            *a *= ev;
        }
    }

    /// `Im⟨self|σ_axis(q)|other⟩`.
    pub(crate) fn im_pauli_overlap(&self, other: &StateVector, q: usize, axis: Axis) -> f64 {
        let (l, r) = (&self.amps, &other.amps);
        let mut acc = Complex64::new(0.0, 0.0);
        let i_unit = Complex64::new(0.0, 1.0);
        for_pairs(l.len(), 1 << q, |i, j| match axis {
            Axis::X => acc += l[i].conj() * r[j] + l[j].conj() * r[i],
            Axis::Y => acc += (l[j].conj() * r[i] - l[i].conj() * r[j]) * i_unit,
            Axis::Z => acc += l[i].conj() * r[i] - l[j].conj() * r[j],
        });
        acc.im
    }
}

/// Visits every index pair `(i, i | stride)` with the `stride` bit of `i` clear.
#[inline]
fn for_pairs(len: usize, stride: usize, mut f: impl FnMut(usize, usize)) {
    let mut base = 0;
    while base < len {
        for i in base..base + stride {
            f(i, i + stride);
        }
        base += 2 * stride;
    }
}

/// Pauli-Z observables on a subset of qubits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservableSet {
    qubits: Vec<usize>,
}

impl ObservableSet {
    /// `Z` on every qubit of an `n`-qubit register.
    pub fn all_z(n_qubits: usize) -> Self {
        Self { qubits: (0..n_qubits).collect() }
    }

    pub fn new(qubits: Vec<usize>) -> Self {
        Self { qubits }
    }

    pub fn qubits(&self) -> &[usize] {
        &self.qubits
    }
}

/// `⟨ψ|Z_q|ψ⟩` for each observed qubit.
pub fn measure(state: &StateVector, obs: &ObservableSet) -> Result<Vec<f64>> {
    let norm_sqr = state.norm_sqr();
    if (norm_sqr - 1.0).abs() > NORM_TOLERANCE {
        return Err(QsimError::NumericalDrift { norm_sqr });
    }
    if let Some(&q) = obs.qubits.iter().find(|&&q| q >= state.n_qubits) {
        return Err(QsimError::Shape(format!(
            "observable on qubit {q} of a {}-qubit state",
            state.n_qubits
        )));
    }
    let all = state.z_expectations();
    Ok(obs.qubits.iter().map(|&q| all[q].clamp(-1.0, 1.0)).collect())
}
