use std::f64::consts::PI;

use crate::circuit::{apply_pqc, embed, CircuitSpec};
use crate::error::{QsimError, Result};
use crate::state::{measure, ObservableSet};

/// Affine map `y = x·W + b` with `W` stored row-major as `in_dim × out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(QsimError::Shape(format!(
                "linear map {in_dim}→{out_dim} given {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self { in_dim, out_dim, weight, bias })
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(QsimError::Shape(format!(
                "input of length {} for a {}→{} map",
                x.len(),
                self.in_dim,
                self.out_dim
            )));
        }
        let mut y = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.weight[i * self.out_dim..(i + 1) * self.out_dim];
            for (yj, w) in y.iter_mut().zip(row) {
                *yj += xi * w;
            }
        }
        Ok(y)
    }
}

/// One QNN block on a classical vector: project down to one angle per qubit,
/// squash to `(−π, π)`, run the circuit, read `⟨Z⟩` on every qubit and project up.
pub fn qnn_forward(z: &[f64], spec: &CircuitSpec, in_proj: &Linear, out_proj: &Linear) -> Result<Vec<f64>> {
    let n = spec.layout.n_qubits();
    if in_proj.out_dim != n || out_proj.in_dim != n {
        return Err(QsimError::Shape(format!(
            "projections {}→{} and {}→{} around a {n}-qubit circuit",
            in_proj.in_dim, in_proj.out_dim, out_proj.in_dim, out_proj.out_dim
        )));
    }
    let angles: Vec<f64> = in_proj.apply(z)?.into_iter().map(|a| a.tanh() * PI).collect();
    let state = apply_pqc(&embed(&spec.layout, &angles)?, spec)?;
    let h = measure(&state, &ObservableSet::all_z(n))?;
    out_proj.apply(&h)
}
