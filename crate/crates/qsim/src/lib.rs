//! Dense statevector simulation of the variational circuits used as
//! quantum neural network (QNN) blocks.
//!
//! A block encodes a classical vector as single-qubit rotation angles, applies
//! `n_layers` of trainable `Rx·Ry·Rz` rotations on every qubit followed by a
//! CNOT entangler, and reads out `⟨Z_i⟩` on every qubit. Qubit `q` is bit `q`
//! of the amplitude index.
//!
//! Gradients are available two ways: the parameter-shift rule (two circuit
//! evaluations per angle) and an adjoint sweep that returns the gradient of a
//! weighted sum of `⟨Z_i⟩` with respect to every embedding and trainable angle
//! in one backward pass.

mod circuit;
mod error;
mod qnn;
mod state;

pub use circuit::{
    adjoint_grads, apply_pqc, apply_pqc_inverse, embed, param_shift_grad, simulate, AdjointGrads,
    AngleSource, Axis, CircuitLayout, CircuitSpec, Entangler, Gate, LAYER_AXES,
};
pub use error::{QsimError, Result};
pub use qnn::{qnn_forward, Linear};
pub use state::{measure, ObservableSet, StateVector};

/// Largest register the simulator accepts.
pub const MAX_QUBITS: usize = 20;
