//! Instance-level value network on the shared encoder output.
//!
//! Per-node layers (ReLU affine maps, or projection → parallel circuit blocks
//! → projection), then a 1-D convolution along the node axis with zero
//! padding and ReLU, a mean over nodes and an affine map to one scalar.

use std::sync::Arc;

use rand::Rng;

use qroute_qsim::CircuitLayout;

use crate::config::Config;
use crate::encoder::{Embeddings, QnnSite};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub enum CriticLayer {
    Classical { w: ParamId, b: ParamId },
    Quantum(QnnSite),
}

#[derive(Debug, Clone)]
pub struct CriticParams {
    pub layers: Vec<CriticLayer>,
    /// One `c_in × c_out` kernel slice per offset `−r..=r`.
    pub conv: Vec<ParamId>,
    pub conv_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl CriticParams {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &Config, rng: &mut R) -> Self {
        let c = &cfg.critic;
        let d = cfg.encoder.d_x;
        let quantum = cfg.critic_is_quantum();
        let layout = Arc::new(
            CircuitLayout::new(cfg.qsim.n_qubits, cfg.qsim.n_layers, cfg.qsim.entangler)
                .expect("validated circuit configuration"),
        );
        let width = if quantum { c.qnn_blocks * cfg.qsim.n_qubits } else { d };
        let mut d_in = d;
        let layers = (0..c.layers)
            .map(|l| {
                let p = format!("critic/layer{l}");
                let layer = if quantum {
                    CriticLayer::Quantum(QnnSite::register(store, &p, d_in, c.qnn_blocks, width, &layout, rng))
                } else {
                    CriticLayer::Classical {
                        w: store.add_uniform(format!("{p}/w"), d_in, width, d_in, rng),
                        b: store.add_uniform(format!("{p}/b"), 1, width, d_in, rng),
                    }
                };
                d_in = width;
                layer
            })
            .collect();
        let fan = d_in * c.kernel_width;
        let conv = (0..c.kernel_width)
            .map(|k| store.add_uniform(format!("critic/conv/w{k}"), d_in, c.conv_channels, fan, rng))
            .collect();
        let conv_b = store.add_uniform("critic/conv/b", 1, c.conv_channels, fan, rng);
        let out_w = store.add_uniform("critic/out/w", c.conv_channels, 1, c.conv_channels, rng);
        let out_b = store.add_uniform("critic/out/b", 1, 1, c.conv_channels, rng);
        Self { layers, conv, conv_b, out_w, out_b }
    }

    /// `v(s)` as a `1×1` value.
    pub fn value_forward(&self, tape: &mut Tape, emb: &Embeddings) -> Result<Var> {
        let mut h = emb.nodes;
        for layer in &self.layers {
            h = match layer {
                CriticLayer::Classical { w, b } => {
                    let w = tape.param(*w);
                    let b = tape.param(*b);
                    let y = tape.matmul(h, w);
                    let y = tape.add_row(y, b);
                    tape.relu(y)
                }
                CriticLayer::Quantum(site) => site.forward(tape, h)?,
            };
        }
        let radius = (self.conv.len() / 2) as isize;
        let mut acc: Option<Var> = None;
        for (k, &w) in self.conv.iter().enumerate() {
            let offset = k as isize - radius;
            let src = if offset == 0 { h } else { tape.shift_rows(h, offset) };
            let w = tape.param(w);
            let term = tape.matmul(src, w);
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
        let b = tape.param(self.conv_b);
        let y = tape.add_row(acc.expect("kernel width is at least 1"), b);
        let y = tape.relu(y);
        let pooled = tape.mean_rows(y);
        let w = tape.param(self.out_w);
        let b = tape.param(self.out_b);
        let v = tape.matmul(pooled, w);
        Ok(tape.add(v, b))
    }
}
