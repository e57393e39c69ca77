//! Edge-aware graph attention encoder.
//!
//! Node features are `(x, y, d/C)` (the depot has demand 0) and the edge
//! feature of every ordered pair, self-pairs included, is the Euclidean
//! distance. Both go through an affine map and batch normalization. Each layer
//! scores every pair `(i, j)` from `[x_i ‖ x_j ‖ ê_ij]`, applies LeakyReLU and a
//! row softmax, and updates `x_i ← Σ_j a_ij W₁x_j + x_i`. The graph embedding is
//! the mean over all nodes, depot included.
//!
//! Batch statistics are taken over the rows of a single instance.

use std::sync::Arc;

use rand::Rng;

use qroute_core::Instance;
use qroute_qsim::CircuitLayout;

use crate::config::{Config, EncoderConfig};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tape::{Mask, Tape, TapeError, Var};
use crate::tensor::Mat;

/// Whether batch normalization uses the current rows or the running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct BatchNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNormIds {
    fn register(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gamma: store.add_constant(format!("{prefix}/bn_gamma"), ParamKind::Classical, 1, d, 1.0),
            beta: store.add_constant(format!("{prefix}/bn_beta"), ParamKind::Classical, 1, d, 0.0),
            running_mean: store.add_constant(format!("{prefix}/bn_running_mean"), ParamKind::Buffer, 1, d, 0.0),
            running_var: store.add_constant(format!("{prefix}/bn_running_var"), ParamKind::Buffer, 1, d, 1.0),
        }
    }

    /// Normalizes `pre`; in training mode also returns the batch mean and biased variance.
    pub fn apply(
        &self,
        tape: &mut Tape,
        pre: Var,
        mode: BnMode,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>), TapeError> {
        let (normed, stats) = match mode {
            BnMode::Train => {
                let (v, mean, var) = tape.batch_norm(pre, eps)?;
                (v, Some((mean, var)))
            }
            BnMode::Eval => {
                let store = tape.store();
                let shift = store.get(self.running_mean).map(|m| -m);
                let scale = store.get(self.running_var).map(|v| 1.0 / (v + eps).sqrt());
                let shift = tape.constant(shift);
                let scale = tape.constant(scale);
                let centred = tape.add_row(pre, shift);
                (tape.mul_row(centred, scale), None)
            }
        };
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        let scaled = tape.mul_row(normed, g);
        Ok((tape.add_row(scaled, b), stats))
    }

    /// Folds batch statistics over `n` rows into the running estimates.
    pub fn update_running(&self, store: &mut ParamStore, mean: &[f64], var: &[f64], n: usize, momentum: f64) {
        let unbiased = n as f64 / (n as f64 - 1.0);
        for (r, m) in store.get_mut(self.running_mean).data.iter_mut().zip(mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in store.get_mut(self.running_var).data.iter_mut().zip(var) {
            *r = (1.0 - momentum) * *r + momentum * v * unbiased;
        }
    }
}

/// Projection → circuit blocks → projection, with `blocks` circuits side by side.
#[derive(Debug, Clone)]
pub struct QnnSite {
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub theta: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub layout: Arc<CircuitLayout>,
}

impl QnnSite {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        blocks: usize,
        d_out: usize,
        layout: &Arc<CircuitLayout>,
        rng: &mut R,
    ) -> Self {
        let width = blocks * layout.n_qubits();
        let in_w = store.add_uniform(format!("{prefix}/in_w"), d_in, width, d_in, rng);
        let in_b = store.add_uniform(format!("{prefix}/in_b"), 1, width, d_in, rng);
        let angles = (0..blocks * layout.num_params())
            .map(|_| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI))
            .collect();
        let theta = store.add(
            format!("{prefix}/theta"),
            ParamKind::Quantum,
            Mat::from_vec(blocks, layout.num_params(), angles),
        );
        let out_w = store.add_uniform(format!("{prefix}/out_w"), width, d_out, width, rng);
        let out_b = store.add_uniform(format!("{prefix}/out_b"), 1, d_out, width, rng);
        Self { in_w, in_b, theta, out_w, out_b, layout: layout.clone() }
    }

    /// Circuit stage applied to an already projected input.
    pub fn from_projected(&self, tape: &mut Tape, pre: Var) -> Result<Var, TapeError> {
        let b = tape.param(self.in_b);
        let pre = tape.add_row(pre, b);
        let t = tape.tanh(pre);
        let z = tape.scale(t, std::f64::consts::PI);
        let theta = tape.param(self.theta);
        let h = tape.qnn(z, theta, &self.layout)?;
        let w = tape.param(self.out_w);
        let y = tape.matmul(h, w);
        let ob = tape.param(self.out_b);
        Ok(tape.add_row(y, ob))
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TapeError> {
        let w = tape.param(self.in_w);
        let pre = tape.matmul(x, w);
        self.from_projected(tape, pre)
    }
}

#[derive(Debug, Clone)]
pub enum ScoreSite {
    /// `W = [W_a; W_b; W_c]` acting on `[x_i ‖ x_j ‖ ê_ij]`, plus bias.
    Classical { w_a: ParamId, w_b: ParamId, w_c: ParamId, b: ParamId },
    Quantum(QnnSite),
}

#[derive(Debug, Clone)]
pub enum ValueSite {
    Classical(ParamId),
    Quantum(QnnSite),
}

#[derive(Debug, Clone)]
pub struct LayerIds {
    pub score: ScoreSite,
    pub g: ParamId,
    pub value: ValueSite,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub node_a: ParamId,
    pub node_b: ParamId,
    pub node_bn: BatchNormIds,
    pub edge_a: ParamId,
    pub edge_b: ParamId,
    pub edge_bn: BatchNormIds,
    pub layers: Vec<LayerIds>,
    pub cfg: EncoderConfig,
}

/// Statistics of one training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub node: (Vec<f64>, Vec<f64>),
    pub node_rows: usize,
    pub edge: (Vec<f64>, Vec<f64>),
    pub edge_rows: usize,
}

#[derive(Debug, Clone)]
pub struct Embeddings {
    /// `(m+1) × d_x`.
    pub nodes: Var,
    /// `(m+1)² × d_x`, row `i·(m+1) + j` for pair `(i, j)`.
    pub edges: Var,
    /// `1 × d_x`.
    pub graph: Var,
    /// Attention matrices of every layer, `(m+1) × (m+1)`.
    pub attention: Vec<Var>,
    pub bn_stats: Option<BnStats>,
}

pub fn node_features(instance: &Instance) -> Mat {
    let c = instance.capacity() as f64;
    let mut m = Mat::zeros(instance.num_nodes(), 3);
    for (i, (xy, &d)) in instance.coords().iter().zip(instance.demands()).enumerate() {
        m.row_mut(i).copy_from_slice(&[xy[0], xy[1], d as f64 / c]);
    }
    m
}

pub fn edge_features(instance: &Instance) -> Mat {
    let n = instance.num_nodes();
    let mut m = Mat::zeros(n * n, 1);
    for i in 0..n {
        for j in 0..n {
            m.data[i * n + j] = instance.distance(i, j);
        }
    }
    m
}

impl EncoderParams {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &Config, rng: &mut R) -> Self {
        let e = &cfg.encoder;
        let d = e.d_x;
        let layout = Arc::new(
            CircuitLayout::new(cfg.qsim.n_qubits, cfg.qsim.n_layers, cfg.qsim.entangler)
                .expect("validated circuit configuration"),
        );
        let nq = cfg.qsim.n_qubits;
        let node_a = store.add_uniform("enc/node/a", 3, d, 3, rng);
        let node_b = store.add_uniform("enc/node/b", 1, d, 3, rng);
        let node_bn = BatchNormIds::register(store, "enc/node", d);
        let edge_a = store.add_uniform("enc/edge/a", 1, d, 1, rng);
        let edge_b = store.add_uniform("enc/edge/b", 1, d, 1, rng);
        let edge_bn = BatchNormIds::register(store, "enc/edge", d);
        let layers = (0..e.layers)
            .map(|l| {
                let p = format!("enc/layer{l}");
                let (score, g_dim) = if e.score_is_quantum() {
                    (ScoreSite::Quantum(QnnSite::register(store, &format!("{p}/score"), 3 * d, 1, nq, &layout, rng)), nq)
                } else {
                    (
                        ScoreSite::Classical {
                            w_a: store.add_uniform(format!("{p}/score/w_a"), d, d, 3 * d, rng),
                            w_b: store.add_uniform(format!("{p}/score/w_b"), d, d, 3 * d, rng),
                            w_c: store.add_uniform(format!("{p}/score/w_c"), d, d, 3 * d, rng),
                            b: store.add_uniform(format!("{p}/score/b"), 1, d, 3 * d, rng),
                        },
                        d,
                    )
                };
                let g = store.add_uniform(format!("{p}/g"), g_dim, 1, g_dim, rng);
                let value = if e.value_is_quantum() {
                    ValueSite::Quantum(QnnSite::register(store, &format!("{p}/value"), d, 1, d, &layout, rng))
                } else {
                    ValueSite::Classical(store.add_uniform(format!("{p}/value/w1"), d, d, d, rng))
                };
                LayerIds { score, g, value }
            })
            .collect();
        Self { node_a, node_b, node_bn, edge_a, edge_b, edge_bn, layers, cfg: e.clone() }
    }

    /// Initial node and edge embeddings.
    pub fn init_embeddings(
        &self,
        tape: &mut Tape,
        instance: &Instance,
        mode: BnMode,
    ) -> Result<(Var, Var, Option<BnStats>), TapeError> {
        let n = instance.num_nodes();
        let nf = tape.constant(node_features(instance));
        let a0 = tape.param(self.node_a);
        let b0 = tape.param(self.node_b);
        let pre = tape.matmul(nf, a0);
        let pre = tape.add_row(pre, b0);
        let (x0, ns) = self.node_bn.apply(tape, pre, mode, self.cfg.bn_eps)?;
        let ef = tape.constant(edge_features(instance));
        let a1 = tape.param(self.edge_a);
        let b1 = tape.param(self.edge_b);
        let pre = tape.matmul(ef, a1);
        let pre = tape.add_row(pre, b1);
        let (e0, es) = self.edge_bn.apply(tape, pre, mode, self.cfg.bn_eps)?;
        let stats = match (ns, es) {
            (Some(node), Some(edge)) => Some(BnStats { node, node_rows: n, edge, edge_rows: n * n }),
            _ => None,
        };
        Ok((x0, e0, stats))
    }

    /// Pre-activation scores `g·W[x_i ‖ x_j ‖ ê_ij]` as an `n²×1` column.
    fn raw_scores(&self, tape: &mut Tape, x: Var, e: Var, layer: &LayerIds) -> Result<Var, TapeError> {
        let g = tape.param(layer.g);
        match &layer.score {
            ScoreSite::Classical { w_a, w_b, w_c, b } => {
                // g·(W c + b) = c·(W g) + b·g, evaluated without forming the n² concatenations.
                let parts: Vec<Var> = [*w_a, *w_b, *w_c]
                    .iter()
                    .map(|&w| {
                        let w = tape.param(w);
                        tape.matmul(w, g)
                    })
                    .collect();
                let si = tape.matmul(x, parts[0]);
                let sj = tape.matmul(x, parts[1]);
                let se = tape.matmul(e, parts[2]);
                let pair = tape.pair_sum(si, sj);
                let s = tape.add(pair, se);
                let b = tape.param(*b);
                let bg = tape.matmul(b, g);
                Ok(tape.add_row(s, bg))
            }
            ScoreSite::Quantum(site) => {
                let d = self.cfg.d_x;
                let w = tape.param(site.in_w);
                let pa = tape.slice_rows(w, 0, d);
                let pb = tape.slice_rows(w, d, d);
                let pc = tape.slice_rows(w, 2 * d, d);
                let xa = tape.matmul(x, pa);
                let xb = tape.matmul(x, pb);
                let ec = tape.matmul(e, pc);
                let pair = tape.pair_sum(xa, xb);
                let pre = tape.add(pair, ec);
                let y = site.from_projected(tape, pre)?;
                Ok(tape.matmul(y, g))
            }
        }
    }

    /// Row-stochastic attention matrix of one layer.
    pub fn attention_coefficients(&self, tape: &mut Tape, x: Var, e: Var, layer: usize) -> Result<Var, TapeError> {
        let n = tape.shape(x).0;
        let s = self.raw_scores(tape, x, e, &self.layers[layer])?;
        if !tape.value(s).all_finite() {
            return Err(TapeError::NonFinite("attention scores"));
        }
        let s = tape.reshape(s, n, n);
        let s = tape.leaky_relu(s, self.cfg.leaky_slope);
        let mask: Mask = Arc::new(vec![true; n * n]);
        Ok(tape.masked_softmax_rows(s, &mask))
    }

    /// Residual update `x ← a·(x W₁) + x`.
    pub fn layer_forward(&self, tape: &mut Tape, x: Var, a: Var, layer: usize) -> Result<Var, TapeError> {
        let v = match &self.layers[layer].value {
            ValueSite::Classical(w1) => {
                let w1 = tape.param(*w1);
                tape.matmul(x, w1)
            }
            ValueSite::Quantum(site) => site.forward(tape, x)?,
        };
        let msg = tape.matmul(a, v);
        Ok(tape.add(msg, x))
    }

    pub fn encode(&self, tape: &mut Tape, instance: &Instance, mode: BnMode) -> Result<Embeddings, TapeError> {
        let (mut x, e, bn_stats) = self.init_embeddings(tape, instance, mode)?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let a = self.attention_coefficients(tape, x, e, l)?;
            attention.push(a);
            x = self.layer_forward(tape, x, a, l)?;
        }
        let graph = tape.mean_rows(x);
        Ok(Embeddings { nodes: x, edges: e, graph, attention, bn_stats })
    }

    pub fn update_running_stats(&self, store: &mut ParamStore, stats: &BnStats) {
        let m = self.cfg.bn_momentum;
        self.node_bn.update_running(store, &stats.node.0, &stats.node.1, stats.node_rows, m);
        self.edge_bn.update_running(store, &stats.edge.0, &stats.edge.1, stats.edge_rows, m);
    }
}
