//! Pointer decoder with two attention stages.
//!
//! The query at step `t` is an affine map of `[x̄ ‖ x_cur ‖ load/C]`. The first
//! stage is multi-head attention over the node keys restricted to feasible
//! nodes; the head outputs are concatenated and mixed by `W_f` into a context
//! `c`. The second stage scores every node as `clip·tanh(c·k_i/√d_v)`, masks
//! infeasible nodes with `−∞` and applies a softmax after dividing by the
//! temperature.
//!
//! Every operation acts row by row, so evaluating a stored trajectory in one
//! batch reproduces the step-by-step values exactly.

use std::sync::Arc;

use rand::Rng;

use qroute_core::{EnvState, Instance, Route};

use crate::config::{Config, DecoderConfig};
use crate::encoder::Embeddings;
use crate::error::{ModelError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Mask, Tape, Var};
use crate::tensor::Mat;

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_f: ParamId,
    pub d: usize,
    pub cfg: DecoderConfig,
}

/// Per-instance projections reused at every step.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    pub nodes: Var,
    pub graph: Var,
    pub keys: Var,
    pub key_heads: Vec<Var>,
    pub value_heads: Vec<Var>,
    pub num_nodes: usize,
}

/// Decoding state at each step of an episode, enough to re-evaluate it in one batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub actions: Vec<usize>,
    /// Node occupied before each action.
    pub current: Vec<usize>,
    /// Remaining load divided by capacity before each action.
    pub load_frac: Vec<f64>,
    /// Row-major `T × (m+1)` feasibility masks.
    pub mask: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Rebuilds the per-step context by replaying `actions`.
    pub fn replay(instance: &Instance, actions: &[usize]) -> Result<Self> {
        let mut env = EnvState::reset(instance);
        let mut t = Trajectory::default();
        for &a in actions {
            t.push_state(&env)?;
            t.actions.push(a);
            env.step_in_place(a)?;
        }
        Ok(t)
    }

    fn push_state(&mut self, env: &EnvState) -> Result<()> {
        self.current.push(env.current_node());
        self.load_frac.push(env.remaining_load() as f64 / env.instance().capacity() as f64);
        self.mask.extend(env.feasible_mask()?);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub route: Route,
    pub trajectory: Trajectory,
    /// Sum of the chosen actions' log-probabilities.
    pub log_prob: f64,
    /// Probability vector of every step.
    pub step_probs: Vec<Vec<f64>>,
}

/// How the next node is chosen.
pub enum Pick<'r, R: Rng + ?Sized> {
    /// Highest clipped score, lowest index on ties.
    Greedy,
    /// Draw from the tempered distribution.
    Sample { rng: &'r mut R, temperature: f64 },
}

/// Outputs of the step function for a batch of decoding rows.
#[derive(Debug, Clone, Copy)]
pub struct StepOutputs {
    /// Clipped second-stage scores before masking and temperature.
    pub logits: Var,
    /// Masked log-probabilities after temperature.
    pub log_probs: Var,
}

impl DecoderParams {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &Config, rng: &mut R) -> Self {
        let d = cfg.encoder.d_x;
        Self {
            w_q: store.add_uniform("dec/w_q", 2 * d + 1, d, 2 * d + 1, rng),
            b_q: store.add_uniform("dec/b_q", 1, d, 2 * d + 1, rng),
            w_k: store.add_uniform("dec/w_k", d, d, d, rng),
            w_v: store.add_uniform("dec/w_v", d, d, d, rng),
            w_f: store.add_uniform("dec/w_f", d, d, d, rng),
            d,
            cfg: cfg.decoder.clone(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.cfg.heads
    }

    pub fn prepare(&self, tape: &mut Tape, emb: &Embeddings) -> DecoderCache {
        let wk = tape.param(self.w_k);
        let wv = tape.param(self.w_v);
        let keys = tape.matmul(emb.nodes, wk);
        let values = tape.matmul(emb.nodes, wv);
        let dv = self.head_dim();
        let key_heads = (0..self.cfg.heads).map(|h| tape.slice_cols(keys, h * dv, dv)).collect();
        let value_heads = (0..self.cfg.heads).map(|h| tape.slice_cols(values, h * dv, dv)).collect();
        DecoderCache {
            nodes: emb.nodes,
            graph: emb.graph,
            keys,
            key_heads,
            value_heads,
            num_nodes: tape.shape(emb.nodes).0,
        }
    }

    /// Queries for a batch of decoding rows, `rows × d`.
    pub fn query(&self, tape: &mut Tape, cache: &DecoderCache, current: &[usize], load_frac: &[f64]) -> Var {
        let g = tape.gather_rows(cache.graph, &vec![0; current.len()]);
        let x = tape.gather_rows(cache.nodes, current);
        let l = tape.constant(Mat::column(load_frac.to_vec()));
        let ctx = tape.concat_cols(&[g, x, l]);
        let w = tape.param(self.w_q);
        let b = tape.param(self.b_q);
        let q = tape.matmul(ctx, w);
        tape.add_row(q, b)
    }

    /// First-stage scores `q_h·k_i/√d_v` of head `h`; masking is applied by the softmax.
    pub fn step_scores_first(&self, tape: &mut Tape, cache: &DecoderCache, q: Var, h: usize) -> Var {
        let dv = self.head_dim();
        let qh = tape.slice_cols(q, h * dv, dv);
        let s = tape.matmul_t(qh, cache.key_heads[h]);
        tape.scale(s, 1.0 / (dv as f64).sqrt())
    }

    /// `W_f` applied to the concatenated attention-weighted values of all heads.
    pub fn context_vector(&self, tape: &mut Tape, cache: &DecoderCache, weights: &[Var]) -> Var {
        let heads: Vec<Var> = weights
            .iter()
            .zip(&cache.value_heads)
            .map(|(&a, &v)| tape.matmul(a, v))
            .collect();
        let cat = tape.concat_cols(&heads);
        let wf = tape.param(self.w_f);
        tape.matmul(cat, wf)
    }

    /// `clip·tanh(c·k_i/√d_v)` for every node.
    pub fn second_logits(&self, tape: &mut Tape, cache: &DecoderCache, c: Var) -> Var {
        let s = tape.matmul_t(c, cache.keys);
        let s = tape.scale(s, 1.0 / (self.head_dim() as f64).sqrt());
        let t = tape.tanh(s);
        tape.scale(t, self.cfg.clip)
    }

    /// Masked log-probabilities `log softmax(logits / temperature)`.
    pub fn step_probabilities(&self, tape: &mut Tape, logits: Var, mask: &Mask, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(crate::config::ConfigError {
                field: "decoder.temperature".into(),
                message: format!("must be positive, got {temperature}"),
            }
            .into());
        }
        let u = tape.scale(logits, 1.0 / temperature);
        Ok(tape.masked_log_softmax_rows(u, mask))
    }

    /// Full step function for `rows` decoding states at once.
    pub fn step_rows(
        &self,
        tape: &mut Tape,
        cache: &DecoderCache,
        current: &[usize],
        load_frac: &[f64],
        mask: &Mask,
        temperature: f64,
    ) -> Result<StepOutputs> {
        let n = cache.num_nodes;
        if let Some(step) = mask.chunks(n).position(|row| !row.iter().any(|&ok| ok)) {
            return Err(ModelError::NoFeasibleAction { step });
        }
        let q = self.query(tape, cache, current, load_frac);
        let weights: Vec<Var> = (0..self.cfg.heads)
            .map(|h| {
                let s = self.step_scores_first(tape, cache, q, h);
                tape.masked_softmax_rows(s, mask)
            })
            .collect();
        let c = self.context_vector(tape, cache, &weights);
        let logits = self.second_logits(tape, cache, c);
        let log_probs = self.step_probabilities(tape, logits, mask, temperature)?;
        Ok(StepOutputs { logits, log_probs })
    }

    /// Runs one episode. Tape nodes created by the episode are discarded.
    pub fn decode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        cache: &DecoderCache,
        instance: &Instance,
        mut pick: Pick<'_, R>,
    ) -> Result<DecodeResult> {
        let mark = tape.len();
        let mut env = EnvState::reset(instance);
        let mut traj = Trajectory::default();
        let mut chosen = Vec::new();
        let mut step_probs = Vec::new();
        let temperature = match &pick {
            Pick::Greedy => 1.0,
            Pick::Sample { temperature, .. } => *temperature,
        };
        while !env.is_terminal() {
            let mask: Mask = Arc::new(env.feasible_mask()?);
            let cur = env.current_node();
            let load = env.remaining_load() as f64 / instance.capacity() as f64;
            let out = self
                .step_rows(tape, cache, &[cur], &[load], &mask, temperature)
                .map_err(|e| match e {
                    ModelError::NoFeasibleAction { .. } => ModelError::NoFeasibleAction { step: env.step_count() },
                    other => other,
                })?;
            let logp = tape.value(out.log_probs).data.clone();
            let action = match &mut pick {
                Pick::Greedy => argmax_masked(&tape.value(out.logits).data, &mask),
                Pick::Sample { rng, .. } => sample_masked(&logp, &mask, *rng),
            };
            chosen.push(logp[action]);
            step_probs.push(logp.iter().map(|l| l.exp()).collect());
            traj.current.push(cur);
            traj.load_frac.push(load);
            traj.mask.extend(mask.iter());
            traj.actions.push(action);
            env.step_in_place(action)?;
            tape.truncate(mark);
        }
        Ok(DecodeResult { route: env.route()?, trajectory: traj, log_prob: chosen.iter().sum(), step_probs })
    }

    /// Batched re-evaluation of a stored trajectory.
    ///
    /// Returns the summed log-probability of the taken actions (`1×1`), the
    /// per-step entropies (`T×1`) and the full log-probability matrix.
    pub fn evaluate(
        &self,
        tape: &mut Tape,
        cache: &DecoderCache,
        traj: &Trajectory,
        temperature: f64,
    ) -> Result<(Var, Var, Var)> {
        let mask: Mask = Arc::new(traj.mask.clone());
        let out = self.step_rows(tape, cache, &traj.current, &traj.load_frac, &mask, temperature)?;
        let picked = tape.pick_cols(out.log_probs, &traj.actions);
        let total = tape.sum_all(picked);
        let entropy = tape.masked_entropy_rows(out.log_probs, &mask);
        Ok((total, entropy, out.log_probs))
    }
}

/// Index of the largest allowed value, lowest index on ties.
pub fn argmax_masked(values: &[f64], mask: &[bool]) -> usize {
    let mut best: Option<usize> = None;
    for (i, (&v, &ok)) in values.iter().zip(mask).enumerate() {
        if ok && best.map_or(true, |b| v > values[b]) {
            best = Some(i);
        }
    }
    best.expect("mask admits at least one action")
}

/// Inverse-CDF draw from `exp(log_probs)` restricted to allowed entries.
pub fn sample_masked<R: Rng + ?Sized>(log_probs: &[f64], mask: &[bool], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = None;
    for (i, (&l, &ok)) in log_probs.iter().zip(mask).enumerate() {
        if !ok {
            continue;
        }
        acc += l.exp();
        last = Some(i);
        if u < acc {
            return i;
        }
    }
    last.expect("mask admits at least one action")
}
