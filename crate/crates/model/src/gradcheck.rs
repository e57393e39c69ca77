//! Finite-difference checks of every analytic gradient path.
//!
//! Each suite compares analytic derivatives with central differences and
//! reports the worst entry. Model suites use a relative criterion
//! `|a − n| ≤ tol·max(|a|, |n|)`, with entries whose difference is below
//! [`ABS_FLOOR`] accepted outright so that exactly-zero derivatives do not
//! divide rounding noise by zero.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qroute_core::{generate_instance, Instance};
use qroute_qsim::{adjoint_grads, param_shift_grad, simulate, CircuitLayout, CircuitSpec, Entangler};

use crate::config::{Config, Variant};
use crate::encoder::BnMode;
use crate::error::Result;
use crate::model::Model;
use crate::params::{Gradients, ParamStore};
use crate::ppo::{episode_objective, minibatch_gradient, EpisodeRecord, LossWeights, RolloutBuffer};
use crate::tape::{Tape, Var};
use crate::tensor::Mat;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Absolute tolerance of the circuit suite.
pub const QSIM_TOL: f64 = 1e-5;
/// Relative tolerance of the model suites.
pub const MODEL_TOL: f64 = 1e-4;
/// Differences below this pass regardless of magnitude.
pub const ABS_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Qsim,
    Encoder,
    Critic,
    Ppo,
    All,
}

impl std::str::FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "qsim" => Ok(Self::Qsim),
            "encoder" => Ok(Self::Encoder),
            "critic" => Ok(Self::Critic),
            "ppo" => Ok(Self::Ppo),
            "all" => Ok(Self::All),
            other => Err(format!("unknown scope {other:?}; expected qsim, encoder, critic, ppo or all")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Offender {
    pub what: String,
    pub analytic: f64,
    pub numeric: f64,
    /// Relative error for model suites, absolute for the circuit suite.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: String,
    pub checked: usize,
    pub tolerance: f64,
    pub worst: Option<Offender>,
    pub passed: bool,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {} entries, tolerance {:e}", self.suite, self.checked, self.tolerance)?;
        if let Some(w) = &self.worst {
            write!(f, "; worst {} analytic {:.10e} numeric {:.10e} error {:.3e}", w.what, w.analytic, w.numeric, w.error)?;
        }
        Ok(())
    }
}

struct Tracker {
    suite: String,
    tolerance: f64,
    checked: usize,
    worst: Option<Offender>,
    passed: bool,
}

impl Tracker {
    fn new(suite: impl Into<String>, tolerance: f64) -> Self {
        Self { suite: suite.into(), tolerance, checked: 0, worst: None, passed: true }
    }

    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64, error: f64, ok: bool) {
        self.checked += 1;
        self.passed &= ok;
        let worse = match &self.worst {
            None => true,
            Some(w) => error > w.error || (!ok && !error.is_finite()),
        };
        if worse {
            self.worst = Some(Offender { what: what(), analytic, numeric, error });
        }
    }

    fn absolute(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = (analytic - numeric).abs();
        self.record(what, analytic, numeric, e, e <= self.tolerance);
    }

    fn relative(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let (ok, e) = relative_check(analytic, numeric, self.tolerance);
        self.record(what, analytic, numeric, e, ok);
    }

    fn finish(self) -> SuiteReport {
        SuiteReport {
            suite: self.suite,
            checked: self.checked,
            tolerance: self.tolerance,
            worst: self.worst,
            passed: self.passed,
        }
    }
}

/// `(passes, error)` where the error is `|a − n| / max(|a|, |n|, ABS_FLOOR / tol)`,
/// so it exceeds `tol` exactly when the entry fails.
pub fn relative_check(analytic: f64, numeric: f64, tol: f64) -> (bool, f64) {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs()).max(ABS_FLOOR / tol);
    let e = diff / scale;
    (e <= tol, e)
}

/// Parameter-shift derivatives of every qubit expectation against central
/// differences, and the adjoint sweep against parameter shift, on `circuits`
/// random circuits of up to 6 qubits and 5 layers.
pub fn qsim_suite(circuits: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("qsim", QSIM_TOL);
    let angle = |rng: &mut ChaCha8Rng| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    for c in 0..circuits {
        let n = rng.gen_range(1..=6);
        let layers = rng.gen_range(1..=5);
        let entangler = if rng.gen_bool(0.5) { Entangler::Ring } else { Entangler::Line };
        let layout = CircuitLayout::new(n, layers, entangler)?;
        let z: Vec<f64> = (0..n).map(|_| angle(&mut rng)).collect();
        let theta: Vec<f64> = (0..layout.num_params()).map(|_| angle(&mut rng)).collect();
        let spec = CircuitSpec::new(layout.clone(), theta.clone())?;
        let f = |th: &[f64]| -> Result<Vec<f64>> {
            Ok(simulate(&layout, &z, th)?.z_expectations())
        };
        let mut fd = vec![vec![0.0; theta.len()]; n];
        let mut th = theta.clone();
        for k in 0..theta.len() {
            th[k] = theta[k] + STEP;
            let plus = f(&th)?;
            th[k] = theta[k] - STEP;
            let minus = f(&th)?;
            th[k] = theta[k];
            for q in 0..n {
                fd[q][k] = (plus[q] - minus[q]) / (2.0 * STEP);
            }
        }
        for q in 0..n {
            let shift = param_shift_grad(&z, &spec, q)?;
            let mut weights = vec![0.0; n];
            weights[q] = 1.0;
            let adj = adjoint_grads(&layout, &z, &theta, &weights)?;
            for k in 0..theta.len() {
                t.absolute(|| format!("circuit {c} ({n} qubits, {layers} layers) Z{q} angle {k}"), shift[k], fd[q][k]);
                t.absolute(|| format!("circuit {c} Z{q} angle {k} adjoint"), adj.grad_theta[k], shift[k]);
            }
        }
    }
    Ok(t.finish())
}

/// Small configuration used by the model suites.
pub fn tiny_config(variant: Variant) -> Config {
    let mut c = match variant {
        Variant::Classical => Config::classical(),
        Variant::Quantum => Config::default(),
    };
    c.instance.customers = 5;
    c.instance.capacity = 10;
    c.encoder.d_x = 8;
    c.encoder.layers = 2;
    c.decoder.heads = 2;
    c.critic.conv_channels = 8;
    c.critic.kernel_width = 3;
    c.qsim.n_layers = 2;
    c.critic.qnn_blocks = 2;
    c
}

/// Compares `analytic` with central differences of `f` over every trainable
/// entry whose name starts with one of `prefixes`.
fn check_params(
    t: &mut Tracker,
    model: &mut Model,
    analytic: &Gradients,
    prefixes: &[&str],
    f: impl Fn(&Model) -> Result<f64>,
) -> Result<()> {
    let ids: Vec<_> = model.store.ids().filter(|&id| model.store.is_trainable(id)).collect();
    for id in ids {
        let name = model.store.param(id).name.clone();
        if !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        for k in 0..model.store.get(id).len() {
            let orig = model.store.get(id).data[k];
            model.store.get_mut(id).data[k] = orig + STEP;
            let plus = f(model)?;
            model.store.get_mut(id).data[k] = orig - STEP;
            let minus = f(model)?;
            model.store.get_mut(id).data[k] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            t.relative(|| format!("{name}[{k}]"), analytic.value(id, k), numeric);
        }
    }
    Ok(())
}

fn random_projection(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Classical => "classical",
        Variant::Quantum => "quantum",
    }
}

/// Encoder parameters against a fixed random projection of the node and graph embeddings.
pub fn encoder_suite(variant: Variant, seed: u64) -> Result<SuiteReport> {
    let cfg = tiny_config(variant);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(&cfg, seed)?;
    let inst = generate_instance(cfg.instance.customers, cfg.instance.capacity, &mut rng)?;
    let d = cfg.encoder.d_x;
    let r_nodes = random_projection(inst.num_nodes(), d, &mut rng);
    let r_graph = random_projection(1, d, &mut rng);
    let objective = |tape: &mut Tape, model: &Model| -> Result<Var> {
        let emb = model.encoder.encode(tape, &inst, BnMode::Train)?;
        let rn = tape.constant(r_nodes.clone());
        let rg = tape.constant(r_graph.clone());
        let a = tape.mul(emb.nodes, rn);
        let b = tape.mul(emb.graph, rg);
        let sa = tape.sum_all(a);
        let sb = tape.sum_all(b);
        Ok(tape.add(sa, sb))
    };
    let grads = {
        let mut tape = Tape::new(&model.store);
        let root = objective(&mut tape, &model)?;
        tape.backward(root)?
    };
    let mut t = Tracker::new(format!("encoder ({})", variant_name(variant)), MODEL_TOL);
    check_params(&mut t, &mut model, &grads, &["enc/"], |m| {
        let mut tape = Tape::new(&m.store);
        let root = objective(&mut tape, m)?;
        Ok(tape.value(root).item())
    })?;
    Ok(t.finish())
}

/// Critic value with respect to the critic and encoder parameters.
pub fn critic_suite(variant: Variant, seed: u64) -> Result<SuiteReport> {
    let cfg = tiny_config(variant);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(&cfg, seed)?;
    let inst = generate_instance(cfg.instance.customers, cfg.instance.capacity, &mut rng)?;
    let value = |tape: &mut Tape, model: &Model| -> Result<Var> {
        let emb = model.encoder.encode(tape, &inst, BnMode::Train)?;
        model.critic.value_forward(tape, &emb)
    };
    let grads = {
        let mut tape = Tape::new(&model.store);
        let v = value(&mut tape, &model)?;
        tape.backward(v)?
    };
    let mut t = Tracker::new(format!("critic ({})", variant_name(variant)), MODEL_TOL);
    check_params(&mut t, &mut model, &grads, &["critic/", "enc/"], |m| {
        let mut tape = Tape::new(&m.store);
        let v = value(&mut tape, m)?;
        Ok(tape.value(v).item())
    })?;
    Ok(t.finish())
}

/// Sampled episodes of `model` on `instances` at ratio 1, with normalized
/// rewards and advantages.
pub fn synthetic_records(model: &Model, instances: &[Instance], seed: u64) -> Result<Vec<EpisodeRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buffer = RolloutBuffer::new();
    for (i, inst) in instances.iter().enumerate() {
        let r = model.rollout(inst, model.config.decoder.temperature, BnMode::Train, &mut rng)?;
        buffer.push(i, r.decode.trajectory.actions, r.decode.log_prob, -r.length, r.value);
    }
    buffer.compute_advantages()?;
    Ok(buffer.records)
}

/// Minibatch objective without gradients.
pub fn minibatch_objective(
    model: &Model,
    instances: &[Instance],
    records: &[&EpisodeRecord],
    eps: f64,
    w: LossWeights,
) -> Result<f64> {
    let mut total = 0.0;
    for rec in records {
        let mut tape = Tape::new(&model.store);
        let (root, _) = episode_objective(&mut tape, model, &instances[rec.instance_id], rec, records.len(), eps, w)?;
        total += tape.value(root).item();
    }
    Ok(total)
}

/// Total loss over two sampled episodes (m = 5, d_x = 8) with respect to every trainable parameter.
pub fn ppo_suite(variant: Variant, seed: u64) -> Result<SuiteReport> {
    let cfg = tiny_config(variant);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(&cfg, seed)?;
    let instances: Vec<Instance> = (0..2)
        .map(|_| generate_instance(cfg.instance.customers, cfg.instance.capacity, &mut rng))
        .collect::<std::result::Result<_, _>>()?;
    let records = synthetic_records(&model, &instances, seed ^ 0x5eed)?;
    let refs: Vec<&EpisodeRecord> = records.iter().collect();
    let (eps, w) = (cfg.ppo.clip_eps, LossWeights::default());
    let (_, grads, _) = minibatch_gradient(&model, &instances, &refs, eps, w, false)?;
    let mut t = Tracker::new(format!("ppo total loss ({})", variant_name(variant)), MODEL_TOL);
    check_params(&mut t, &mut model, &grads, &[""], |m| minibatch_objective(m, &instances, &refs, eps, w))?;
    Ok(t.finish())
}

/// Runs the suites selected by `scope`.
pub fn run(scope: Scope, seed: u64) -> Result<Vec<SuiteReport>> {
    let mut out = Vec::new();
    if matches!(scope, Scope::Qsim | Scope::All) {
        out.push(qsim_suite(50, seed)?);
    }
    for variant in [Variant::Classical, Variant::Quantum] {
        if matches!(scope, Scope::Encoder | Scope::All) {
            out.push(encoder_suite(variant, seed)?);
        }
        if matches!(scope, Scope::Critic | Scope::All) {
            out.push(critic_suite(variant, seed)?);
        }
        if matches!(scope, Scope::Ppo | Scope::All) {
            out.push(ppo_suite(variant, seed)?);
        }
    }
    Ok(out)
}

/// Checks that `store` has no trainable entry missing from `grads` after a full backward pass.
pub fn covers_all(store: &ParamStore, grads: &Gradients) -> std::result::Result<(), String> {
    for (id, p) in store.iter() {
        if store.is_trainable(id) && grads.get(id).is_none() {
            return Err(format!("{} received no gradient", p.name));
        }
    }
    Ok(())
}
