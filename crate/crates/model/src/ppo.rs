//! Clipped-surrogate actor-critic updates.
//!
//! The minimized objective per minibatch is
//! `−λ_p·L_clip + λ_v·L_mse − λ_e·L_entropy`, each term averaged over the
//! episodes of the minibatch. Rewards are negative tour lengths, normalized
//! over the whole buffer before advantages `Â = r̃ − v_old` are formed.

use std::sync::atomic::{AtomicUsize, Ordering};

use qroute_core::Instance;

use crate::decoder::Trajectory;
use crate::encoder::BnMode;
use crate::error::{ModelError, Result};
use crate::model::Model;
use crate::params::Gradients;
use crate::tape::{Tape, Var};

/// Ratios are capped here; each cap increments [`RATIO_CLAMPS`].
pub const RATIO_CAP: f64 = 1e6;

/// Number of ratios clamped at [`RATIO_CAP`] since process start.
pub static RATIO_CLAMPS: AtomicUsize = AtomicUsize::new(0);

/// Standard deviations below this only shift rewards.
pub const MIN_REWARD_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EpisodeRecord {
    pub instance_id: usize,
    pub actions: Vec<usize>,
    pub old_log_prob: f64,
    pub reward: f64,
    pub normalized_reward: f64,
    pub value: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub records: Vec<EpisodeRecord>,
    normalized: bool,
}

impl RolloutBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, instance_id: usize, actions: Vec<usize>, old_log_prob: f64, reward: f64, value: f64) {
        self.normalized = false;
        self.records.push(EpisodeRecord {
            instance_id,
            actions,
            old_log_prob,
            reward,
            normalized_reward: reward,
            value,
            advantage: 0.0,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn clear(&mut self) {
        self.records.clear();
        self.normalized = false;
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Shifts rewards to zero mean and, unless their spread is negligible, unit
    /// (population) standard deviation.
    pub fn normalize_rewards(&mut self) -> Result<()> {
        if self.records.is_empty() {
            return Err(ModelError::EmptyBuffer);
        }
        let n = self.records.len() as f64;
        let mean = self.records.iter().map(|r| r.reward).sum::<f64>() / n;
        let var = self.records.iter().map(|r| (r.reward - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for r in &mut self.records {
            let centred = r.reward - mean;
            r.normalized_reward = if std < MIN_REWARD_STD { centred } else { centred / std };
        }
        self.normalized = true;
        Ok(())
    }

    /// `Â = r̃ − v` with the values stored at collection.
    pub fn compute_advantages(&mut self) -> Result<()> {
        if !self.normalized {
            self.normalize_rewards()?;
        }
        for r in &mut self.records {
            r.advantage = advantage(r.normalized_reward, r.value);
        }
        Ok(())
    }
}

pub fn advantage(normalized_reward: f64, value: f64) -> f64 {
    normalized_reward - value
}

/// `exp(new − old)`, capped at [`RATIO_CAP`].
pub fn ratio(new_log_prob: f64, old_log_prob: f64) -> f64 {
    let r = (new_log_prob - old_log_prob).exp();
    if r > RATIO_CAP || r.is_nan() {
        RATIO_CLAMPS.fetch_add(1, Ordering::Relaxed);
        RATIO_CAP
    } else {
        r
    }
}

/// `min(r·Â, clip(r, 1−ε, 1+ε)·Â)` for one record.
pub fn clip_term(r: f64, adv: f64, eps: f64) -> f64 {
    (r * adv).min(r.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// Mean clipped surrogate over a minibatch.
pub fn clip_loss(ratios: &[f64], advantages: &[f64], eps: f64) -> f64 {
    let n = ratios.len() as f64;
    ratios.iter().zip(advantages).map(|(&r, &a)| clip_term(r, a, eps)).sum::<f64>() / n
}

/// Shannon entropy (natural log) of one distribution.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Mean per-step entropy over all steps of all episodes.
pub fn entropy_loss(steps: &[Vec<f64>]) -> f64 {
    steps.iter().map(|p| entropy(p)).sum::<f64>() / steps.len() as f64
}

/// Mean squared error between normalized rewards and critic values.
pub fn value_loss(targets: &[f64], values: &[f64]) -> f64 {
    targets.iter().zip(values).map(|(t, v)| (t - v).powi(2)).sum::<f64>() / targets.len() as f64
}

/// Loss weights `(λ_p, λ_v, λ_e)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { policy: 1.0, value: 0.5, entropy: 0.01 }
    }
}

/// `−λ_p·clip + λ_v·mse − λ_e·entropy`.
pub fn total_loss(clip: f64, mse: f64, entropy: f64, w: LossWeights) -> f64 {
    -w.policy * clip + w.value * mse - w.entropy * entropy
}

/// Loss components of one episode under the current parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EpisodeLoss {
    pub total: f64,
    pub clip: f64,
    pub mse: f64,
    pub entropy: f64,
    pub ratio: f64,
    pub value: f64,
    pub new_log_prob: f64,
}

/// Records one episode's contribution `total / batch` on `tape`.
///
/// Summing the returned roots over a minibatch of `batch` episodes gives the
/// minibatch objective.
pub fn episode_objective(
    tape: &mut Tape,
    model: &Model,
    instance: &Instance,
    record: &EpisodeRecord,
    batch: usize,
    eps: f64,
    w: LossWeights,
) -> Result<(Var, EpisodeLoss)> {
    let emb = model.encoder.encode(tape, instance, BnMode::Train)?;
    let value = model.critic.value_forward(tape, &emb)?;
    let cache = model.decoder.prepare(tape, &emb);
    let traj = Trajectory::replay(instance, &record.actions)?;
    let (log_prob, entropies, _) = model.decoder.evaluate(tape, &cache, &traj, model.config.decoder.temperature)?;

    let new_lp = tape.value(log_prob).item();
    let r = ratio(new_lp, record.old_log_prob);
    let adv = record.advantage;
    let unclipped_binds = r * adv <= r.clamp(1.0 - eps, 1.0 + eps) * adv && r < RATIO_CAP;
    let clip = if unclipped_binds {
        let shifted = tape.add_scalar(log_prob, -record.old_log_prob);
        let rv = tape.exp(shifted);
        tape.scale(rv, adv)
    } else {
        tape.constant(crate::tensor::Mat::scalar(clip_term(r, adv, eps)))
    };
    let steps = traj.len() as f64;
    let ent_sum = tape.sum_all(entropies);
    let ent = tape.scale(ent_sum, 1.0 / steps);
    let diff = tape.add_scalar(value, -record.normalized_reward);
    let mse = tape.square(diff);

    let a = tape.scale(clip, -w.policy);
    let b = tape.scale(mse, w.value);
    let c = tape.scale(ent, -w.entropy);
    let ab = tape.add(a, b);
    let total = tape.add(ab, c);
    let root = tape.scale(total, 1.0 / batch as f64);

    let loss = EpisodeLoss {
        total: tape.value(total).item(),
        clip: tape.value(clip).item(),
        mse: tape.value(mse).item(),
        entropy: tape.value(ent).item(),
        ratio: r,
        value: tape.value(value).item(),
        new_log_prob: new_lp,
    };
    Ok((root, loss))
}

/// Minibatch objective and its gradient, episodes reduced in order.
pub fn minibatch_gradient(
    model: &Model,
    instances: &[Instance],
    records: &[&EpisodeRecord],
    eps: f64,
    w: LossWeights,
    parallel: bool,
) -> Result<(f64, Gradients, Vec<EpisodeLoss>)> {
    let batch = records.len();
    let one = |rec: &&EpisodeRecord| -> Result<(Gradients, EpisodeLoss)> {
        let mut tape = Tape::new(&model.store);
        let (root, loss) = episode_objective(&mut tape, model, &instances[rec.instance_id], rec, batch, eps, w)?;
        Ok((tape.backward(root)?, loss))
    };
    let parts: Vec<Result<(Gradients, EpisodeLoss)>> = if parallel {
        use rayon::prelude::*;
        records.par_iter().map(one).collect()
    } else {
        records.iter().map(one).collect()
    };
    let mut grads = Gradients::zeros_like(&model.store);
    let mut losses = Vec::with_capacity(batch);
    for p in parts {
        let (g, l) = p?;
        grads.merge(&g);
        losses.push(l);
    }
    let mean = losses.iter().map(|l| l.total).sum::<f64>() / batch as f64;
    Ok((mean, grads, losses))
}
