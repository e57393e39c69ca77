//! The training loop: collect, normalize, estimate advantages, then several
//! passes of minibatch updates, with validation, metrics and checkpoints per
//! epoch.
//!
//! Every random draw comes from a stream keyed by `(seed, purpose, epoch,
//! index)`, so results do not depend on the thread count and a resumed run
//! continues exactly where an uninterrupted one would be.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use qroute_core::{generate_instance, generate_instances, Instance};

use crate::checkpoint::{capture, restore, Checkpoint};
use crate::config::Config;
use crate::encoder::BnMode;
use crate::error::{ModelError, Result};
use crate::model::{Model, Rollout};
use crate::optim::{clip_grad_norm, Adam};
use crate::ppo::{
    clip_loss, entropy_loss, minibatch_gradient, total_loss, value_loss, EpisodeLoss, EpisodeRecord, LossWeights,
    RolloutBuffer,
};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const LATEST_CHECKPOINT: &str = "checkpoint.qgat";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";

/// Purposes of the random streams.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    TrainPool = 2,
    Instances = 3,
    Shuffle = 4,
    Rollout = 5,
    Minibatch = 6,
    Validation = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for one `(purpose, epoch, index)` triple.
pub fn stream(seed: u64, purpose: Stream, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for part in [purpose as u64, epoch, index] {
        h = splitmix(h ^ part);
    }
    ChaCha8Rng::seed_from_u64(h)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where metrics, checkpoints and the resolved configuration go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Worker threads for collection, updates and validation; 0 or 1 runs on the caller's thread.
    pub threads: usize,
    /// Record elapsed seconds in the metrics log instead of 0.
    pub wall_clock: bool,
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mean_length: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
struct TimingRow {
    epoch: usize,
    collect_s: f64,
    update_s: f64,
    validate_s: f64,
    total_s: f64,
}

#[derive(serde::Serialize)]
struct NanDump<'a> {
    epoch: usize,
    update_epoch: usize,
    minibatch: usize,
    records: Vec<&'a EpisodeRecord>,
    losses: &'a [EpisodeLoss],
    gradient_norm: f64,
}

pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    pool: Option<Vec<Instance>>,
    validation: Vec<Instance>,
    opts: TrainOptions,
    workers: Option<rayon::ThreadPool>,
    timings: Vec<TimingRow>,
}

impl Trainer {
    pub fn new(config: &Config, opts: TrainOptions) -> Result<Self> {
        config.validate()?;
        let seed = config.ppo.seed;
        let model = Model::new(config, stream(seed, Stream::Init, 0, 0).next_u64())?;
        let adam = Adam::new(&model.store, config.ppo.learning_rate);
        let cfg = &model.config;
        let (m, cap) = (cfg.instance.customers, cfg.instance.capacity);
        let pool = match cfg.ppo.train_set_size {
            Some(n) => Some(generate_instances(n, m, cap, &mut stream(seed, Stream::TrainPool, 0, 0))?),
            None => None,
        };
        let validation = generate_instances(cfg.ppo.val_size, m, cap, &mut ChaCha8Rng::seed_from_u64(cfg.ppo.val_seed))?;
        let workers = if opts.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(opts.threads)
                    .build()
                    .map_err(|e| ModelError::NonFinite(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        let mut trainer =
            Self { model, adam, epoch: 0, metrics: Vec::new(), pool, validation, opts, workers, timings: Vec::new() };
        if let Some(path) = trainer.opts.resume.clone() {
            trainer.resume_from(&path)?;
        }
        if let Some(dir) = &trainer.opts.out_dir {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(RESOLVED_CONFIG_FILE), trainer.model.config.to_json_pretty())?;
        }
        Ok(trainer)
    }

    fn resume_from(&mut self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint::read(path)?;
        self.epoch = restore(&ckpt, &mut self.model, Some(&mut self.adam))?;
        self.adam.lr = self.model.config.ppo.learning_rate;
        if let Some(dir) = &self.opts.out_dir {
            let file = dir.join(METRICS_FILE);
            if file.exists() {
                let mut rows = read_metrics(&file)?;
                rows.retain(|r| r.epoch <= self.epoch);
                self.metrics = rows;
            }
        }
        Ok(())
    }

    pub fn validation_set(&self) -> &[Instance] {
        &self.validation
    }

    fn weights(&self) -> LossWeights {
        let p = &self.model.config.ppo;
        LossWeights { policy: p.lambda_p, value: p.lambda_v, entropy: p.lambda_e }
    }

    fn map<T: Sync, U: Send>(&self, items: &[T], f: impl Fn(usize, &T) -> U + Sync + Send) -> Vec<U> {
        match &self.workers {
            Some(pool) => pool.install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()),
            None => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
        }
    }

    /// Instances rolled out in epoch `epoch` (0-based).
    fn epoch_instances(&self, epoch: u64) -> Result<Vec<Instance>> {
        let p = &self.model.config.ppo;
        let count = p.collect_steps * p.episodes_per_step;
        let seed = p.seed;
        match &self.pool {
            Some(pool) => {
                let mut order: Vec<usize> = (0..pool.len()).collect();
                order.shuffle(&mut stream(seed, Stream::Shuffle, epoch, 0));
                Ok((0..count).map(|i| pool[order[i % order.len()]].clone()).collect())
            }
            None => {
                let (m, cap) = (self.model.config.instance.customers, self.model.config.instance.capacity);
                (0..count)
                    .map(|i| Ok(generate_instance(m, cap, &mut stream(seed, Stream::Instances, epoch, i as u64))?))
                    .collect()
            }
        }
    }

    /// Sampled episodes under the current parameters, running statistics folded in order.
    fn collect(&mut self, instances: &[Instance], epoch: u64) -> Result<RolloutBuffer> {
        let seed = self.model.config.ppo.seed;
        let temperature = self.model.config.decoder.temperature;
        let model = &self.model;
        let rollouts: Vec<Result<Rollout>> = self.map(instances, |i, inst| {
            model.rollout(inst, temperature, BnMode::Train, &mut stream(seed, Stream::Rollout, epoch, i as u64))
        });
        let mut buffer = RolloutBuffer::new();
        for (i, r) in rollouts.into_iter().enumerate() {
            let r = r?;
            if !r.decode.log_prob.is_finite() || !r.value.is_finite() {
                let dump = serde_json::json!({
                    "epoch": epoch + 1,
                    "rollout": i,
                    "actions": r.decode.trajectory.actions,
                    "log_prob": r.decode.log_prob.to_string(),
                    "value": r.value.to_string(),
                    "length": r.length,
                });
                let msg = format!("log-probability {} and value {} in rollout {i} of epoch {}", r.decode.log_prob, r.value, epoch + 1);
                return Err(self.abort(msg, &dump));
            }
            if let Some(stats) = &r.bn_stats {
                self.model.encoder.update_running_stats(&mut self.model.store, stats);
            }
            buffer.push(i, r.decode.trajectory.actions, r.decode.log_prob, -r.length, r.value);
        }
        buffer.compute_advantages()?;
        Ok(buffer)
    }

    /// Minibatch passes over `buffer`; returns the mean minibatch loss.
    fn update(&mut self, instances: &[Instance], buffer: &RolloutBuffer, epoch: u64) -> Result<f64> {
        let p = self.model.config.ppo.clone();
        let w = self.weights();
        let mut losses = Vec::new();
        for k in 0..p.update_epochs {
            let mut order: Vec<usize> = (0..buffer.len()).collect();
            order.shuffle(&mut stream(p.seed, Stream::Minibatch, epoch, k as u64));
            for (b, chunk) in order.chunks(p.batch_size).enumerate() {
                let records: Vec<&EpisodeRecord> = chunk.iter().map(|&i| &buffer.records[i]).collect();
                let (loss, mut grads, parts) = match &self.workers {
                    Some(pool) => pool.install(|| minibatch_gradient(&self.model, instances, &records, p.clip_eps, w, true)),
                    None => minibatch_gradient(&self.model, instances, &records, p.clip_eps, w, false),
                }?;
                if !loss.is_finite() || !grads.all_finite() {
                    let norm = grads.global_norm();
                    let dump = NanDump {
                        epoch: epoch as usize + 1,
                        update_epoch: k + 1,
                        minibatch: b,
                        records,
                        losses: &parts,
                        gradient_norm: norm,
                    };
                    let msg = format!(
                        "loss {loss} (gradient norm {norm}) at epoch {}, update pass {}, minibatch {b}",
                        epoch + 1,
                        k + 1
                    );
                    return Err(self.abort(msg, &dump));
                }
                clip_grad_norm(&mut grads, p.max_grad_norm);
                self.adam.update(&mut self.model.store, &grads);
                losses.push(loss);
            }
        }
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Writes `dump` beside the outputs (or logs it) and builds the error.
    fn abort(&self, mut msg: String, dump: &impl serde::Serialize) -> ModelError {
        let text = serde_json::to_string_pretty(dump).unwrap_or_default();
        match &self.opts.out_dir {
            Some(dir) => {
                let path = dir.join(NAN_DUMP_FILE);
                match std::fs::write(&path, text) {
                    Ok(()) => msg.push_str(&format!("; diagnostics written to {}", path.display())),
                    Err(e) => msg.push_str(&format!("; writing diagnostics failed: {e}")),
                }
            }
            None => log::error!("{text}"),
        }
        ModelError::NonFinite(msg)
    }

    /// Greedy mean tour length and the loss at ratio 1 on the validation set.
    pub fn validate(&self) -> Result<(f64, f64)> {
        let model = &self.model;
        let seed = model.config.ppo.seed;
        let temperature = model.config.decoder.temperature;
        let results: Vec<Result<(f64, Rollout)>> = self.map(&self.validation, |i, inst| {
            let greedy = model.greedy(inst)?;
            let len = qroute_core::route_length(inst, &greedy.route)?;
            let r = model.rollout(inst, temperature, BnMode::Train, &mut stream(seed, Stream::Validation, 0, i as u64))?;
            Ok((len, r))
        });
        let mut lengths = Vec::with_capacity(results.len());
        let mut buffer = RolloutBuffer::new();
        let mut steps = Vec::new();
        for (i, r) in results.into_iter().enumerate() {
            let (len, roll) = r?;
            lengths.push(len);
            buffer.push(i, Vec::new(), roll.decode.log_prob, -roll.length, roll.value);
            steps.extend(roll.decode.step_probs);
        }
        buffer.compute_advantages()?;
        let advs: Vec<f64> = buffer.records.iter().map(|r| r.advantage).collect();
        let targets: Vec<f64> = buffer.records.iter().map(|r| r.normalized_reward).collect();
        let values: Vec<f64> = buffer.records.iter().map(|r| r.value).collect();
        let ones = vec![1.0; advs.len()];
        let clip = clip_loss(&ones, &advs, model.config.ppo.clip_eps);
        let loss = total_loss(clip, value_loss(&targets, &values), entropy_loss(&steps), self.weights());
        Ok((lengths.iter().sum::<f64>() / lengths.len() as f64, loss))
    }

    /// Runs the next epoch and records its metrics.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let start = Instant::now();
        let e = self.epoch as u64;
        let instances = self.epoch_instances(e)?;
        let buffer = self.collect(&instances, e)?;
        let collected = start.elapsed().as_secs_f64();
        let train_loss = self.update(&instances, &buffer, e)?;
        let updated = start.elapsed().as_secs_f64();
        let (val_mean_length, val_loss) = self.validate()?;
        let total = start.elapsed().as_secs_f64();
        if !val_loss.is_finite() || !val_mean_length.is_finite() {
            return Err(ModelError::NonFinite(format!("validation loss {val_loss} at epoch {}", e + 1)));
        }
        self.epoch += 1;
        let row = EpochMetrics {
            epoch: self.epoch,
            train_loss,
            val_loss,
            val_mean_length,
            wall_time_s: if self.opts.wall_clock { total } else { 0.0 },
        };
        log::info!(
            "epoch {} train_loss {:.6} val_loss {:.6} val_mean_length {:.4} ({total:.1}s)",
            row.epoch,
            row.train_loss,
            row.val_loss,
            row.val_mean_length
        );
        self.metrics.push(row.clone());
        self.timings.push(TimingRow {
            epoch: self.epoch,
            collect_s: collected,
            update_s: updated - collected,
            validate_s: total - updated,
            total_s: total,
        });
        self.persist()?;
        Ok(row)
    }

    fn persist(&self) -> Result<()> {
        let Some(dir) = &self.opts.out_dir else { return Ok(()) };
        write_rows(&dir.join(METRICS_FILE), &self.metrics)?;
        write_rows(&dir.join(TIMING_FILE), &self.timings)?;
        let every = self.model.config.ppo.checkpoint_every;
        if self.epoch % every == 0 || self.epoch == self.model.config.ppo.epochs {
            let ckpt = capture(&self.model, Some(&self.adam), self.epoch);
            ckpt.write(dir.join(format!("checkpoint_epoch{:04}.qgat", self.epoch)))?;
            ckpt.write(dir.join(LATEST_CHECKPOINT))?;
        }
        Ok(())
    }

    /// Runs epochs until the configured count is reached.
    pub fn run(&mut self) -> Result<&[EpochMetrics]> {
        while self.epoch < self.model.config.ppo.epochs {
            self.run_epoch()?;
        }
        Ok(&self.metrics)
    }
}

/// Trains from scratch or from `opts.resume` and returns the trainer.
pub fn train(config: &Config, opts: TrainOptions) -> Result<Trainer> {
    let mut t = Trainer::new(config, opts)?;
    t.run()?;
    Ok(t)
}

fn write_rows<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
