use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qroute_core::{route_length, Instance};

use crate::config::Config;
use crate::critic::CriticParams;
use crate::decoder::{DecodeResult, DecoderParams, Pick};
use crate::encoder::{BnMode, BnStats, EncoderParams};
use crate::error::Result;
use crate::params::{ParamKind, ParamStore};
use crate::tape::Tape;

/// Trainable scalar counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct ParamCounts {
    pub classical: usize,
    /// Rotation angles of circuit blocks.
    pub quantum: usize,
    pub total: usize,
}

impl ParamCounts {
    fn new(classical: usize, quantum: usize) -> Self {
        Self { classical, quantum, total: classical + quantum }
    }
}

/// Encoder, decoder and critic with their parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: Config,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub critic: CriticParams,
}

/// One sampled training episode.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub decode: DecodeResult,
    pub length: f64,
    pub value: f64,
    pub bn_stats: Option<BnStats>,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: &Config, seed: u64) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::register(&mut store, &config, &mut rng);
        let decoder = DecoderParams::register(&mut store, &config, &mut rng);
        let critic = CriticParams::register(&mut store, &config, &mut rng);
        Ok(Self { config, store, encoder, decoder, critic })
    }

    /// Whole-model counts (encoder, decoder and critic).
    pub fn count_parameters(&self) -> ParamCounts {
        ParamCounts::new(self.store.count(ParamKind::Classical), self.store.count(ParamKind::Quantum))
    }

    /// Encoder-only counts.
    pub fn count_encoder_parameters(&self) -> ParamCounts {
        let (c, q) = self.store.count_prefix("enc/");
        ParamCounts::new(c, q)
    }

    /// Greedy decoding with inference-mode normalization.
    pub fn greedy(&self, instance: &Instance) -> Result<DecodeResult> {
        let mut tape = Tape::new(&self.store);
        let emb = self.encoder.encode(&mut tape, instance, BnMode::Eval)?;
        let cache = self.decoder.prepare(&mut tape, &emb);
        self.decoder.decode::<ChaCha8Rng>(&mut tape, &cache, instance, Pick::Greedy)
    }

    /// Shortest of `width` sampled routes, with inference-mode normalization.
    pub fn sample_best<R: Rng + ?Sized>(
        &self,
        instance: &Instance,
        width: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<(DecodeResult, f64)> {
        let mut tape = Tape::new(&self.store);
        let emb = self.encoder.encode(&mut tape, instance, BnMode::Eval)?;
        let cache = self.decoder.prepare(&mut tape, &emb);
        let mut best: Option<(DecodeResult, f64)> = None;
        for _ in 0..width.max(1) {
            let r = self.decoder.decode(&mut tape, &cache, instance, Pick::Sample { rng: &mut *rng, temperature })?;
            let len = route_length(instance, &r.route)?;
            if best.as_ref().map_or(true, |(_, b)| len < *b) {
                best = Some((r, len));
            }
        }
        Ok(best.expect("width is at least 1"))
    }

    /// A sampled episode with training-mode normalization and the critic's estimate.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        instance: &Instance,
        temperature: f64,
        bn: BnMode,
        rng: &mut R,
    ) -> Result<Rollout> {
        let mut tape = Tape::new(&self.store);
        let emb = self.encoder.encode(&mut tape, instance, bn)?;
        let value = self.critic.value_forward(&mut tape, &emb)?;
        let value = tape.value(value).item();
        let cache = self.decoder.prepare(&mut tape, &emb);
        let decode = self.decoder.decode(&mut tape, &cache, instance, Pick::Sample { rng, temperature })?;
        let length = route_length(instance, &decode.route)?;
        Ok(Rollout { decode, length, value, bn_stats: emb.bn_stats })
    }
}
