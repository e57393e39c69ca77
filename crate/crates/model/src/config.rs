//! Run configuration: one JSON document with sections `instance`, `encoder`,
//! `decoder`, `critic`, `ppo` and `qsim`. Missing fields take their defaults;
//! unknown fields are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qroute_qsim::{Entangler, MAX_QUBITS};

/// Classical maps everywhere, or circuit blocks at the default quantum sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Classical,
    Quantum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceConfig {
    pub customers: usize,
    pub capacity: u32,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self { customers: 20, capacity: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_x: usize,
    pub layers: usize,
    pub variant: Variant,
    /// Circuit block in place of the attention-score transform; follows `variant` when unset.
    pub quantum_score: Option<bool>,
    /// Circuit block in place of the message transform; classical unless set.
    pub quantum_value: Option<bool>,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_x: 128,
            layers: 3,
            variant: Variant::Quantum,
            quantum_score: None,
            quantum_value: None,
            leaky_slope: 0.2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn score_is_quantum(&self) -> bool {
        self.quantum_score.unwrap_or(self.variant == Variant::Quantum)
    }

    pub fn value_is_quantum(&self) -> bool {
        self.quantum_value.unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub heads: usize,
    pub clip: f64,
    pub temperature: f64,
    pub strategy: Strategy,
    pub sample_width: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { heads: 8, clip: 10.0, temperature: 2.5, strategy: Strategy::Greedy, sample_width: 128, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub layers: usize,
    /// Circuit blocks in place of the per-node layers; follows the encoder variant when unset.
    pub quantum: Option<bool>,
    /// Parallel circuit blocks per quantum layer.
    pub qnn_blocks: usize,
    pub conv_channels: usize,
    pub kernel_width: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { layers: 3, quantum: None, qnn_blocks: 4, conv_channels: 16, kernel_width: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub epochs: usize,
    /// Collection batches per epoch.
    pub collect_steps: usize,
    /// Episodes per collection batch.
    pub episodes_per_step: usize,
    pub update_epochs: usize,
    pub batch_size: usize,
    pub clip_eps: f64,
    pub lambda_p: f64,
    pub lambda_v: f64,
    pub lambda_e: f64,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    /// Draw training instances from a fixed pool of this size instead of fresh ones.
    pub train_set_size: Option<usize>,
    pub val_size: usize,
    pub val_seed: u64,
    pub checkpoint_every: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            collect_steps: 1,
            episodes_per_step: 256,
            update_epochs: 3,
            batch_size: 256,
            clip_eps: 0.2,
            lambda_p: 1.0,
            lambda_v: 0.5,
            lambda_e: 0.01,
            learning_rate: 1e-4,
            max_grad_norm: 2.0,
            seed: 0,
            train_set_size: None,
            val_size: 1000,
            val_seed: 1_000_003,
            checkpoint_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QsimConfig {
    pub n_qubits: usize,
    pub n_layers: usize,
    pub entangler: Entangler,
}

impl Default for QsimConfig {
    fn default() -> Self {
        Self { n_qubits: 6, n_layers: 5, entangler: Entangler::Ring }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub instance: InstanceConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub critic: CriticConfig,
    pub ppo: PpoConfig,
    pub qsim: QsimConfig,
}

/// A field that failed validation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn bad(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { field: field.to_owned(), message: message.into() }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| bad("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Default configuration with every site classical.
    pub fn classical() -> Self {
        let mut c = Self::default();
        c.encoder.variant = Variant::Classical;
        c
    }

    pub fn critic_is_quantum(&self) -> bool {
        self.critic.quantum.unwrap_or(self.encoder.variant == Variant::Quantum)
    }

    pub fn uses_circuits(&self) -> bool {
        self.encoder.score_is_quantum() || self.encoder.value_is_quantum() || self.critic_is_quantum()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let (i, e, d, c, p, q) = (&self.instance, &self.encoder, &self.decoder, &self.critic, &self.ppo, &self.qsim);
        if i.customers == 0 {
            return Err(bad("instance.customers", "must be at least 1"));
        }
        if i.capacity < qroute_core::instance::MAX_GENERATED_DEMAND {
            return Err(bad("instance.capacity", "must be at least 9"));
        }
        if e.d_x == 0 {
            return Err(bad("encoder.d_x", "must be at least 1"));
        }
        if !(e.leaky_slope.is_finite() && e.leaky_slope >= 0.0) {
            return Err(bad("encoder.leaky_slope", "must be a non-negative number"));
        }
        if !(e.bn_momentum > 0.0 && e.bn_momentum <= 1.0) {
            return Err(bad("encoder.bn_momentum", "must lie in (0, 1]"));
        }
        if !(e.bn_eps > 0.0) {
            return Err(bad("encoder.bn_eps", "must be positive"));
        }
        if d.heads == 0 || e.d_x % d.heads != 0 {
            return Err(bad("decoder.heads", format!("must be at least 1 and divide d_x = {}", e.d_x)));
        }
        if !(d.clip > 0.0 && d.clip.is_finite()) {
            return Err(bad("decoder.clip", "must be positive"));
        }
        if !(d.temperature > 0.0 && d.temperature.is_finite()) {
            return Err(bad("decoder.temperature", "must be positive"));
        }
        if d.sample_width == 0 {
            return Err(bad("decoder.sample_width", "must be at least 1"));
        }
        if c.conv_channels == 0 {
            return Err(bad("critic.conv_channels", "must be at least 1"));
        }
        if c.kernel_width == 0 || c.kernel_width % 2 == 0 {
            return Err(bad("critic.kernel_width", "must be odd"));
        }
        if self.critic_is_quantum() && c.qnn_blocks == 0 {
            return Err(bad("critic.qnn_blocks", "must be at least 1"));
        }
        if p.epochs == 0 {
            return Err(bad("ppo.epochs", "must be at least 1"));
        }
        if p.collect_steps == 0 || p.episodes_per_step == 0 {
            return Err(bad("ppo.collect_steps", "collection must gather at least one episode"));
        }
        if p.update_epochs == 0 {
            return Err(bad("ppo.update_epochs", "must be at least 1"));
        }
        if p.batch_size < 2 {
            return Err(bad("ppo.batch_size", "must be at least 2"));
        }
        if !(p.clip_eps > 0.0 && p.clip_eps < 1.0) {
            return Err(bad("ppo.clip_eps", "must lie in (0, 1)"));
        }
        for (name, w) in [("ppo.lambda_p", p.lambda_p), ("ppo.lambda_v", p.lambda_v), ("ppo.lambda_e", p.lambda_e)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(bad(name, "must be a non-negative number"));
            }
        }
        if !(p.learning_rate > 0.0 && p.learning_rate.is_finite()) {
            return Err(bad("ppo.learning_rate", "must be positive"));
        }
        if !(p.max_grad_norm > 0.0) {
            return Err(bad("ppo.max_grad_norm", "must be positive"));
        }
        if p.train_set_size == Some(0) {
            return Err(bad("ppo.train_set_size", "must be at least 1 when set"));
        }
        if p.val_size == 0 {
            return Err(bad("ppo.val_size", "must be at least 1"));
        }
        if p.checkpoint_every == 0 {
            return Err(bad("ppo.checkpoint_every", "must be at least 1"));
        }
        if q.n_qubits == 0 || q.n_qubits > MAX_QUBITS {
            return Err(bad("qsim.n_qubits", format!("must lie in 1..={MAX_QUBITS}")));
        }
        if q.n_layers == 0 {
            return Err(bad("qsim.n_layers", "must be at least 1"));
        }
        Ok(())
    }

    /// The configuration with every optional switch made explicit.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.encoder.quantum_score = Some(self.encoder.score_is_quantum());
        c.encoder.quantum_value = Some(self.encoder.value_is_quantum());
        c.critic.quantum = Some(self.critic_is_quantum());
        c
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First eight bytes of the SHA-256 of the resolved architecture sections.
    ///
    /// Training-schedule fields are excluded so a checkpoint can be resumed
    /// with a longer schedule.
    pub fn architecture_hash(&self) -> u64 {
        let r = self.resolved();
        let arch = serde_json::json!({
            "instance": r.instance,
            "encoder": r.encoder,
            "decoder": { "heads": r.decoder.heads, "clip": r.decoder.clip },
            "critic": r.critic,
            "qsim": r.qsim,
        });
        let digest = Sha256::digest(arch.to_string().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = Config::from_json("{}").unwrap();
        assert_eq!(c, Config::default());
        assert!(c.encoder.score_is_quantum());
        assert!(c.critic_is_quantum());
        assert!(!c.encoder.value_is_quantum());
    }

    #[test]
    fn field_level_errors() {
        let e = Config::from_json(r#"{"ppo": {"clip_eps": 1.5}}"#).unwrap_err();
        assert_eq!(e.field, "ppo.clip_eps");
        let e = Config::from_json(r#"{"decoder": {"heads": 3}}"#).unwrap_err();
        assert_eq!(e.field, "decoder.heads");
        let e = Config::from_json(r#"{"ppo": {"nonsense": 1}}"#).unwrap_err();
        assert_eq!(e.field, "config");
        let e = Config::from_json(r#"{"decoder": {"temperature": 0}}"#).unwrap_err();
        assert_eq!(e.field, "decoder.temperature");
    }

    #[test]
    fn resolved_round_trips_and_hash_ignores_schedule() {
        let c = Config::classical();
        let r = c.resolved();
        assert_eq!(r.critic.quantum, Some(false));
        let back = Config::from_json(&r.to_json_pretty()).unwrap();
        assert_eq!(back, r);
        let mut longer = c.clone();
        longer.ppo.epochs = 7;
        assert_eq!(longer.architecture_hash(), c.architecture_hash());
        assert_ne!(Config::default().architecture_hash(), c.architecture_hash());
    }
}
