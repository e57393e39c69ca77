//! Attention-based routing policy with optional variational-circuit blocks,
//! its critic, and the PPO training loop.

pub mod checkpoint;
pub mod config;
pub mod critic;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod ppo;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{Config, Strategy, Variant};
pub use error::{ModelError, Result};
pub use model::{Model, ParamCounts};
pub use train::{train, EpochMetrics, TrainOptions, Trainer};
