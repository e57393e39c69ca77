use qroute_model::{Config, Model, ParamCounts};

use crate::error::Result;
use crate::{load_config, ParamsArgs};

/// Counts for the configured model and for the same configuration with every
/// site classical.
pub fn counts(config: &Config) -> Result<(ParamCounts, ParamCounts)> {
    let mut reference = config.clone();
    reference.encoder.variant = qroute_model::Variant::Classical;
    reference.encoder.quantum_score = None;
    reference.encoder.quantum_value = None;
    reference.critic.quantum = None;
    let configured = Model::new(config, 0)?.count_parameters();
    let classical = Model::new(&reference, 0)?.count_parameters();
    Ok((configured, classical))
}

pub fn run(args: &ParamsArgs) -> Result<()> {
    let config = match &args.config {
        Some(p) => load_config(p)?,
        None => Config::default(),
    };
    let (configured, classical) = counts(&config)?;
    println!("{:<22} {:>10} {:>10} {:>10}", "model", "classical", "quantum", "total");
    for (name, c) in [("configured", configured), ("classical reference", classical)] {
        println!("{name:<22} {:>10} {:>10} {:>10}", c.classical, c.quantum, c.total);
    }
    println!("total ratio configured/reference {:.4}", configured.total as f64 / classical.total as f64);
    Ok(())
}
