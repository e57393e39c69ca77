use qroute_model::train::{LATEST_CHECKPOINT, METRICS_FILE};
use qroute_model::{TrainOptions, Trainer};

use crate::error::Result;
use crate::{load_config, TrainArgs};

pub fn run(args: &TrainArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.ppo.seed = seed;
    }
    let opts = TrainOptions {
        out_dir: Some(args.out_dir.clone()),
        resume: args.resume.clone(),
        threads: args.parallel.threads as usize,
        wall_clock: args.wall_clock,
    };
    let mut trainer = Trainer::new(&config, opts)?;
    if trainer.epoch > 0 {
        log::info!("resuming after epoch {}", trainer.epoch);
    }
    trainer.run()?;
    if let Some(last) = trainer.metrics.last() {
        println!(
            "trained {} epochs: train_loss {:.6}, val_loss {:.6}, val_mean_length {:.4}",
            last.epoch, last.train_loss, last.val_loss, last.val_mean_length
        );
    }
    println!(
        "metrics in {}, latest checkpoint {}",
        args.out_dir.join(METRICS_FILE).display(),
        args.out_dir.join(LATEST_CHECKPOINT).display()
    );
    Ok(())
}
