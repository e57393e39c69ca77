use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qroute_core::generate_instances;
use qroute_core::io::write_instances;

use crate::error::Result;
use crate::GenerateArgs;

pub fn run(args: &GenerateArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let instances = generate_instances(args.count, args.m, args.capacity, &mut rng)?;
    write_instances(&args.out, &instances)?;
    println!(
        "wrote {} instances (m = {}, capacity = {}, seed = {}) to {}",
        instances.len(),
        args.m,
        args.capacity,
        args.seed,
        args.out.display()
    );
    Ok(())
}
