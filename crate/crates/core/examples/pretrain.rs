//! Noise-matching pretraining on a small synthetic world.
//!
//! ```bash
//! cargo run --release --example pretrain -- 3000
//! ```

use std::sync::Arc;

use pocketpo::denoiser::{DenoiserConfig, DenoiserParams};
use pocketpo::pretrain::{centered_complexes, pretrain, smooth, PretrainConfig};
use pocketpo::rewards::{score_batch, OracleRegistry, RewardConfig};
use pocketpo::rl::rollout;
use pocketpo::schedule::Schedule;
use pocketpo::synthworld::{sampling_frame, World, WorldConfig};

fn main() -> pocketpo::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let sched = Schedule::polynomial(500, 1e-4)?;
    let world = World::generate(&WorldConfig::default())?;
    let mut params = DenoiserParams::init(DenoiserConfig { layers: 2, hidden: 16 }, 0)?;
    let cfg = PretrainConfig { steps, ..Default::default() };
    let losses = pretrain(&sched, &mut params, &centered_complexes(&world), &cfg, 1, |step, loss| {
        if step % 500 == 0 {
            println!("step {step:>6}  loss {loss:.4}");
        }
    })?;
    let curve = smooth(&losses, 200);
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        println!("smoothed loss {first:.4} -> {last:.4}");
    }

    let pocket = Arc::new(sampling_frame(&world.complexes[0].0)?);
    let batch = rollout(&sched, &params, pocket.clone(), &world.size_sampler()?, 32, 5, 0, false)?;
    let scored = score_batch(&batch.ligands(), &pocket, &RewardConfig::default(), &OracleRegistry::default())?;
    println!("32 samples on pocket 0 at stride 5: {:.0}% valid", 100.0 * (1.0 - scored.invalid_rate()));
    Ok(())
}
