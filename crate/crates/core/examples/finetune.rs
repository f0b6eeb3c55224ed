//! Pretrains a small denoiser, then runs policy optimization on one pocket
//! and compares samples before and after.
//!
//! ```bash
//! cargo run --release --example finetune -- 20000 30
//! ```

use std::sync::Arc;

use pocketpo::denoiser::{DenoiserConfig, DenoiserParams};
use pocketpo::pretrain::{centered_complexes, pretrain, PretrainConfig};
use pocketpo::rewards::{mean, OracleRegistry, RewardConfig};
use pocketpo::rl::{finetune, sample_and_score, FinetuneContext, FinetuneState, PpoConfig};
use pocketpo::schedule::Schedule;
use pocketpo::synthworld::{sampling_frame, World, WorldConfig};

fn main() -> pocketpo::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().ok());
    let pretrain_steps = args.next().flatten().unwrap_or(20000);
    let updates = args.next().flatten().unwrap_or(30);

    let sched = Schedule::polynomial(500, 1e-4)?;
    let world = World::generate(&WorldConfig::default())?;
    let mut params = DenoiserParams::init(DenoiserConfig { layers: 2, hidden: 16 }, 0)?;
    let pre = PretrainConfig { steps: pretrain_steps, ..Default::default() };
    println!("pretraining for {pretrain_steps} steps");
    pretrain(&sched, &mut params, &centered_complexes(&world), &pre, 1, |_, _| {})?;

    let sizes = world.size_sampler()?;
    let rewards = RewardConfig::default();
    let registry = OracleRegistry::default();
    let ctx = FinetuneContext { sched: &sched, sizes: &sizes, rewards: &rewards, registry: &registry };
    let pocket = Arc::new(sampling_frame(&world.complexes[0].0)?);

    let affinity = |batch: &pocketpo::rewards::RewardBatch| mean(&batch.oracles.iter().map(|o| o.affinity).collect::<Vec<_>>());
    let (_, before) = sample_and_score(ctx, &params, pocket.clone(), 100, 5, 999)?;

    let cfg = PpoConfig { n_updates: updates, ..Default::default() };
    let mut state = FinetuneState::new(params, &cfg, 0);
    let out = finetune(ctx, pocket.clone(), &cfg, &mut state, |r| {
        let row = r.row;
        println!(
            "iter {:>3}  composite {:>7.3}  affinity {:>7.3}  qed {:.3}  sa {:.3}  invalid {:.2}",
            row.iteration, row.composite_mean, row.affinity_mean, row.qed_mean, row.sa_mean, row.invalid_rate
        );
        Ok(())
    })?;
    let (_, after) = sample_and_score(ctx, &state.params, pocket, 100, 5, 999)?;
    println!("100-sample mean affinity: {:.3} before, {:.3} after", affinity(&before), affinity(&after));
    println!("valid rate: {:.2} before, {:.2} after", 1.0 - before.invalid_rate(), 1.0 - after.invalid_rate());
    println!("pool of {} ligands harvested", out.pool.len());
    Ok(())
}
