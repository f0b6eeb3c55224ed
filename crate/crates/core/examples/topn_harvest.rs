//! Selects the best ligands of a harvested pool by the weighted z-score.
//!
//! Reads `pool.jsonl` written by `pocketpo finetune`; without an argument the
//! pool is the reference ligands of a generated world placed into pocket 0.
//!
//! ```bash
//! cargo run --release --example topn_harvest -- runs/ft/pool.jsonl 10
//! ```

use std::path::PathBuf;

use pocketpo::cli::commands::read_pool;
use pocketpo::rewards::{evaluate, mean};
use pocketpo::rl::{topn_harvest, PoolEntry};
use pocketpo::synthworld::{World, WorldConfig};

fn synthetic_pool() -> pocketpo::Result<Vec<PoolEntry>> {
    let world = World::generate(&WorldConfig::default())?;
    let pocket = &world.complexes[0].0;
    Ok(world
        .complexes
        .iter()
        .enumerate()
        .map(|(i, (p, l))| {
            let shift = p.centroid() - pocket.centroid();
            let moved = pocketpo::geometry::LigandCloud { coords: &l.coords - &shift, features: l.features.clone() };
            PoolEntry::new(0, i, &moved, &evaluate(&moved, pocket), 0.0)
        })
        .collect())
}

fn main() -> pocketpo::Result<()> {
    let mut args = std::env::args().skip(1);
    let pool = match args.next() {
        Some(path) => read_pool(&PathBuf::from(path))?,
        None => synthetic_pool()?,
    };
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);
    let valid: Vec<&PoolEntry> = pool.iter().filter(|e| e.valid).collect();
    let top = topn_harvest(&pool, n)?;
    println!("{} ligands in the pool, {} valid, keeping {}", pool.len(), valid.len(), top.len());
    for e in &top {
        println!(
            "iter {:>3} #{:<3} affinity {:>7.3}  qed {:.3}  sa {:.3}",
            e.iteration, e.index, e.affinity, e.qed_like, e.sa_like
        );
    }
    let pool_aff = mean(&valid.iter().map(|e| e.affinity).collect::<Vec<_>>());
    let top_aff = mean(&top.iter().map(|e| e.affinity).collect::<Vec<_>>());
    println!("mean affinity: pool {pool_aff:.3}, top-{n} {top_aff:.3}");
    Ok(())
}
