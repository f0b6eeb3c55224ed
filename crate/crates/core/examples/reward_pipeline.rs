//! Oracles, rank transformation, diversity and the invalid penalty on one
//! batch of ligands.
//!
//! ```bash
//! cargo run --release --example reward_pipeline
//! ```

use pocketpo::geometry::LigandCloud;
use pocketpo::random::{normal_matrix, rng_from_seed};
use pocketpo::rewards::{gaussian_rank_transform, score_batch, OracleRegistry, RewardConfig, AFFINITY};
use pocketpo::synthworld::{World, WorldConfig};

fn main() -> pocketpo::Result<()> {
    let world = World::generate(&WorldConfig { n_pockets: 12, ..Default::default() })?;
    let pocket = &world.complexes[0].0;

    // reference ligands placed into pocket 0, some of them scrambled
    let mut rng = rng_from_seed(3);
    let ligands: Vec<LigandCloud> = world
        .complexes
        .iter()
        .enumerate()
        .map(|(i, (p, l))| {
            let shift = p.centroid() - pocket.centroid();
            let mut l = LigandCloud { coords: &l.coords - &shift, features: l.features.clone() };
            if i % 4 == 3 {
                l.coords = &l.coords + &(normal_matrix(&mut rng, l.len(), 3) * 1.5);
            }
            l
        })
        .collect();

    let cfg = RewardConfig::default();
    let batch = score_batch(&ligands, pocket, &cfg, &OracleRegistry::default())?;
    println!("weights {:?}", cfg.weights);
    println!(" i  atoms valid  affinity    qed     sa   div  composite");
    for (i, o) in batch.oracles.iter().enumerate() {
        println!(
            "{i:>2}  {:>5} {:>5} {:>9.3} {:>6.3} {:>6.3} {:>5.3} {:>10.3}",
            ligands[i].len(),
            o.valid,
            o.affinity,
            o.qed_like,
            o.sa_like,
            batch.diversity[i],
            batch.composite[i]
        );
    }
    println!("invalid rate {:.2}, penalty {:.3}", batch.invalid_rate(), batch.penalty);
    println!("transformed affinity {:.3?}", batch.transformed[AFFINITY]);
    println!("rank transform of [3, 1, 2]: {:.4?}", gaussian_rank_transform(&[3.0, 1.0, 2.0])?);
    Ok(())
}
