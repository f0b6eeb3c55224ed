//! Generates a synthetic world and writes it to disk.
//!
//! ```bash
//! cargo run --release --example gen_world -- /tmp/world
//! ```

use std::path::PathBuf;

use pocketpo::rewards::evaluate;
use pocketpo::synthworld::{cavity_anchor, World, WorldConfig};

fn main() -> pocketpo::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("pocketpo-world"));
    let world = World::generate(&WorldConfig::default())?;
    world.write(&dir)?;
    println!("wrote {} complexes to {}", world.complexes.len(), dir.display());

    let reloaded = World::load(&dir)?;
    assert_eq!(reloaded.complexes.len(), world.complexes.len());

    for (i, (pocket, ligand)) in world.complexes.iter().enumerate().take(5) {
        let o = evaluate(ligand, pocket);
        let anchor = cavity_anchor(pocket)?;
        println!(
            "complex {i}: {} pocket atoms, {} ligand atoms, anchor ({:.2}, {:.2}, {:.2}), affinity {:.3}, qed {:.3}, sa {:.3}",
            pocket.len(),
            ligand.len(),
            anchor[0],
            anchor[1],
            anchor[2],
            o.affinity,
            o.qed_like,
            o.sa_like
        );
    }
    let sizes = world.size_sampler()?;
    println!("size histogram (pocket atoms -> ligand atoms -> count):");
    for (np, row) in sizes.histogram() {
        println!("  {np:>2}: {row:?}");
    }
    Ok(())
}
