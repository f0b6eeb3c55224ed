//! Checks that the denoiser commutes with rotations and reflections of the
//! whole complex, and that transition log-densities are unchanged.
//!
//! ```bash
//! cargo run --release --example equivariance_check
//! ```

use std::sync::Arc;

use rand::Rng;

use pocketpo::denoiser::{forward, DenoiserConfig, DenoiserParams};
use pocketpo::diffusion::{logp_under, sample_prior, sample_transition};
use pocketpo::geometry::O3Transform;
use pocketpo::random::rng_from_seed;
use pocketpo::schedule::Schedule;
use pocketpo::synthworld::{generate_complex, sampling_frame, WorldConfig};

fn max_abs(a: &ndarray::Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn main() -> pocketpo::Result<()> {
    let sched = Schedule::polynomial(500, 1e-4)?;
    let mut params = DenoiserParams::init(DenoiserConfig { layers: 2, hidden: 16 }, 7)?;
    // output heads start at zero; give them weights so the check is not vacuous
    let mut init_rng = rng_from_seed(11);
    for t in params.tensors_mut() {
        if t.iter().all(|&v| v == 0.0) {
            t.mapv_inplace(|_| init_rng.random_range(-0.3..0.3));
        }
    }
    let (pocket, _) = generate_complex(&WorldConfig::default(), 0)?;
    let pocket = Arc::new(sampling_frame(&pocket)?);
    let mut rng = rng_from_seed(1);
    let state = sample_prior(&sched, 10, pocket.clone(), &mut rng)?;
    let out = forward(&params, &state.z, &state.pocket, state.t, sched.steps())?;
    let record = sample_transition(&sched, &params, &state, 495, &mut rng)?;

    let mut worst_coord: f64 = 0.0;
    let mut worst_feat: f64 = 0.0;
    let mut worst_logp: f64 = 0.0;
    for seed in 0..20 {
        let g = O3Transform::random(seed);
        let z = g.apply_ligand(&state.z);
        let p = g.apply_pocket(&state.pocket);
        let moved = forward(&params, &z, &p, state.t, sched.steps())?;
        let scale = max_abs(&out.eps_coord).max(1e-12);
        worst_coord = worst_coord.max(max_abs(&(&moved.eps_coord - &g.apply(&out.eps_coord))) / scale);
        worst_feat = worst_feat.max(max_abs(&(&moved.eps_feat - &out.eps_feat)));

        let mut rec = record.clone();
        rec.state.z = g.apply_ligand(&record.state.z);
        rec.state.pocket = Arc::new(g.apply_pocket(&record.state.pocket));
        rec.action = g.apply_ligand(&record.action);
        let lp = logp_under(&params, &rec, &sched)?;
        worst_logp = worst_logp.max((lp - record.logp).abs() / record.logp.abs().max(1.0));
    }
    let reflections = (0..20).filter(|&s| O3Transform::random(s).determinant() < 0.0).count();
    println!("20 random O(3) transforms, {reflections} of them improper:");
    println!("  coordinate output, relative error  {worst_coord:.2e}");
    println!("  feature output, absolute change     {worst_feat:.2e}");
    println!("  transition log-density, rel. change {worst_logp:.2e}");
    Ok(())
}
