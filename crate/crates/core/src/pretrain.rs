//! Noise-matching pretraining of the denoiser on a synthetic world.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserParams;
use crate::diffusion::pretrain_loss_and_grad;
use crate::error::{Error, Result};
use crate::geometry::{center_on_ligand, LigandCloud, PocketCloud};
use crate::optim::{AdamW, AdamWConfig};
use crate::random::rng_from_seed;
use crate::schedule::Schedule;
use crate::synthworld::World;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Complexes per step.
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 5000, batch_size: 4, optimizer: AdamWConfig { lr: 1e-3, weight_decay: 0.0, ..Default::default() } }
    }
}

/// Training set in the ligand-centred frame.
pub fn centered_complexes(world: &World) -> Vec<(PocketCloud, LigandCloud)> {
    world.complexes.iter().map(|(p, l)| center_on_ligand(p, l)).collect()
}

/// Runs `cfg.steps` optimizer steps and returns the mean batch loss per step.
/// `on_step(step, loss)` is called after every step.
pub fn pretrain(
    sched: &Schedule,
    params: &mut DenoiserParams,
    data: &[(PocketCloud, LigandCloud)],
    cfg: &PretrainConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("pretraining needs at least one complex".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretrain batch_size must be >= 1".into()));
    }
    cfg.optimizer.validate()?;
    let mut opt = AdamW::new(cfg.optimizer, params);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = rng_from_seed(seed);
        rng.set_stream(step as u64);
        let draws: Vec<(usize, u64)> =
            (0..cfg.batch_size).map(|_| (rng.random_range(0..data.len()), rng.random())).collect();
        let current = &*params;
        let results = draws
            .par_iter()
            .map(|&(i, s)| {
                let (pocket, ligand) = &data[i];
                pretrain_loss_and_grad(sched, current, ligand, pocket, &mut rng_from_seed(s))
            })
            .collect::<Result<Vec<_>>>()?;
        let k = 1.0 / cfg.batch_size as f64;
        let mut grad = params.zeros_like();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += k * l;
            grad.add_scaled(g, k);
        }
        opt.update(params, &grad)?;
        losses.push(loss);
        on_step(step, loss);
    }
    Ok(losses)
}

/// Centred moving average with window `w`, used to judge loss trends.
pub fn smooth(xs: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    xs.windows(w.min(xs.len()).max(1)).map(|win| win.iter().sum::<f64>() / win.len() as f64).collect()
}
