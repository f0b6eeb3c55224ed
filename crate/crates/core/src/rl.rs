//! Denoising policy optimization: coarse-stride rollouts, critic-free group
//! advantages, the clipped surrogate, AdamW updates and top-N harvesting.
//!
//! With one gradient pass per batch the update happens at `theta = theta_old`,
//! where every ratio is exactly 1 and the surrogate gradient reduces to
//! `mean(A * grad log p)`. Rollouts therefore record `grad log p` while
//! sampling and the first pass reuses it; later passes re-score every stored
//! transition on a fresh tape.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::denoiser::{self, DenoiserParams};
use crate::diffusion::{self, decode, logp_on_tape, sample_prior, NoisyState, TransitionRecord};
use crate::error::{Error, Result};
use crate::geometry::{LigandCloud, PocketCloud};
use crate::optim::{AdamW, AdamWConfig};
use crate::random::{rng_from_seed, Rng64};
use crate::rewards::{self, score_batch, OracleRegistry, OracleVector, RewardBatch, RewardConfig, STD_EPS};
use crate::schedule::Schedule;
use crate::synthworld::SizeSampler;

/// Log-ratio clamp applied before exponentiation.
pub const LOG_RATIO_CLAMP: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub n_updates: usize,
    pub stride: usize,
    pub epochs_per_batch: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            learning_rate: 1e-5,
            weight_decay: 1e-4,
            batch_size: 32,
            n_updates: 100,
            stride: 5,
            epochs_per_batch: 1,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config(format!("clip_eps must be in (0, 1), got {}", self.clip_eps)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if self.stride == 0 || self.stride > steps {
            return Err(Error::Config(format!("stride must be in 1..={steps}, got {}", self.stride)));
        }
        if self.epochs_per_batch == 0 {
            return Err(Error::Config("epochs_per_batch must be >= 1".into()));
        }
        self.optimizer().validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.learning_rate, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

/// One sampled denoising trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<TransitionRecord>,
    pub ligand: LigandCloud,
    /// `sum_t grad log p(a_t | s_t)` at the sampling parameters, if recorded.
    pub grad_logp: Option<DenoiserParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
    pub pocket: Arc<PocketCloud>,
}

impl RolloutBatch {
    pub fn ligands(&self) -> Vec<LigandCloud> {
        self.trajectories.iter().map(|t| t.ligand.clone()).collect()
    }

    pub fn transition_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.records.len()).sum()
    }
}

/// Samples one trajectory with its own random stream.
pub fn sample_trajectory(
    sched: &Schedule,
    params: &DenoiserParams,
    pocket: Arc<PocketCloud>,
    n_atoms: usize,
    stride: usize,
    rng: &mut Rng64,
    with_grad: bool,
) -> Result<Trajectory> {
    let grid = sched.coarse_grid(stride)?;
    let mut state = sample_prior(sched, n_atoms, pocket, rng)?;
    let mut records = Vec::with_capacity(grid.len());
    let mut grad_logp = with_grad.then(|| params.zeros_like());
    for (_, s) in grid {
        let rec = match grad_logp.as_mut() {
            Some(acc) => {
                let (rec, g) = diffusion::sample_transition_with_grad(sched, params, &state, s, rng)?;
                acc.add_scaled(&g, 1.0);
                rec
            }
            None => diffusion::sample_transition(sched, params, &state, s, rng)?,
        };
        state = NoisyState { z: rec.action.clone(), t: s, pocket: state.pocket.clone() };
        records.push(rec);
    }
    Ok(Trajectory { records, ligand: decode(&state.z), grad_logp })
}

/// `batch_size` trajectories; trajectory `i` uses the stream
/// `base_seed + i` and draws its size from `sizes`, so the result does not
/// depend on the number of worker threads.
pub fn rollout(
    sched: &Schedule,
    params: &DenoiserParams,
    pocket: Arc<PocketCloud>,
    sizes: &SizeSampler,
    batch_size: usize,
    stride: usize,
    base_seed: u64,
    with_grad: bool,
) -> Result<RolloutBatch> {
    let trajectories = (0..batch_size)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(base_seed.wrapping_add(i as u64));
            let n = sizes.sample(pocket.len(), &mut rng);
            sample_trajectory(sched, params, pocket.clone(), n, stride, &mut rng, with_grad)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutBatch { trajectories, pocket })
}

/// `(r - mean) / (std + eps)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!("group advantages need >= 2 rewards, got {}", rewards.len())));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("rewards"));
    }
    let m = rewards::mean(rewards);
    let s = rewards::population_std(rewards);
    if s <= STD_EPS {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - m) / s).collect())
}

/// `min(w A, clip(w, 1 - eps, 1 + eps) A)`.
pub fn ppo_term(omega: f64, advantage: f64, clip_eps: f64) -> f64 {
    (omega * advantage).min(omega.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage)
}

fn check_alignment(batch: &RolloutBatch, advantages: &[f64]) -> Result<usize> {
    if advantages.len() != batch.trajectories.len() {
        return Err(Error::Shape(format!(
            "{} advantages for {} trajectories",
            advantages.len(),
            batch.trajectories.len()
        )));
    }
    let m = batch.transition_count();
    if m == 0 {
        return Err(Error::InvalidArgument("batch has no transitions".into()));
    }
    Ok(m)
}

/// Surrogate term of one transition on a tape, scaled by `1 / m`.
fn term_on_tape(
    tape: &mut Tape,
    p: &[crate::autodiff::Var],
    params: &DenoiserParams,
    sched: &Schedule,
    rec: &TransitionRecord,
    adv: f64,
    clip_eps: f64,
    m: usize,
) -> Result<crate::autodiff::Var> {
    let lp = logp_on_tape(tape, p, params.config(), sched, rec)?;
    let log_ratio = tape.add_scalar(lp, -rec.logp);
    let log_ratio = tape.clamp(log_ratio, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
    let omega = tape.exp(log_ratio);
    let unclipped = tape.scale(omega, adv);
    let clipped = tape.clamp(omega, 1.0 - clip_eps, 1.0 + clip_eps);
    let clipped = tape.scale(clipped, adv);
    let term = tape.minimum(unclipped, clipped);
    Ok(tape.scale(term, 1.0 / m as f64))
}

/// Clipped surrogate averaged over all transitions (to be maximized).
pub fn ppo_loss(
    params: &DenoiserParams,
    batch: &RolloutBatch,
    advantages: &[f64],
    clip_eps: f64,
    sched: &Schedule,
) -> Result<f64> {
    let m = check_alignment(batch, advantages)?;
    let per_traj = batch
        .trajectories
        .par_iter()
        .zip(advantages)
        .map(|(traj, &adv)| {
            let mut sum = 0.0;
            for rec in &traj.records {
                let mut tape = Tape::new();
                let p = params.to_tape(&mut tape, false);
                let term = term_on_tape(&mut tape, &p, params, sched, rec, adv, clip_eps, m)?;
                sum += tape.scalar_value(term);
            }
            Ok(sum)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_traj.iter().sum())
}

/// Surrogate value and its gradient, re-scoring every transition.
pub fn ppo_loss_and_grad(
    params: &DenoiserParams,
    batch: &RolloutBatch,
    advantages: &[f64],
    clip_eps: f64,
    sched: &Schedule,
) -> Result<(f64, DenoiserParams)> {
    let m = check_alignment(batch, advantages)?;
    let per_traj = batch
        .trajectories
        .par_iter()
        .zip(advantages)
        .map(|(traj, &adv)| {
            let mut sum = 0.0;
            let mut grad = params.zeros_like();
            for rec in &traj.records {
                let (v, g) = denoiser::gradient(params, |tape, p| {
                    term_on_tape(tape, p, params, sched, rec, adv, clip_eps, m)
                })?;
                sum += v;
                grad.add_scaled(&g, 1.0);
            }
            Ok((sum, grad))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut grad = params.zeros_like();
    for (v, g) in &per_traj {
        total += v;
        grad.add_scaled(g, 1.0);
    }
    Ok((total, grad))
}

/// `mean_{i,t} A_i grad log p` from the gradients recorded during sampling:
/// the surrogate gradient at `theta = theta_old`.
pub fn policy_gradient_at_sampling(batch: &RolloutBatch, advantages: &[f64]) -> Result<DenoiserParams> {
    let m = check_alignment(batch, advantages)?;
    let first = batch.trajectories[0]
        .grad_logp
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("rollout did not record log-density gradients".into()))?;
    let mut grad = first.zeros_like();
    for (traj, &adv) in batch.trajectories.iter().zip(advantages) {
        let g = traj
            .grad_logp
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("rollout did not record log-density gradients".into()))?;
        grad.add_scaled(g, adv / m as f64);
    }
    Ok(grad)
}

/// One history row: batch statistics of the raw oracles and the reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub affinity_mean: f64,
    pub affinity_std: f64,
    pub qed_mean: f64,
    pub qed_std: f64,
    pub sa_mean: f64,
    pub sa_std: f64,
    pub composite_mean: f64,
    pub composite_std: f64,
    pub invalid_rate: f64,
}

pub const HISTORY_HEADER: &str =
    "iteration,affinity_mean,affinity_std,qed_mean,qed_std,sa_mean,sa_std,composite_mean,composite_std,invalid_rate";

impl HistoryRow {
    pub fn from_batch(iteration: usize, batch: &RewardBatch) -> Self {
        let col = |f: fn(&OracleVector) -> f64| batch.oracles.iter().map(f).collect::<Vec<_>>();
        let (a, q, s) = (col(|o| o.affinity), col(|o| o.qed_like), col(|o| o.sa_like));
        Self {
            iteration,
            affinity_mean: rewards::mean(&a),
            affinity_std: rewards::population_std(&a),
            qed_mean: rewards::mean(&q),
            qed_std: rewards::population_std(&q),
            sa_mean: rewards::mean(&s),
            sa_std: rewards::population_std(&s),
            composite_mean: rewards::mean(&batch.composite),
            composite_std: rewards::population_std(&batch.composite),
            invalid_rate: batch.invalid_rate(),
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.iteration,
            self.affinity_mean,
            self.affinity_std,
            self.qed_mean,
            self.qed_std,
            self.sa_mean,
            self.sa_std,
            self.composite_mean,
            self.composite_std,
            self.invalid_rate
        )
    }
}

pub fn write_history_csv<W: std::io::Write>(mut out: W, rows: &[HistoryRow]) -> std::io::Result<()> {
    writeln!(out, "{HISTORY_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

/// A ligand generated during fine-tuning, with its oracle values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub iteration: usize,
    pub index: usize,
    pub affinity: f64,
    pub qed_like: f64,
    pub sa_like: f64,
    pub valid: bool,
    pub composite: f64,
    pub types: Vec<usize>,
    pub coords: Vec<[f64; 3]>,
}

impl PoolEntry {
    pub fn new(iteration: usize, index: usize, ligand: &LigandCloud, oracle: &OracleVector, composite: f64) -> Self {
        Self {
            iteration,
            index,
            affinity: oracle.affinity,
            qed_like: oracle.qed_like,
            sa_like: oracle.sa_like,
            valid: oracle.valid,
            composite,
            types: ligand.types(),
            coords: ligand.coords.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect(),
        }
    }

    pub fn ligand(&self) -> Result<LigandCloud> {
        let coords = ndarray::Array2::from_shape_fn((self.coords.len(), 3), |(i, c)| self.coords[i][c]);
        LigandCloud::from_types(coords, &self.types)
    }
}

/// The `n` best valid ligands by top-N z-score, best first. Ties keep pool order.
pub fn topn_harvest(pool: &[PoolEntry], n: usize) -> Result<Vec<PoolEntry>> {
    let valid: Vec<&PoolEntry> = pool.iter().filter(|e| e.valid).collect();
    if valid.is_empty() {
        return Err(Error::InvalidArgument("pool has no valid ligands".into()));
    }
    let aff: Vec<f64> = valid.iter().map(|e| e.affinity).collect();
    let qed: Vec<f64> = valid.iter().map(|e| e.qed_like).collect();
    let sa: Vec<f64> = valid.iter().map(|e| e.sa_like).collect();
    let z = rewards::topn_scores(&aff, &qed, &sa)?;
    let mut order: Vec<usize> = (0..valid.len()).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]));
    Ok(order.into_iter().take(n).map(|i| valid[i].clone()).collect())
}

/// Mutable fine-tuning state; everything a checkpoint must restore.
#[derive(Debug, Clone)]
pub struct FinetuneState {
    pub params: DenoiserParams,
    pub optimizer: AdamW,
    pub iteration: usize,
    pub rng: Rng64,
}

impl FinetuneState {
    pub fn new(params: DenoiserParams, cfg: &PpoConfig, seed: u64) -> Self {
        let optimizer = AdamW::new(cfg.optimizer(), &params);
        Self { params, optimizer, iteration: 0, rng: rng_from_seed(seed) }
    }
}

/// Everything one iteration produced, handed to the observer.
#[derive(Debug)]
pub struct IterationReport<'a> {
    pub row: &'a HistoryRow,
    pub batch: &'a RewardBatch,
    pub state: &'a FinetuneState,
    pub updated: bool,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub history: Vec<HistoryRow>,
    pub pool: Vec<PoolEntry>,
}

/// Fixed inputs of a fine-tuning run.
#[derive(Debug, Clone, Copy)]
pub struct FinetuneContext<'a> {
    pub sched: &'a Schedule,
    pub sizes: &'a SizeSampler,
    pub rewards: &'a RewardConfig,
    pub registry: &'a OracleRegistry,
}

/// Runs from `state.iteration` up to `cfg.n_updates` updates, then scores one
/// more batch so the history has `n_updates + 1` rows. The harvested pool
/// holds the ligands of every batch used for an update.
pub fn finetune(
    ctx: FinetuneContext<'_>,
    pocket: Arc<PocketCloud>,
    cfg: &PpoConfig,
    state: &mut FinetuneState,
    mut observe: impl FnMut(&IterationReport<'_>) -> Result<()>,
) -> Result<FinetuneOutput> {
    cfg.validate(ctx.sched.steps())?;
    ctx.rewards.validate(ctx.registry)?;
    let mut history = Vec::with_capacity(cfg.n_updates + 1);
    let mut pool = Vec::with_capacity(cfg.n_updates * cfg.batch_size);
    while state.iteration <= cfg.n_updates {
        let it = state.iteration;
        let train = it < cfg.n_updates;
        let base_seed: u64 = state.rng.random();
        let batch = rollout(
            ctx.sched,
            &state.params,
            pocket.clone(),
            ctx.sizes,
            cfg.batch_size,
            cfg.stride,
            base_seed,
            train,
        )?;
        let scored = score_batch(&batch.ligands(), &pocket, ctx.rewards, ctx.registry)?;
        let row = HistoryRow::from_batch(it, &scored);
        let mut updated = false;
        if train {
            for (i, (traj, o)) in batch.trajectories.iter().zip(&scored.oracles).enumerate() {
                pool.push(PoolEntry::new(it, i, &traj.ligand, o, scored.composite[i]));
            }
            if scored.valid_count() == 0 {
                log::warn!("iteration {it}: no valid ligand in the batch, skipping update");
            } else {
                let adv = group_advantages(&scored.composite)?;
                for epoch in 0..cfg.epochs_per_batch {
                    // the surrogate gradient is an ascent direction; the optimizer descends
                    let grad = if epoch == 0 {
                        policy_gradient_at_sampling(&batch, &adv)?
                    } else {
                        ppo_loss_and_grad(&state.params, &batch, &adv, cfg.clip_eps, ctx.sched)?.1
                    };
                    let mut descent = grad.zeros_like();
                    descent.add_scaled(&grad, -1.0);
                    updated |= state.optimizer.update(&mut state.params, &descent)?;
                }
            }
        }
        state.iteration += 1;
        history.push(row.clone());
        observe(&IterationReport { row: &row, batch: &scored, state, updated })?;
    }
    Ok(FinetuneOutput { history, pool })
}

/// `n` independent samples from `params`, scored as one batch.
pub fn sample_and_score(
    ctx: FinetuneContext<'_>,
    params: &DenoiserParams,
    pocket: Arc<PocketCloud>,
    n: usize,
    stride: usize,
    seed: u64,
) -> Result<(RolloutBatch, RewardBatch)> {
    let batch = rollout(ctx.sched, params, pocket.clone(), ctx.sizes, n, stride, seed, false)?;
    let scored = score_batch(&batch.ligands(), &pocket, ctx.rewards, ctx.registry)?;
    Ok((batch, scored))
}
