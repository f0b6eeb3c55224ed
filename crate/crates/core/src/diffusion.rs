//! Forward noising, reverse transitions at arbitrary stride, and the action
//! log-densities the policy optimizer needs.
//!
//! Coordinate noise always lives in the centre-of-mass-free subspace;
//! feature noise is unconstrained. Log-densities are isotropic Gaussians over
//! all stored components (`3N + N K`). The true coordinate density lives in
//! `3(N - 1)` dimensions, but the offset depends only on `sigma_q`, which is
//! shared by every policy evaluated on the same transition, so it cancels in
//! likelihood ratios. [`logp_corrected`] reports the subspace density.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::denoiser::{self, DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::geometry::{project_com_free, LigandCloud, PocketCloud, FEATURE_SCALE, LIGAND_TYPES};
use crate::random::normal_matrix;
use crate::schedule::Schedule;

/// MDP state: the noisy ligand at step `t` and its pocket.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyState {
    pub z: LigandCloud,
    pub t: usize,
    pub pocket: Arc<PocketCloud>,
}

/// One reverse step `z_t -> z_s` with everything needed to re-score it.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub state: NoisyState,
    pub action: LigandCloud,
    pub logp: f64,
    pub s: usize,
}

/// Compact dump line for a transition.
#[derive(Debug, Clone, Serialize)]
pub struct TransitionSummary {
    pub t: usize,
    pub s: usize,
    pub logp: f64,
}

impl TransitionRecord {
    pub fn summary(&self) -> TransitionSummary {
        TransitionSummary { t: self.state.t, s: self.s, logp: self.logp }
    }
}

/// Gaussian noise for an `n`-atom ligand: CoM-free coordinates, free features.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> (Array2<f64>, Array2<f64>) {
    let coords = project_com_free(&normal_matrix(rng, n, 3));
    let feats = normal_matrix(rng, n, LIGAND_TYPES);
    (coords, feats)
}

/// `z_t = alpha_t m + sigma_t eps` for given noise.
pub fn noise_with(sched: &Schedule, ligand: &LigandCloud, t: usize, eps_coord: &Array2<f64>, eps_feat: &Array2<f64>) -> LigandCloud {
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    LigandCloud {
        coords: project_com_free(&(&ligand.coords * a + &(eps_coord * s))),
        features: &ligand.features * a + &(eps_feat * s),
    }
}

/// Draws `z_t ~ q(z_t | m)` for a clean ligand in a ligand-centred complex.
pub fn noise_to<R: Rng + ?Sized>(
    sched: &Schedule,
    ligand: &LigandCloud,
    pocket: Arc<PocketCloud>,
    t: usize,
    rng: &mut R,
) -> Result<NoisyState> {
    if t == 0 || t > sched.steps() {
        return Err(Error::InvalidArgument(format!("noising needs 1 <= t <= {}, got {t}", sched.steps())));
    }
    let (ec, ef) = sample_noise(rng, ligand.len());
    Ok(NoisyState { z: noise_with(sched, ligand, t, &ec, &ef), t, pocket })
}

/// Like [`noise_to`] but accepts `t = 0`, which returns the clean ligand.
pub fn noise_to_or_clean<R: Rng + ?Sized>(
    sched: &Schedule,
    ligand: &LigandCloud,
    pocket: Arc<PocketCloud>,
    t: usize,
    rng: &mut R,
) -> Result<NoisyState> {
    if t == 0 {
        return Ok(NoisyState { z: ligand.clone(), t: 0, pocket });
    }
    noise_to(sched, ligand, pocket, t, rng)
}

/// `z_T` from the prior: standard normal features, CoM-free standard normal
/// coordinates.
pub fn sample_prior<R: Rng + ?Sized>(
    sched: &Schedule,
    n_atoms: usize,
    pocket: Arc<PocketCloud>,
    rng: &mut R,
) -> Result<NoisyState> {
    if n_atoms == 0 {
        return Err(Error::InvalidArgument("prior needs at least one atom".into()));
    }
    let (coords, features) = sample_noise(rng, n_atoms);
    Ok(NoisyState { z: LigandCloud { coords, features }, t: sched.steps(), pocket })
}

/// Records `mu_theta(z_t, s)` on a tape: `coef_zt z_t + coef_m m_hat`.
pub fn reverse_mean_on_tape(
    tape: &mut Tape,
    p: &[Var],
    config: DenoiserConfig,
    sched: &Schedule,
    state: &NoisyState,
    s: usize,
) -> Result<(Var, Var)> {
    let post = sched.posterior_params(s, state.t)?;
    let eps = denoiser::forward_on_tape(tape, p, config, &state.z, &state.pocket, state.t, sched.steps())?;
    let (mc, mf) = denoiser::predict_clean_on_tape(tape, sched, &state.z, eps, state.t);
    let zc = tape.constant(&state.z.coords * post.coef_zt);
    let zf = tape.constant(&state.z.features * post.coef_zt);
    let mc = tape.scale(mc, post.coef_m);
    let mf = tape.scale(mf, post.coef_m);
    let mean_c = tape.add(zc, mc);
    let mean_f = tape.add(zf, mf);
    Ok((mean_c, mean_f))
}

/// Mean of the reverse transition under `params`.
pub fn reverse_mean(sched: &Schedule, params: &DenoiserParams, state: &NoisyState, s: usize) -> Result<LigandCloud> {
    let mut tape = Tape::new();
    let p = params.to_tape(&mut tape, false);
    let (mc, mf) = reverse_mean_on_tape(&mut tape, &p, params.config(), sched, state, s)?;
    let mean = LigandCloud { coords: tape.value(mc).clone(), features: tape.value(mf).clone() };
    if !mean.is_finite() {
        return Err(Error::NonFinite("reverse mean"));
    }
    Ok(mean)
}

/// Log-density of `action` under `N(mean, sigma_q^2 I)` over all stored
/// components, recorded on the tape.
fn gaussian_logp_on_tape(tape: &mut Tape, mean: (Var, Var), action: &LigandCloud, sigma_q: f64) -> Var {
    let ac = tape.constant(action.coords.clone());
    let af = tape.constant(action.features.clone());
    let dc = tape.sub(ac, mean.0);
    let df = tape.sub(af, mean.1);
    let sc = tape.square(dc);
    let sf = tape.square(df);
    let sc = tape.sum(sc);
    let sf = tape.sum(sf);
    let total = tape.add(sc, sf);
    let var = sigma_q * sigma_q;
    let quad = tape.scale(total, -0.5 / var);
    let dims = (action.coords.len() + action.features.len()) as f64;
    tape.add_scalar(quad, -0.5 * dims * (2.0 * PI * var).ln())
}

/// Differentiable log-density of a recorded action.
pub fn logp_on_tape(
    tape: &mut Tape,
    p: &[Var],
    config: DenoiserConfig,
    sched: &Schedule,
    record: &TransitionRecord,
) -> Result<Var> {
    let post = sched.posterior_params(record.s, record.state.t)?;
    let mean = reverse_mean_on_tape(tape, p, config, sched, &record.state, record.s)?;
    Ok(gaussian_logp_on_tape(tape, mean, &record.action, post.sigma_q))
}

/// Log-density of the stored action under `params`.
pub fn logp_under(params: &DenoiserParams, record: &TransitionRecord, sched: &Schedule) -> Result<f64> {
    let mut tape = Tape::new();
    let p = params.to_tape(&mut tape, false);
    let lp = logp_on_tape(&mut tape, &p, params.config(), sched, record)?;
    let v = tape.scalar_value(lp);
    if !v.is_finite() {
        return Err(Error::NonFinite("transition log-density"));
    }
    Ok(v)
}

/// Log-density with the coordinate part counted in the `3(N - 1)`-dimensional
/// CoM-free subspace instead of all `3N` stored components.
pub fn logp_corrected(stored_logp: f64, sigma_q: f64) -> f64 {
    stored_logp + 1.5 * (2.0 * PI * sigma_q * sigma_q).ln()
}

/// Samples `z_s ~ p_theta(z_s | z_t, pocket)` and records its log-density.
pub fn sample_transition<R: Rng + ?Sized>(
    sched: &Schedule,
    params: &DenoiserParams,
    state: &NoisyState,
    s: usize,
    rng: &mut R,
) -> Result<TransitionRecord> {
    let post = sched.posterior_params(s, state.t)?;
    let mut tape = Tape::new();
    let p = params.to_tape(&mut tape, false);
    let mean = reverse_mean_on_tape(&mut tape, &p, params.config(), sched, state, s)?;
    let mc = tape.value(mean.0);
    let mf = tape.value(mean.1);
    if mc.iter().chain(mf.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("reverse mean"));
    }
    let (ec, ef) = sample_noise(rng, state.z.len());
    let action = LigandCloud { coords: mc + &(ec * post.sigma_q), features: mf + &(ef * post.sigma_q) };
    let lp = gaussian_logp_on_tape(&mut tape, mean, &action, post.sigma_q);
    let logp = tape.scalar_value(lp);
    if !logp.is_finite() {
        return Err(Error::NonFinite("transition log-density"));
    }
    Ok(TransitionRecord { state: state.clone(), action, logp, s })
}

/// [`sample_transition`] that also returns `grad_theta log p(action)` at the
/// sampling parameters. The stored log-density is bitwise the same.
pub fn sample_transition_with_grad<R: Rng + ?Sized>(
    sched: &Schedule,
    params: &DenoiserParams,
    state: &NoisyState,
    s: usize,
    rng: &mut R,
) -> Result<(TransitionRecord, DenoiserParams)> {
    let post = sched.posterior_params(s, state.t)?;
    let mut action = None;
    let (logp, grad) = denoiser::gradient(params, |tape, p| {
        let mean = reverse_mean_on_tape(tape, p, params.config(), sched, state, s)?;
        let mc = tape.value(mean.0);
        let mf = tape.value(mean.1);
        if mc.iter().chain(mf.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reverse mean"));
        }
        let (ec, ef) = sample_noise(rng, state.z.len());
        let a = LigandCloud { coords: mc + &(ec * post.sigma_q), features: mf + &(ef * post.sigma_q) };
        let lp = gaussian_logp_on_tape(tape, mean, &a, post.sigma_q);
        action = Some(a);
        Ok(lp)
    })?;
    let action = action.expect("closure ran");
    Ok((TransitionRecord { state: state.clone(), action, logp, s }, grad))
}

/// Turns the final sample into a clean ligand: one-hot of the row argmax
/// (lowest index on ties) scaled by the feature scale.
pub fn decode(z0: &LigandCloud) -> LigandCloud {
    let types = z0.types();
    let mut features = Array2::zeros(z0.features.dim());
    for (i, k) in types.into_iter().enumerate() {
        features[[i, k]] = FEATURE_SCALE;
    }
    LigandCloud { coords: z0.coords.clone(), features }
}

/// Records the epsilon-matching loss for given `t` and noise on a tape.
pub fn pretrain_loss_on_tape(
    tape: &mut Tape,
    p: &[Var],
    config: DenoiserConfig,
    sched: &Schedule,
    ligand: &LigandCloud,
    pocket: &PocketCloud,
    t: usize,
    eps: (&Array2<f64>, &Array2<f64>),
) -> Result<Var> {
    let z = noise_with(sched, ligand, t, eps.0, eps.1);
    let out = denoiser::forward_on_tape(tape, p, config, &z, pocket, t, sched.steps())?;
    let tc = tape.constant(eps.0.clone());
    let tf = tape.constant(eps.1.clone());
    let dc = tape.sub(out.eps_coord, tc);
    let df = tape.sub(out.eps_feat, tf);
    let sc = tape.square(dc);
    let sf = tape.square(df);
    let sc = tape.sum(sc);
    let sf = tape.sum(sf);
    let total = tape.add(sc, sf);
    let count = (eps.0.len() + eps.1.len()) as f64;
    Ok(tape.scale(total, 1.0 / count))
}

/// Draws `t ~ U{1..T}` and noise, then returns the mean squared noise error.
pub fn pretrain_loss<R: Rng + ?Sized>(
    sched: &Schedule,
    params: &DenoiserParams,
    ligand: &LigandCloud,
    pocket: &PocketCloud,
    rng: &mut R,
) -> Result<f64> {
    let t = rng.random_range(1..=sched.steps());
    let (ec, ef) = sample_noise(rng, ligand.len());
    let mut tape = Tape::new();
    let p = params.to_tape(&mut tape, false);
    let loss = pretrain_loss_on_tape(&mut tape, &p, params.config(), sched, ligand, pocket, t, (&ec, &ef))?;
    Ok(tape.scalar_value(loss))
}

/// Loss and gradient of [`pretrain_loss`] for one complex.
pub fn pretrain_loss_and_grad<R: Rng + ?Sized>(
    sched: &Schedule,
    params: &DenoiserParams,
    ligand: &LigandCloud,
    pocket: &PocketCloud,
    rng: &mut R,
) -> Result<(f64, DenoiserParams)> {
    let t = rng.random_range(1..=sched.steps());
    let (ec, ef) = sample_noise(rng, ligand.len());
    denoiser::gradient(params, |tape, p| {
        pretrain_loss_on_tape(tape, p, params.config(), sched, ligand, pocket, t, (&ec, &ef))
    })
}

/// Runs the full reverse chain on the coarse grid and returns the records
/// together with the decoded ligand.
pub fn sample_chain<R: Rng + ?Sized>(
    sched: &Schedule,
    params: &DenoiserParams,
    pocket: Arc<PocketCloud>,
    n_atoms: usize,
    stride: usize,
    rng: &mut R,
) -> Result<(Vec<TransitionRecord>, LigandCloud)> {
    let grid = sched.coarse_grid(stride)?;
    let mut state = sample_prior(sched, n_atoms, pocket, rng)?;
    let mut records = Vec::with_capacity(grid.len());
    for (t, s) in grid {
        debug_assert_eq!(state.t, t);
        let rec = sample_transition(sched, params, &state, s, rng)?;
        state = NoisyState { z: rec.action.clone(), t: s, pocket: state.pocket.clone() };
        records.push(rec);
    }
    Ok((records, decode(&state.z)))
}
