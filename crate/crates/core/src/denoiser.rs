//! Equivariant noise-prediction network over the joint ligand + pocket graph.
//!
//! Nodes are embedded from `[ligand features | pocket one-hot | is_ligand | t/T]`.
//! Every layer sends messages from all other nodes into each ligand atom, moves
//! ligand coordinates along relative position vectors, and updates ligand
//! features. Pocket atoms are conditioning only: their coordinates never move
//! and their embeddings stay fixed. The coordinate
//! output is the centred ligand displacement, the feature output a linear
//! head on the final ligand embeddings.

use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{LigandCloud, PocketCloud, FEATURE_SCALE, LIGAND_TYPES, POCKET_TYPES};
use crate::schedule::Schedule;

/// Width of the node input embedding.
pub const INPUT_DIM: usize = LIGAND_TYPES + POCKET_TYPES + 2;

const TENSORS_PER_LAYER: usize = 13;
const DIST_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { layers: 4, hidden: 64 }
    }
}

/// Network weights, or any quantity shaped like them (gradients, moments).
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    tensors: Vec<Array2<f64>>,
}

/// Tensor shapes in serialization order.
fn layout(cfg: DenoiserConfig) -> Vec<(String, (usize, usize), Init)> {
    let h = cfg.hidden;
    let mut out = vec![
        ("embed.w".to_string(), (INPUT_DIM, h), Init::FanIn(INPUT_DIM)),
        ("embed.b".to_string(), (1, h), Init::FanIn(INPUT_DIM)),
    ];
    for l in 0..cfg.layers {
        let msg_fan = 2 * h + 1;
        let entries = [
            ("msg.wa", (h, h), Init::FanIn(msg_fan)),
            ("msg.wb", (h, h), Init::FanIn(msg_fan)),
            ("msg.wd", (1, h), Init::FanIn(msg_fan)),
            ("msg.b1", (1, h), Init::FanIn(msg_fan)),
            ("msg.w2", (h, h), Init::FanIn(h)),
            ("msg.b2", (1, h), Init::FanIn(h)),
            ("coord.w1", (h, h), Init::FanIn(h)),
            ("coord.b1", (1, h), Init::FanIn(h)),
            ("coord.w2", (h, 1), Init::Zero),
            ("feat.w1", (2 * h, h), Init::FanIn(2 * h)),
            ("feat.b1", (1, h), Init::FanIn(2 * h)),
            ("feat.w2", (h, h), Init::FanIn(h)),
            ("feat.b2", (1, h), Init::FanIn(h)),
        ];
        debug_assert_eq!(entries.len(), TENSORS_PER_LAYER);
        for (name, shape, init) in entries {
            out.push((format!("layer{l}.{name}"), shape, init));
        }
    }
    out.push(("out.w".to_string(), (h, LIGAND_TYPES), Init::Zero));
    out.push(("out.b".to_string(), (1, LIGAND_TYPES), Init::Zero));
    out
}

#[derive(Debug, Clone, Copy)]
enum Init {
    FanIn(usize),
    Zero,
}

impl DenoiserParams {
    /// Uniform fan-in initialisation with zeroed output heads.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 {
            return Err(Error::InvalidArgument(format!("denoiser needs layers, hidden >= 1, got {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout(config)
            .into_iter()
            .map(|(_, shape, init)| match init {
                Init::Zero => Array2::zeros(shape),
                Init::FanIn(fan) => {
                    let bound = 1.0 / (fan as f64).sqrt();
                    Array2::from_shape_fn(shape, |_| rng.random_range(-bound..bound))
                }
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn zeros_like(&self) -> Self {
        Self { config: self.config, tensors: self.tensors.iter().map(|t| Array2::zeros(t.dim())).collect() }
    }

    pub fn from_tensors(config: DenoiserConfig, tensors: Vec<Array2<f64>>) -> Result<Self> {
        let expected = layout(config);
        if expected.len() != tensors.len() {
            return Err(Error::Shape(format!("expected {} tensors, got {}", expected.len(), tensors.len())));
        }
        for ((name, shape, _), t) in expected.iter().zip(&tensors) {
            if t.dim() != *shape {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {:?}", t.dim())));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> DenoiserConfig {
        self.config
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn names(&self) -> Vec<String> {
        layout(self.config).into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn from_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!("expected {} values, got {}", self.num_params(), flat.len())));
        }
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let n = t.len();
                let out = Array2::from_shape_vec(t.dim(), flat[offset..offset + n].to_vec()).expect("shape checked");
                offset += n;
                out
            })
            .collect();
        Ok(Self { config: self.config, tensors })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &Self, k: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.scaled_add(k, b);
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.tensors.iter().zip(&other.tensors).map(|(a, b)| (a * b).sum()).sum()
    }

    /// Places every tensor on the tape, tracked for gradients or not.
    pub fn to_tape(&self, tape: &mut Tape, tracked: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if tracked { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }
}

/// Predicted forward noise for a ligand.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_coord: Array2<f64>,
    pub eps_feat: Array2<f64>,
}

/// Handles to the denoiser outputs on a tape.
#[derive(Debug, Clone, Copy)]
pub struct OutputVars {
    pub eps_coord: Var,
    pub eps_feat: Var,
}

/// Edges `(i, j)` for every ligand atom `i` and every other node `j`,
/// grouped by receiving ligand atom.
struct Graph {
    n_lig: usize,
    src: Rc<[usize]>,
    dst: Rc<[usize]>,
}

impl Graph {
    fn new(n_lig: usize, n_pocket: usize) -> Self {
        let n = n_lig + n_pocket;
        let mut src = Vec::with_capacity(n_lig * n.saturating_sub(1));
        let mut dst = Vec::with_capacity(n_lig * n.saturating_sub(1));
        for i in 0..n_lig {
            for j in (0..n).filter(|&j| j != i) {
                src.push(i);
                dst.push(j);
            }
        }
        Self { n_lig, src: Rc::from(src), dst: Rc::from(dst) }
    }
}

fn check_inputs(z_t: &LigandCloud, pocket: &PocketCloud, t: usize, steps: usize) -> Result<()> {
    if t == 0 || t > steps {
        return Err(Error::InvalidArgument(format!("denoiser needs 0 < t <= {steps}, got {t}")));
    }
    if z_t.coords.ncols() != 3 || z_t.features.ncols() != LIGAND_TYPES || z_t.features.nrows() != z_t.len() {
        return Err(Error::Shape(format!("ligand {:?} / {:?}", z_t.coords.dim(), z_t.features.dim())));
    }
    if !z_t.is_finite() {
        return Err(Error::NonFinite("denoiser input"));
    }
    if pocket.coords().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pocket coordinates"));
    }
    Ok(())
}

fn node_inputs(z_t: &LigandCloud, pocket: &PocketCloud, time: f64) -> Array2<f64> {
    let n_lig = z_t.len();
    let n = n_lig + pocket.len();
    let mut h = Array2::zeros((n, INPUT_DIM));
    h.slice_mut(ndarray::s![..n_lig, ..LIGAND_TYPES]).assign(&z_t.features);
    h.slice_mut(ndarray::s![n_lig.., LIGAND_TYPES..LIGAND_TYPES + POCKET_TYPES]).assign(&pocket.one_hot());
    h.slice_mut(ndarray::s![..n_lig, INPUT_DIM - 2]).fill(1.0);
    h.column_mut(INPUT_DIM - 1).fill(time);
    h
}

/// Records the network on `tape` with parameter handles `p`.
pub fn forward_on_tape(
    tape: &mut Tape,
    p: &[Var],
    config: DenoiserConfig,
    z_t: &LigandCloud,
    pocket: &PocketCloud,
    t: usize,
    steps: usize,
) -> Result<OutputVars> {
    check_inputs(z_t, pocket, t, steps)?;
    let graph = Graph::new(z_t.len(), pocket.len());
    let time = t as f64 / steps as f64;

    let h0 = tape.constant(node_inputs(z_t, pocket, time));
    let emb = tape.matmul(h0, p[0]);
    let emb = tape.add_row(emb, p[1]);
    let mut h = tape.slice_rows(emb, 0, graph.n_lig);
    let h_pocket = tape.slice_rows(emb, graph.n_lig, z_t.len() + pocket.len());

    let x_in = tape.constant(z_t.coords.clone());
    let x_pocket = tape.constant(pocket.coords().clone());
    let mut x_lig = x_in;
    let (src, dst) = (graph.src.clone(), graph.dst.clone());

    for l in 0..config.layers {
        let w = &p[2 + l * TENSORS_PER_LAYER..2 + (l + 1) * TENSORS_PER_LAYER];

        let x_all = tape.concat_rows(x_lig, x_pocket);
        let xs = tape.gather(x_lig, src.clone());
        let xd = tape.gather(x_all, dst.clone());
        let diff = tape.sub(xs, xd);
        let sq = tape.square(diff);
        let d2 = tape.row_sum(sq);

        // first message layer split as W [h_i, h_j, d2] = Wa h_i + Wb h_j + wd d2
        let h_all = tape.concat_rows(h, h_pocket);
        let pa = tape.matmul(h, w[0]);
        let pb = tape.matmul(h_all, w[1]);
        let ga = tape.gather(pa, src.clone());
        let gb = tape.gather(pb, dst.clone());
        let dist_term = tape.matmul(d2, w[2]);
        let pre = tape.add(ga, gb);
        let pre = tape.add(pre, dist_term);
        let pre = tape.add_row(pre, w[3]);
        let act = tape.silu(pre);
        let m = tape.matmul(act, w[4]);
        let m = tape.add_row(m, w[5]);
        let m = tape.silu(m);

        let c1 = tape.matmul(m, w[6]);
        let c1 = tape.add_row(c1, w[7]);
        let c1 = tape.silu(c1);
        let phi = tape.matmul(c1, w[8]);
        let d2e = tape.add_scalar(d2, DIST_EPS);
        let dist = tape.sqrt(d2e);
        let denom = tape.add_scalar(dist, 1.0);
        let inv = tape.recip(denom);
        let coef = tape.mul(phi, inv);
        let upd = tape.mul_col(diff, coef);
        let agg = tape.scatter_add(upd, src.clone(), graph.n_lig);
        x_lig = tape.add(x_lig, agg);

        let agg_m = tape.scatter_add(m, src.clone(), graph.n_lig);
        let inp = tape.concat_cols(h, agg_m);
        let f1 = tape.matmul(inp, w[9]);
        let f1 = tape.add_row(f1, w[10]);
        let f1 = tape.silu(f1);
        let f2 = tape.matmul(f1, w[11]);
        let f2 = tape.add_row(f2, w[12]);
        h = tape.add(h, f2);
    }

    let h_lig = h;
    let head = p.len() - 2;
    let feat = tape.matmul(h_lig, p[head]);
    let eps_feat = tape.add_row(feat, p[head + 1]);
    let moved = tape.sub(x_lig, x_in);
    let eps_coord = tape.center_cols(moved);
    Ok(OutputVars { eps_coord, eps_feat })
}

/// Evaluates the network. The complex is expected centred on the ligand.
pub fn forward(
    params: &DenoiserParams,
    z_t: &LigandCloud,
    pocket: &PocketCloud,
    t: usize,
    steps: usize,
) -> Result<DenoiserOutput> {
    let mut tape = Tape::new();
    let p = params.to_tape(&mut tape, false);
    let out = forward_on_tape(&mut tape, &p, params.config, z_t, pocket, t, steps)?;
    let result = DenoiserOutput {
        eps_coord: tape.value(out.eps_coord).clone(),
        eps_feat: tape.value(out.eps_feat).clone(),
    };
    if result.eps_coord.iter().chain(result.eps_feat.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("denoiser output"));
    }
    Ok(result)
}

/// `m_hat = (z_t - sigma_t eps) / alpha_t` with features clamped to
/// `[0, FEATURE_SCALE]`; coordinates are not thresholded.
pub fn predict_clean(sched: &Schedule, z_t: &LigandCloud, eps: &DenoiserOutput, t: usize) -> Result<LigandCloud> {
    let (coords, features) = reconstruct(sched, z_t, eps, t)?;
    Ok(LigandCloud { coords, features: features.mapv(|v| v.clamp(0.0, FEATURE_SCALE)) })
}

/// Unthresholded reconstruction `(coords, features)`.
pub fn reconstruct(
    sched: &Schedule,
    z_t: &LigandCloud,
    eps: &DenoiserOutput,
    t: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if t == 0 || t > sched.steps() {
        return Err(Error::InvalidArgument(format!("reconstruction needs 0 < t <= {}, got {t}", sched.steps())));
    }
    if eps.eps_coord.dim() != z_t.coords.dim() || eps.eps_feat.dim() != z_t.features.dim() {
        return Err(Error::Shape("noise prediction does not match ligand".into()));
    }
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    let coords = (&z_t.coords - &(&eps.eps_coord * s)) / a;
    let features = (&z_t.features - &(&eps.eps_feat * s)) / a;
    Ok((coords, features))
}

/// Tape version of [`predict_clean`].
pub fn predict_clean_on_tape(
    tape: &mut Tape,
    sched: &Schedule,
    z_t: &LigandCloud,
    eps: OutputVars,
    t: usize,
) -> (Var, Var) {
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    let zc = tape.constant(&z_t.coords / a);
    let zf = tape.constant(&z_t.features / a);
    let ec = tape.scale(eps.eps_coord, -s / a);
    let ef = tape.scale(eps.eps_feat, -s / a);
    let coords = tape.add(zc, ec);
    let feats = tape.add(zf, ef);
    let feats = tape.clamp(feats, 0.0, FEATURE_SCALE);
    (coords, feats)
}

/// Reverse-mode gradient of a scalar built from the parameter handles.
///
/// Returns the loss value and a parameter-shaped gradient.
pub fn gradient<F>(params: &DenoiserParams, loss: F) -> Result<(f64, DenoiserParams)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = params.to_tape(&mut tape, true);
    let out = loss(&mut tape, &p)?;
    if tape.value(out).dim() != (1, 1) {
        return Err(Error::Shape(format!("loss must be scalar, got {:?}", tape.value(out).dim())));
    }
    let value = tape.scalar_value(out);
    if !value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let mut grads = tape.backward(out);
    let tensors = p.iter().map(|&v| grads.take(v)).collect();
    Ok((value, DenoiserParams { config: params.config, tensors }))
}

/// Column sums of an array, as a quick CoM check.
pub fn column_sums(a: &Array2<f64>) -> Vec<f64> {
    a.sum_axis(Axis(0)).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_com_free, O3Transform};

    fn random_complex(seed: u64, n_lig: usize, n_pocket: usize) -> (LigandCloud, PocketCloud) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = project_com_free(&Array2::from_shape_fn((n_lig, 3), |_| crate::random::normal(&mut rng)));
        let feats = Array2::from_shape_fn((n_lig, LIGAND_TYPES), |_| crate::random::normal(&mut rng));
        let pc = Array2::from_shape_fn((n_pocket, 3), |_| 3.0 * crate::random::normal(&mut rng));
        let types = (0..n_pocket).map(|i| i % POCKET_TYPES).collect();
        (LigandCloud::new(coords, feats).unwrap(), PocketCloud::new(pc, types).unwrap())
    }

    /// Parameters with non-zero heads so equivariance checks are not vacuous.
    fn busy_params(cfg: DenoiserConfig, seed: u64) -> DenoiserParams {
        let mut p = DenoiserParams::init(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for t in p.tensors_mut() {
            if t.iter().all(|&v| v == 0.0) {
                t.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            }
        }
        p
    }

    fn max_abs(a: &Array2<f64>) -> f64 {
        a.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    #[test]
    fn zero_heads_predict_zero() {
        let p = DenoiserParams::init(DenoiserConfig { layers: 2, hidden: 8 }, 0).unwrap();
        let (l, pk) = random_complex(1, 4, 6);
        let out = forward(&p, &l, &pk, 10, 100).unwrap();
        assert_eq!(max_abs(&out.eps_coord), 0.0);
        assert_eq!(max_abs(&out.eps_feat), 0.0);
    }

    #[test]
    fn output_is_centered() {
        let p = busy_params(DenoiserConfig { layers: 3, hidden: 8 }, 4);
        let (l, pk) = random_complex(2, 6, 9);
        let out = forward(&p, &l, &pk, 50, 100).unwrap();
        assert!(column_sums(&out.eps_coord).iter().all(|s| s.abs() < 1e-8));
    }

    #[test]
    fn rotation_equivariance() {
        let p = busy_params(DenoiserConfig { layers: 2, hidden: 8 }, 7);
        let (l, pk) = random_complex(3, 5, 7);
        let base = forward(&p, &l, &pk, 30, 100).unwrap();
        for seed in 0..5 {
            let r = O3Transform::random(seed);
            let out = forward(&p, &r.apply_ligand(&l), &r.apply_pocket(&pk), 30, 100).unwrap();
            assert!(max_abs(&(&out.eps_coord - &r.apply(&base.eps_coord))) < 1e-9);
            assert!(max_abs(&(&out.eps_feat - &base.eps_feat)) < 1e-9);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let p = busy_params(DenoiserConfig { layers: 2, hidden: 8 }, 9);
        let (l, pk) = random_complex(5, 4, 5);
        let perm = [2usize, 0, 3, 1];
        let permute = |a: &Array2<f64>| a.select(Axis(0), &perm);
        let lp = LigandCloud::new(permute(&l.coords), permute(&l.features)).unwrap();
        let base = forward(&p, &l, &pk, 10, 100).unwrap();
        let out = forward(&p, &lp, &pk, 10, 100).unwrap();
        assert!(max_abs(&(&out.eps_coord - &permute(&base.eps_coord))) < 1e-10);
        assert!(max_abs(&(&out.eps_feat - &permute(&base.eps_feat))) < 1e-10);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = DenoiserParams::init(DenoiserConfig { layers: 1, hidden: 4 }, 0).unwrap();
        let (mut l, pk) = random_complex(1, 3, 3);
        assert!(forward(&p, &l, &pk, 0, 100).is_err());
        assert!(forward(&p, &l, &pk, 101, 100).is_err());
        l.features[[0, 0]] = f64::NAN;
        assert!(forward(&p, &l, &pk, 5, 100).is_err());
    }

    #[test]
    fn predict_clean_inverts_noising() {
        let sched = Schedule::polynomial(100, 1e-4).unwrap();
        let (l, _) = random_complex(4, 3, 1);
        let m = LigandCloud::from_types(l.coords.clone(), &[0, 3, 1]).unwrap();
        let eps = DenoiserOutput { eps_coord: project_com_free(&l.coords.mapv(|v| 0.7 * v)), eps_feat: l.features.clone() };
        let t = 40;
        let z = LigandCloud {
            coords: &m.coords * sched.alpha(t) + &(&eps.eps_coord * sched.sigma(t)),
            features: &m.features * sched.alpha(t) + &(&eps.eps_feat * sched.sigma(t)),
        };
        let (coords, feats) = reconstruct(&sched, &z, &eps, t).unwrap();
        assert!(max_abs(&(&coords - &m.coords)) < 1e-12);
        assert!(max_abs(&(&feats - &m.features)) < 1e-12);
        assert!(predict_clean(&sched, &z, &eps, 0).is_err());
    }

    #[test]
    fn thresholding_clamps_features_only() {
        let sched = Schedule::polynomial(100, 1e-4).unwrap();
        let t = 1;
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        // choose z so that the reconstruction is exactly the target values
        let target_f = ndarray::array![[0.3, -0.1, 0.1, 0.25, 0.0]];
        let target_c = ndarray::array![[100.0, -55.0, 1e3]];
        let eps = DenoiserOutput { eps_coord: Array2::zeros((1, 3)), eps_feat: Array2::zeros((1, 5)) };
        let z = LigandCloud { coords: &target_c * a, features: &target_f * a };
        let _ = s;
        let m = predict_clean(&sched, &z, &eps, t).unwrap();
        let f = &m.features;
        assert!((f[[0, 0]] - 0.25).abs() < 1e-12);
        assert_eq!(f[[0, 1]], 0.0);
        assert!((f[[0, 2]] - 0.1).abs() < 1e-12);
        assert!((&m.coords - &target_c).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn gradient_of_constant_and_quadratic() {
        let p = busy_params(DenoiserConfig { layers: 1, hidden: 4 }, 0);
        let (_, g) = gradient(&p, |tape, _| Ok(tape.scalar(3.5))).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));

        let (value, g) = gradient(&p, |tape, vars| {
            let mut total = tape.scalar(0.0);
            for &v in vars {
                let sq = tape.square(v);
                let s = tape.sum(sq);
                total = tape.add(total, s);
            }
            Ok(tape.scale(total, 0.5))
        })
        .unwrap();
        assert!((value - 0.5 * p.dot(&p)).abs() < 1e-12);
        assert_eq!(g.flatten(), p.flatten());
    }

    #[test]
    fn network_gradient_matches_finite_differences() {
        let cfg = DenoiserConfig { layers: 2, hidden: 6 };
        let p = busy_params(cfg, 21);
        let (l, pk) = random_complex(8, 3, 4);
        let weights_c = Array2::from_shape_fn((3, 3), |(i, j)| (i as f64 - j as f64 * 0.5).sin());
        let weights_f = Array2::from_shape_fn((3, LIGAND_TYPES), |(i, j)| ((i * 7 + j) as f64).cos());
        let loss = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
            let out = forward_on_tape(tape, vars, cfg, &l, &pk, 20, 100)?;
            let wc = tape.constant(weights_c.clone());
            let wf = tape.constant(weights_f.clone());
            let a = tape.mul(out.eps_coord, wc);
            let b = tape.mul(out.eps_feat, wf);
            let b = tape.square(b);
            let sa = tape.sum(a);
            let sb = tape.sum(b);
            Ok(tape.add(sa, sb))
        };
        let (_, g) = gradient(&p, loss).unwrap();
        let flat = p.flatten();
        let gflat = g.flatten();
        let eval = |x: &[f64]| {
            let q = p.from_flat(x).unwrap();
            gradient(&q, loss).unwrap().0
        };
        let h = 1e-5;
        for i in (0..flat.len()).step_by(7) {
            let mut xp = flat.clone();
            xp[i] += h;
            let mut xm = flat.clone();
            xm[i] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            assert!((fd - gflat[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: fd {fd} vs {}", gflat[i]);
        }
    }

    #[test]
    fn flat_round_trip() {
        let p = busy_params(DenoiserConfig { layers: 2, hidden: 5 }, 3);
        assert_eq!(p.from_flat(&p.flatten()).unwrap(), p);
        assert!(p.from_flat(&[0.0]).is_err());
        assert_eq!(p.names().len(), p.tensors().len());
    }
}
