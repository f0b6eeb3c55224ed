//! Synthetic oracles and the batch reward pipeline: Gaussian rank transform,
//! weighted composite, invalid-ligand penalty, intra-batch diversity and the
//! top-N ranking score.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::geometry::{distance, LigandCloud, PocketCloud, LIGAND_TYPES};
use crate::synthworld::{PREFERRED_LIGAND_TYPE, TARGET_COMPOSITION};

pub const LJ_SIGMA: f64 = 1.0;
pub const LJ_CLIP: (f64, f64) = (-1.0, 10.0);
pub const LJ_CUTOFF: f64 = 2.5;
pub const CONTACT_RADIUS: f64 = 1.5;
pub const CONTACT_BONUS: f64 = -0.5;
pub const TARGET_SIZE: f64 = 11.0;
pub const CONNECT_CUTOFF: f64 = 1.6;
pub const MIN_DISTANCE: f64 = 0.8;
pub const DISTANCE_BINS: usize = 16;
pub const DISTANCE_RANGE: f64 = 8.0;
pub const DESCRIPTOR_LEN: usize = LIGAND_TYPES + DISTANCE_BINS;
/// Composite reward of every ligand when a batch has no valid ligand.
pub const EMPTY_BATCH_PENALTY: f64 = -3.0;
/// Guard added to standard deviations in denominators.
pub const STD_EPS: f64 = 1e-8;
/// Weights of `|affinity|`, qed and sa in the top-N z-score.
pub const TOPN_WEIGHTS: (f64, f64, f64) = (5.0, 1.0, 1.5);

pub const AFFINITY: &str = "affinity";
pub const QED: &str = "qed";
pub const SA: &str = "sa";
pub const DIVERSITY: &str = "diversity";

/// Built-in oracle values for one ligand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleVector {
    pub affinity: f64,
    pub qed_like: f64,
    pub sa_like: f64,
    pub valid: bool,
    pub descriptor: Vec<f64>,
}

fn lj(r: f64) -> f64 {
    let s6 = (LJ_SIGMA / r).powi(6);
    (4.0 * (s6 * s6 - s6)).clamp(LJ_CLIP.0, LJ_CLIP.1)
}

/// Truncated, clipped Lennard-Jones sum plus a bonus for contacts whose
/// ligand type matches the pocket atom's preference. Lower is better.
pub fn oracle_affinity(ligand: &LigandCloud, pocket: &PocketCloud) -> f64 {
    let lt = ligand.types();
    let mut total = 0.0;
    for i in 0..ligand.len() {
        for j in 0..pocket.len() {
            let r = distance(&ligand.coords, i, pocket.coords(), j);
            if r >= LJ_CUTOFF {
                continue;
            }
            total += lj(r);
            if r < CONTACT_RADIUS && PREFERRED_LIGAND_TYPE[pocket.types()[j]] == lt[i] {
                total += CONTACT_BONUS;
            }
        }
    }
    total
}

pub fn type_histogram(ligand: &LigandCloud) -> [f64; LIGAND_TYPES] {
    let mut h = [0.0; LIGAND_TYPES];
    let types = ligand.types();
    for &k in &types {
        h[k] += 1.0;
    }
    let n = types.len().max(1) as f64;
    h.map(|c| c / n)
}

/// Composition and size score in `[0, 1]`.
pub fn oracle_qed_like(ligand: &LigandCloud) -> f64 {
    let h = type_histogram(ligand);
    let tv = 0.5 * h.iter().zip(TARGET_COMPOSITION).map(|(a, b)| (a - b).abs()).sum::<f64>();
    let size = (ligand.len() as f64 - TARGET_SIZE).abs() / TARGET_SIZE;
    (1.0 - 0.5 * tv - 0.5 * size).clamp(0.0, 1.0)
}

/// Sizes of the connected components of the `cutoff` distance graph,
/// largest first.
pub fn components(ligand: &LigandCloud, cutoff: f64) -> Vec<usize> {
    let n = ligand.len();
    let mut seen = vec![false; n];
    let mut sizes = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            for j in 0..n {
                if !seen[j] && distance(&ligand.coords, i, &ligand.coords, j) <= cutoff {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        sizes.push(size);
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes
}

fn nearest_neighbor_distances(ligand: &LigandCloud) -> Vec<f64> {
    let n = ligand.len();
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| distance(&ligand.coords, i, &ligand.coords, j))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Regularity score in `[0, 1]`: `exp(-var(nn distances))` times the largest
/// connected fraction.
pub fn oracle_sa_like(ligand: &LigandCloud) -> f64 {
    let n = ligand.len();
    if n == 0 {
        return 0.0;
    }
    let var = if n < 2 { 0.0 } else { population_std(&nearest_neighbor_distances(ligand)).powi(2) };
    let frac = components(ligand, CONNECT_CUTOFF)[0] as f64 / n as f64;
    (-var).exp() * frac
}

pub fn oracle_validity(ligand: &LigandCloud) -> bool {
    if ligand.is_empty() || !ligand.is_finite() {
        return false;
    }
    let n = ligand.len();
    for i in 0..n {
        for j in i + 1..n {
            if distance(&ligand.coords, i, &ligand.coords, j) < MIN_DISTANCE {
                return false;
            }
        }
    }
    components(ligand, CONNECT_CUTOFF).len() == 1
}

/// Normalised type histogram followed by a normalised histogram of pairwise
/// distances over `[0, DISTANCE_RANGE)`.
pub fn descriptor(ligand: &LigandCloud) -> Vec<f64> {
    let mut out = type_histogram(ligand).to_vec();
    let mut bins = [0.0; DISTANCE_BINS];
    let n = ligand.len();
    let pairs = (n * n.saturating_sub(1) / 2).max(1) as f64;
    let width = DISTANCE_RANGE / DISTANCE_BINS as f64;
    for i in 0..n {
        for j in i + 1..n {
            let d = distance(&ligand.coords, i, &ligand.coords, j);
            if d < DISTANCE_RANGE {
                bins[(d / width) as usize] += 1.0 / pairs;
            }
        }
    }
    out.extend_from_slice(&bins);
    out
}

pub fn evaluate(ligand: &LigandCloud, pocket: &PocketCloud) -> OracleVector {
    let affinity = oracle_affinity(ligand, pocket);
    let qed_like = oracle_qed_like(ligand);
    let sa_like = oracle_sa_like(ligand);
    let finite = affinity.is_finite() && qed_like.is_finite() && sa_like.is_finite();
    OracleVector { affinity, qed_like, sa_like, valid: finite && oracle_validity(ligand), descriptor: descriptor(ligand) }
}

fn standard_normal() -> Normal {
    Normal::standard()
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// `Phi^-1((rank - 0.5) / n)` with average ranks for ties.
pub fn gaussian_rank_transform(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("rank transform needs at least one value".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rank transform input"));
    }
    let n = values.len() as f64;
    let normal = standard_normal();
    Ok(average_ranks(values)
        .into_iter()
        .map(|r| {
            // evaluate the lower tail and mirror, so the output is exactly symmetric
            let lower = r - 0.5;
            let upper = n - r + 0.5;
            if lower <= upper {
                normal.inverse_cdf(lower / n)
            } else {
                -normal.inverse_cdf(upper / n)
            }
        })
        .collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn binarize(a: &[f64]) -> Vec<bool> {
    let mut sorted = a.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 { sorted[m / 2] } else { 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]) };
    a.iter().map(|&v| v > median).collect()
}

fn tanimoto(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiversityMode {
    #[default]
    Cosine,
    /// Tanimoto on descriptors binarised at their median bin value.
    Tanimoto,
}

/// `1 - mean_{j != i} sim(d_i, d_j)`; a batch of one scores 0.
pub fn diversity_scores(descriptors: &[Vec<f64>], mode: DiversityMode) -> Vec<f64> {
    let n = descriptors.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let bits: Vec<Vec<bool>> = match mode {
        DiversityMode::Tanimoto => descriptors.iter().map(|d| binarize(d)).collect(),
        DiversityMode::Cosine => Vec::new(),
    };
    let sim = |i: usize, j: usize| match mode {
        DiversityMode::Cosine => cosine(&descriptors[i], &descriptors[j]),
        DiversityMode::Tanimoto => tanimoto(&bits[i], &bits[j]),
    };
    (0..n)
        .map(|i| {
            let total: f64 = (0..n).filter(|&j| j != i).map(|j| sim(i, j)).sum();
            1.0 - total / (n - 1) as f64
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len().max(1) as f64).sqrt()
}

/// `mu_B - 3 sigma_B` over the valid rewards, or the empty-batch fallback.
pub fn invalid_penalty(valid_rewards: &[f64]) -> f64 {
    if valid_rewards.is_empty() {
        return EMPTY_BATCH_PENALTY;
    }
    mean(valid_rewards) - 3.0 * population_std(valid_rewards)
}

/// Whether an objective is better when larger or smaller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Maximize,
    Minimize,
}

/// A per-ligand objective that can be weighted into the composite reward.
pub trait Oracle: Send + Sync {
    fn name(&self) -> &str;
    fn direction(&self) -> Direction;
    fn evaluate(&self, ligand: &LigandCloud, pocket: &PocketCloud) -> f64;
}

struct FnOracle {
    name: &'static str,
    direction: Direction,
    f: fn(&LigandCloud, &PocketCloud) -> f64,
}

impl Oracle for FnOracle {
    fn name(&self) -> &str {
        self.name
    }

    fn direction(&self) -> Direction {
        self.direction
    }

    fn evaluate(&self, ligand: &LigandCloud, pocket: &PocketCloud) -> f64 {
        (self.f)(ligand, pocket)
    }
}

/// Named oracles available to the composite reward.
#[derive(Clone)]
pub struct OracleRegistry {
    oracles: BTreeMap<String, Arc<dyn Oracle>>,
}

impl std::fmt::Debug for OracleRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.oracles.keys()).finish()
    }
}

impl Default for OracleRegistry {
    fn default() -> Self {
        let mut r = Self { oracles: BTreeMap::new() };
        r.register(Arc::new(FnOracle { name: AFFINITY, direction: Direction::Minimize, f: oracle_affinity }));
        r.register(Arc::new(FnOracle { name: QED, direction: Direction::Maximize, f: |l, _| oracle_qed_like(l) }));
        r.register(Arc::new(FnOracle { name: SA, direction: Direction::Maximize, f: |l, _| oracle_sa_like(l) }));
        r
    }
}

impl OracleRegistry {
    pub fn register(&mut self, oracle: Arc<dyn Oracle>) {
        self.oracles.insert(oracle.name().to_string(), oracle);
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn Oracle>> {
        self.oracles.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.oracles.keys().map(String::as_str)
    }
}

/// Composite weights keyed by oracle name; `diversity` is the batch-level term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub weights: BTreeMap<String, f64>,
    pub diversity_mode: DiversityMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        let weights = [(QED, 0.2), (SA, 0.2), (AFFINITY, 0.5), (DIVERSITY, 0.1)]
            .into_iter()
            .map(|(k, w)| (k.to_string(), w))
            .collect();
        Self { weights, diversity_mode: DiversityMode::Cosine }
    }
}

impl RewardConfig {
    pub fn validate(&self, registry: &OracleRegistry) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::Config("reward weights are empty".into()));
        }
        for (name, w) in &self.weights {
            if name != DIVERSITY && registry.get(name).is_none() {
                return Err(Error::Config(format!("unknown oracle {name:?} in reward weights")));
            }
            if !w.is_finite() {
                return Err(Error::Config(format!("weight of {name:?} is not finite")));
            }
        }
        Ok(())
    }
}

/// Everything computed for one sampled batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardBatch {
    pub oracles: Vec<OracleVector>,
    /// Raw value of every weighted objective, oriented as produced.
    pub raw: BTreeMap<String, Vec<f64>>,
    /// Rank-transformed, higher-is-better scores over the valid ligands;
    /// invalid entries hold 0.
    pub transformed: BTreeMap<String, Vec<f64>>,
    /// Diversity among valid ligands; invalid entries hold 0.
    pub diversity: Vec<f64>,
    pub composite: Vec<f64>,
    pub penalty: f64,
}

impl RewardBatch {
    pub fn len(&self) -> usize {
        self.composite.len()
    }

    pub fn is_empty(&self) -> bool {
        self.composite.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.oracles.iter().filter(|o| o.valid).count()
    }

    pub fn invalid_rate(&self) -> f64 {
        1.0 - self.valid_count() as f64 / self.len().max(1) as f64
    }
}

/// Composite reward from raw objective columns and validity flags.
///
/// Each weighted objective is oriented so larger is better, rank-transformed
/// over the valid ligands and combined; invalid ligands get the penalty.
pub fn composite_reward(
    raw: &BTreeMap<String, Vec<f64>>,
    directions: &BTreeMap<String, Direction>,
    valid: &[bool],
    weights: &BTreeMap<String, f64>,
) -> Result<(BTreeMap<String, Vec<f64>>, Vec<f64>, f64)> {
    let n = valid.len();
    let idx: Vec<usize> = (0..n).filter(|&i| valid[i]).collect();
    let mut transformed = BTreeMap::new();
    let mut composite = vec![0.0; n];
    for (name, &w) in weights {
        let col = raw.get(name).ok_or_else(|| Error::InvalidArgument(format!("no values for objective {name:?}")))?;
        if col.len() != n {
            return Err(Error::Shape(format!("objective {name:?} has {} values for {n} ligands", col.len())));
        }
        let sign = match directions.get(name).copied().unwrap_or(Direction::Maximize) {
            Direction::Maximize => 1.0,
            Direction::Minimize => -1.0,
        };
        let mut t = vec![0.0; n];
        if !idx.is_empty() {
            let oriented: Vec<f64> = idx.iter().map(|&i| sign * col[i]).collect();
            for (&i, v) in idx.iter().zip(gaussian_rank_transform(&oriented)?) {
                t[i] = v;
            }
        }
        for &i in &idx {
            composite[i] += w * t[i];
        }
        transformed.insert(name.clone(), t);
    }
    let valid_rewards: Vec<f64> = idx.iter().map(|&i| composite[i]).collect();
    let penalty = invalid_penalty(&valid_rewards);
    for i in 0..n {
        if !valid[i] {
            composite[i] = penalty;
        }
    }
    Ok((transformed, composite, penalty))
}

/// Evaluates and scores a batch of decoded ligands against one pocket.
pub fn score_batch(
    ligands: &[LigandCloud],
    pocket: &PocketCloud,
    cfg: &RewardConfig,
    registry: &OracleRegistry,
) -> Result<RewardBatch> {
    cfg.validate(registry)?;
    let oracles: Vec<OracleVector> = ligands.par_iter().map(|l| evaluate(l, pocket)).collect();
    let mut raw = BTreeMap::new();
    let mut directions = BTreeMap::new();
    for name in cfg.weights.keys().filter(|n| n.as_str() != DIVERSITY) {
        let oracle = registry.get(name).expect("validated");
        let col: Vec<f64> = match name.as_str() {
            AFFINITY => oracles.iter().map(|o| o.affinity).collect(),
            QED => oracles.iter().map(|o| o.qed_like).collect(),
            SA => oracles.iter().map(|o| o.sa_like).collect(),
            _ => ligands.par_iter().map(|l| oracle.evaluate(l, pocket)).collect(),
        };
        raw.insert(name.clone(), col);
        directions.insert(name.clone(), oracle.direction());
    }
    let mut valid: Vec<bool> = oracles.iter().map(|o| o.valid).collect();
    for col in raw.values() {
        for (v, x) in valid.iter_mut().zip(col) {
            *v &= x.is_finite();
        }
    }
    let valid_idx: Vec<usize> = (0..ligands.len()).filter(|&i| valid[i]).collect();
    let descs: Vec<Vec<f64>> = valid_idx.iter().map(|&i| oracles[i].descriptor.clone()).collect();
    let mut diversity = vec![0.0; ligands.len()];
    for (&i, d) in valid_idx.iter().zip(diversity_scores(&descs, cfg.diversity_mode)) {
        diversity[i] = d;
    }
    if cfg.weights.contains_key(DIVERSITY) {
        raw.insert(DIVERSITY.to_string(), diversity.clone());
        directions.insert(DIVERSITY.to_string(), Direction::Maximize);
    }
    // non-finite raw values of invalid ligands must not reach the rank transform
    let raw_safe: BTreeMap<String, Vec<f64>> = raw
        .iter()
        .map(|(k, col)| (k.clone(), col.iter().map(|&x| if x.is_finite() { x } else { 0.0 }).collect()))
        .collect();
    let (transformed, composite, penalty) = composite_reward(&raw_safe, &directions, &valid, &cfg.weights)?;
    for (o, v) in oracles.iter().zip(&valid) {
        debug_assert!(o.valid >= *v);
    }
    let oracles = oracles.into_iter().zip(&valid).map(|(mut o, &v)| {
        o.valid = v;
        o
    });
    Ok(RewardBatch { oracles: oracles.collect(), raw, transformed, diversity, composite, penalty })
}

/// Population z-scores with the standard-deviation guard.
pub fn z_scores(xs: &[f64]) -> Vec<f64> {
    let m = mean(xs);
    let s = population_std(xs) + STD_EPS;
    xs.iter().map(|x| (x - m) / s).collect()
}

/// `5 z(|affinity|) + z(qed) + 1.5 z(sa)` over the whole pool.
pub fn topn_scores(affinity: &[f64], qed: &[f64], sa: &[f64]) -> Result<Vec<f64>> {
    if affinity.len() != qed.len() || qed.len() != sa.len() {
        return Err(Error::Shape("top-N columns differ in length".into()));
    }
    let abs: Vec<f64> = affinity.iter().map(|a| a.abs()).collect();
    let (za, zq, zs) = (z_scores(&abs), z_scores(qed), z_scores(sa));
    let (wa, wq, ws) = TOPN_WEIGHTS;
    Ok((0..abs.len()).map(|i| wa * za[i] + wq * zq[i] + ws * zs[i]).collect())
}
