//! Synthetic pocket/ligand complexes and the empirical ligand-size sampler.
//!
//! A pocket is a set of typed points on the lower hemisphere of a sphere
//! centred at the origin, so the cavity opens toward `+z`. Ligands are grown
//! as branched chains, rotated at random, and dropped with their centre of
//! mass on the cavity anchor: halfway between the fitted sphere centre and
//! the pocket centroid. The anchor depends on the pocket alone, so sampling
//! uses the same frame.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    self, load_ligand, load_pocket, LigandCloud, O3Transform, PocketCloud, LIGAND_TYPES, POCKET_TYPES,
};
use crate::random::{normal, rng_from_seed};

/// Ligand type each pocket type rewards on contact.
pub const PREFERRED_LIGAND_TYPE: [usize; POCKET_TYPES] = [1, 3, 0, 2];

/// Target ligand composition of the world.
pub const TARGET_COMPOSITION: [f64; LIGAND_TYPES] = [0.3, 0.25, 0.2, 0.15, 0.1];

/// Probability that an atom takes the preferred type of its nearest pocket atom.
const PREFERENCE_MIX: f64 = 0.6;

const BOND_MIN: f64 = 0.95;
const BOND_MAX: f64 = 1.45;
const GROW_RADIUS: f64 = 1.9;
const GROW_TRIES: usize = 200;
const POCKET_CLEARANCE: f64 = 1.0;
const CAVITY_MARGIN: f64 = 0.5;
const PLACEMENT_ATTEMPTS: usize = 4000;
const ROTATIONS_PER_SHAPE: usize = 20;
const ANCHOR_DEPTH: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub pocket_radius: f64,
    pub n_pockets: usize,
    pub pocket_size_range: (usize, usize),
    pub ligand_size_range: (usize, usize),
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { pocket_radius: 4.0, n_pockets: 50, pocket_size_range: (15, 25), ligand_size_range: (8, 14), seed: 0 }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let (pmin, pmax) = self.pocket_size_range;
        let (lmin, lmax) = self.ligand_size_range;
        if !(self.pocket_radius.is_finite() && self.pocket_radius > 0.0) {
            return Err(Error::Config(format!("pocket_radius must be positive, got {}", self.pocket_radius)));
        }
        if pmin == 0 || pmin > pmax || lmin == 0 || lmin > lmax {
            return Err(Error::Config(format!(
                "size ranges must be non-empty and positive, got pocket {:?}, ligand {:?}",
                self.pocket_size_range, self.ligand_size_range
            )));
        }
        Ok(())
    }
}

/// Deterministic random stream for one complex.
fn complex_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = rng_from_seed(seed);
    rng.set_stream(index as u64);
    rng
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v = [normal(rng), normal(rng), normal(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn row(a: &Array2<f64>, i: usize) -> [f64; 3] {
    [a[[i, 0]], a[[i, 1]], a[[i, 2]]]
}

fn generate_pocket<R: Rng + ?Sized>(cfg: &WorldConfig, rng: &mut R) -> Result<PocketCloud> {
    let n = rng.random_range(cfg.pocket_size_range.0..=cfg.pocket_size_range.1);
    let mut coords = Array2::zeros((n, 3));
    let mut types = Vec::with_capacity(n);
    for i in 0..n {
        let mut u = random_unit(rng);
        u[2] = -u[2].abs();
        for c in 0..3 {
            coords[[i, c]] = cfg.pocket_radius * u[c];
        }
        types.push(rng.random_range(0..POCKET_TYPES));
    }
    PocketCloud::new(coords, types)
}

/// Grows a compact branched chain around the origin, or `None` if it got stuck.
fn grow_shape<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Option<Vec<[f64; 3]>> {
    let mut atoms = vec![[0.0; 3]];
    while atoms.len() < n {
        let placed = (0..GROW_TRIES).find_map(|_| {
            let parent = atoms[rng.random_range(0..atoms.len())];
            let dir = random_unit(rng);
            let d = rng.random_range(BOND_MIN..BOND_MAX);
            let cand = [parent[0] + d * dir[0], parent[1] + d * dir[1], parent[2] + d * dir[2]];
            let ok = dist3(cand, [0.0; 3]) <= GROW_RADIUS && atoms.iter().all(|&a| dist3(a, cand) >= BOND_MIN);
            ok.then_some(cand)
        });
        atoms.push(placed?);
    }
    Some(atoms)
}

/// Rotates the shape about its centroid onto `center` if it clears the pocket
/// and stays inside the cavity.
fn try_place(shape: &[[f64; 3]], rot: &O3Transform, center: &Array1<f64>, pocket: &PocketCloud, radius: f64) -> Option<Array2<f64>> {
    let n = shape.len();
    let mut coords = Array2::from_shape_fn((n, 3), |(i, c)| shape[i][c]);
    coords = geometry::project_com_free(&coords);
    coords = rot.apply(&coords) + center.view().insert_axis(ndarray::Axis(0));
    let pc = pocket.coords();
    for i in 0..n {
        let x = row(&coords, i);
        if dist3(x, [0.0; 3]) > radius - CAVITY_MARGIN {
            return None;
        }
        if (0..pocket.len()).any(|j| dist3(x, row(pc, j)) < POCKET_CLEARANCE) {
            return None;
        }
    }
    Some(coords)
}

fn assign_types<R: Rng + ?Sized>(coords: &Array2<f64>, pocket: &PocketCloud, rng: &mut R) -> Vec<usize> {
    let pc = pocket.coords();
    (0..coords.nrows())
        .map(|i| {
            let x = row(coords, i);
            if rng.random::<f64>() < PREFERENCE_MIX {
                let nearest = (0..pocket.len())
                    .min_by(|&a, &b| dist3(x, row(pc, a)).total_cmp(&dist3(x, row(pc, b))))
                    .expect("pocket is non-empty");
                PREFERRED_LIGAND_TYPE[pocket.types()[nearest]]
            } else {
                sample_categorical(&TARGET_COMPOSITION, rng)
            }
        })
        .collect()
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Least-squares sphere centre of the pocket points, from
/// `|x|^2 = 2 c.x + k`.
pub fn sphere_center(pocket: &PocketCloud) -> Result<Array1<f64>> {
    let mut ata = [[0.0f64; 5]; 4];
    for r in pocket.coords().rows() {
        let a = [2.0 * r[0], 2.0 * r[1], 2.0 * r[2], 1.0];
        let b = r.dot(&r);
        for i in 0..4 {
            for j in 0..4 {
                ata[i][j] += a[i] * a[j];
            }
            ata[i][4] += a[i] * b;
        }
    }
    // Gauss-Jordan with partial pivoting on the augmented normal equations
    for col in 0..4 {
        let piv = (col..4).max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs())).expect("non-empty");
        if ata[piv][col].abs() < 1e-9 {
            return Err(Error::InvalidArgument("pocket points do not determine a sphere".into()));
        }
        ata.swap(col, piv);
        for r in 0..4 {
            if r != col {
                let f = ata[r][col] / ata[col][col];
                for c in col..5 {
                    ata[r][c] -= f * ata[col][c];
                }
            }
        }
    }
    Ok(Array1::from_iter((0..3).map(|i| ata[i][4] / ata[i][i])))
}

/// Point the ligand centre of mass is placed on.
pub fn cavity_anchor(pocket: &PocketCloud) -> Result<Array1<f64>> {
    let c = sphere_center(pocket)?;
    Ok(&c + &((pocket.centroid() - &c) * ANCHOR_DEPTH))
}

/// The pocket in the sampling frame: cavity anchor at the origin.
pub fn sampling_frame(pocket: &PocketCloud) -> Result<PocketCloud> {
    Ok(pocket.translated(&-cavity_anchor(pocket)?))
}

/// Builds complex `index` of the world. Deterministic per `(seed, index)`.
pub fn generate_complex(cfg: &WorldConfig, index: usize) -> Result<(PocketCloud, LigandCloud)> {
    cfg.validate()?;
    if index >= cfg.n_pockets {
        return Err(Error::InvalidArgument(format!("complex index {index} >= n_pockets {}", cfg.n_pockets)));
    }
    let mut rng = complex_rng(cfg.seed, index);
    let pocket = generate_pocket(cfg, &mut rng)?;
    let n_lig = rng.random_range(cfg.ligand_size_range.0..=cfg.ligand_size_range.1);
    let center = cavity_anchor(&pocket)?;
    let mut attempts = 0;
    while attempts < PLACEMENT_ATTEMPTS {
        let Some(shape) = grow_shape(n_lig, &mut rng) else {
            attempts += 1;
            continue;
        };
        for _ in 0..ROTATIONS_PER_SHAPE {
            attempts += 1;
            let rot = O3Transform::random(rng.random());
            if let Some(coords) = try_place(&shape, &rot, &center, &pocket, cfg.pocket_radius) {
                let types = assign_types(&coords, &pocket, &mut rng);
                return Ok((pocket, LigandCloud::from_types(coords, &types)?));
            }
        }
    }
    Err(Error::Placement { index, attempts })
}

/// A generated or loaded synthetic world.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub complexes: Vec<(PocketCloud, LigandCloud)>,
}

impl World {
    pub fn generate(cfg: &WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let complexes = (0..cfg.n_pockets).into_par_iter().map(|i| generate_complex(cfg, i)).collect::<Result<_>>()?;
        Ok(Self { config: cfg.clone(), complexes })
    }

    pub fn size_sampler(&self) -> Result<SizeSampler> {
        SizeSampler::from_sizes(self.complexes.iter().map(|(p, l)| (p.len(), l.len())))
    }

    /// Writes `<dir>/<i>/{pocket,ligand}.xyz` and `<dir>/meta.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, (pocket, ligand)) in self.complexes.iter().enumerate() {
            let sub = dir.join(i.to_string());
            fs::create_dir_all(&sub)?;
            let mut out = BufWriter::new(fs::File::create(sub.join("pocket.xyz"))?);
            geometry::write_pocket_xyz(&mut out, pocket)?;
            out.flush()?;
            let mut out = BufWriter::new(fs::File::create(sub.join("ligand.xyz"))?);
            geometry::write_ligand_xyz(&mut out, ligand)?;
            out.flush()?;
        }
        let meta = WorldMeta { config: self.config.clone(), size_histogram: self.size_sampler()?.histogram().clone() };
        let mut text = serde_json::to_string_pretty(&meta)?;
        text.push('\n');
        fs::write(dir.join("meta.json"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path)
            .map_err(|e| Error::parse(&meta_path, format!("cannot read world metadata: {e}")))?;
        let meta: WorldMeta = serde_json::from_str(&text).map_err(|e| Error::parse(&meta_path, e.to_string()))?;
        let complexes = (0..meta.config.n_pockets)
            .map(|i| {
                let sub: PathBuf = dir.join(i.to_string());
                Ok((load_pocket(&sub.join("pocket.xyz"))?, load_ligand(&sub.join("ligand.xyz"))?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { config: meta.config, complexes })
    }
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldMeta {
    pub config: WorldConfig,
    /// `N_P -> N_M -> count`.
    pub size_histogram: BTreeMap<usize, BTreeMap<usize, usize>>,
}

/// Empirical `p(N_M | N_P)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSampler {
    histogram: BTreeMap<usize, BTreeMap<usize, usize>>,
}

impl SizeSampler {
    pub fn from_sizes(sizes: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut histogram: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
        for (n_p, n_m) in sizes {
            *histogram.entry(n_p).or_default().entry(n_m).or_default() += 1;
        }
        if histogram.is_empty() {
            return Err(Error::EmptySampler);
        }
        Ok(Self { histogram })
    }

    pub fn histogram(&self) -> &BTreeMap<usize, BTreeMap<usize, usize>> {
        &self.histogram
    }

    /// Populated bucket closest to `n_p`; ties go to the smaller bucket.
    pub fn bucket_for(&self, n_p: usize) -> usize {
        let below = self.histogram.range(..=n_p).next_back().map(|(k, _)| *k);
        let above = self.histogram.range(n_p..).next().map(|(k, _)| *k);
        match (below, above) {
            (Some(b), Some(a)) => {
                if n_p - b <= a - n_p {
                    b
                } else {
                    a
                }
            }
            (Some(b), None) => b,
            (None, Some(a)) => a,
            (None, None) => unreachable!("sampler is never empty"),
        }
    }

    /// Conditional distribution `p(N_M | bucket(n_p))` as `(N_M, probability)`.
    pub fn conditional(&self, n_p: usize) -> Vec<(usize, f64)> {
        let counts = &self.histogram[&self.bucket_for(n_p)];
        let total: usize = counts.values().sum();
        counts.iter().map(|(&n, &c)| (n, c as f64 / total as f64)).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n_p: usize, rng: &mut R) -> usize {
        let counts = &self.histogram[&self.bucket_for(n_p)];
        let total: usize = counts.values().sum();
        let mut u = rng.random_range(0..total);
        for (&n, &c) in counts {
            if u < c {
                return n;
            }
            u -= c;
        }
        unreachable!("draw is below the total count")
    }
}
