//! Point-cloud types for pockets and ligands, the centre-of-mass-free
//! coordinate subspace, and O(3) transforms.
//!
//! Atoms carry no masses: the centre of mass is the plain coordinate mean.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Size of the pocket atom-type alphabet.
pub const POCKET_TYPES: usize = 4;
/// Size of the ligand atom-type alphabet.
pub const LIGAND_TYPES: usize = 5;
/// Scale applied to one-hot ligand features before diffusion.
pub const FEATURE_SCALE: f64 = 0.25;

pub const POCKET_ALPHABET: [&str; POCKET_TYPES] = ["P0", "P1", "P2", "P3"];
pub const LIGAND_ALPHABET: [&str; LIGAND_TYPES] = ["L0", "L1", "L2", "L3", "L4"];

const ORTHO_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PocketCloud {
    coords: Array2<f64>,
    types: Vec<usize>,
}

impl PocketCloud {
    pub fn new(coords: Array2<f64>, types: Vec<usize>) -> Result<Self> {
        if coords.nrows() == 0 {
            return Err(Error::InvalidArgument("pocket must contain at least one atom".into()));
        }
        if coords.ncols() != 3 || coords.nrows() != types.len() {
            return Err(Error::Shape(format!(
                "pocket coords {:?} vs {} types",
                coords.dim(),
                types.len()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pocket coordinates"));
        }
        if let Some(&bad) = types.iter().find(|&&k| k >= POCKET_TYPES) {
            return Err(Error::InvalidArgument(format!("pocket type {bad} out of range")));
        }
        Ok(Self { coords, types })
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn coords(&self) -> &Array2<f64> {
        &self.coords
    }

    pub fn types(&self) -> &[usize] {
        &self.types
    }

    pub fn one_hot(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.len(), POCKET_TYPES));
        for (i, &k) in self.types.iter().enumerate() {
            out[[i, k]] = 1.0;
        }
        out
    }

    pub fn centroid(&self) -> Array1<f64> {
        column_mean(&self.coords)
    }

    pub fn translated(&self, shift: &Array1<f64>) -> Self {
        Self { coords: &self.coords + &shift.view().insert_axis(Axis(0)), types: self.types.clone() }
    }

    /// Pocket shifted so that its own centroid is at the origin.
    pub fn centered(&self) -> Self {
        self.translated(&-self.centroid())
    }

    pub fn with_coords(&self, coords: Array2<f64>) -> Result<Self> {
        Self::new(coords, self.types.clone())
    }
}

/// A ligand: coordinates plus per-atom feature channels.
///
/// Clean ligands hold scaled one-hot features; noisy diffusion states hold
/// unconstrained reals in the same layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LigandCloud {
    pub coords: Array2<f64>,
    pub features: Array2<f64>,
}

impl LigandCloud {
    pub fn new(coords: Array2<f64>, features: Array2<f64>) -> Result<Self> {
        if coords.nrows() == 0 {
            return Err(Error::InvalidArgument("ligand must contain at least one atom".into()));
        }
        if coords.ncols() != 3 || features.nrows() != coords.nrows() || features.ncols() != LIGAND_TYPES {
            return Err(Error::Shape(format!(
                "ligand coords {:?} vs features {:?}",
                coords.dim(),
                features.dim()
            )));
        }
        Ok(Self { coords, features })
    }

    /// Clean ligand from coordinates and type indices.
    pub fn from_types(coords: Array2<f64>, types: &[usize]) -> Result<Self> {
        if let Some(&bad) = types.iter().find(|&&k| k >= LIGAND_TYPES) {
            return Err(Error::InvalidArgument(format!("ligand type {bad} out of range")));
        }
        let mut features = Array2::zeros((types.len(), LIGAND_TYPES));
        for (i, &k) in types.iter().enumerate() {
            features[[i, k]] = FEATURE_SCALE;
        }
        Self::new(coords, features)
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.nrows() == 0
    }

    /// Row-wise argmax of the features; ties go to the lowest index.
    pub fn types(&self) -> Vec<usize> {
        self.features
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    pub fn centroid(&self) -> Array1<f64> {
        column_mean(&self.coords)
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().chain(self.features.iter()).all(|v| v.is_finite())
    }
}

pub fn column_mean(a: &Array2<f64>) -> Array1<f64> {
    let n = a.nrows().max(1) as f64;
    a.sum_axis(Axis(0)) / n
}

/// Shifts both clouds so that the ligand's coordinate mean is the origin.
pub fn center_on_ligand(pocket: &PocketCloud, ligand: &LigandCloud) -> (PocketCloud, LigandCloud) {
    let shift = -ligand.centroid();
    let pocket = pocket.translated(&shift);
    let coords = project_com_free(&ligand.coords);
    (pocket, LigandCloud { coords, features: ligand.features.clone() })
}

/// Projects an `N x 3` array onto the zero-mean subspace.
pub fn project_com_free(a: &Array2<f64>) -> Array2<f64> {
    let mean = column_mean(a);
    a - &mean.view().insert_axis(Axis(0))
}

/// Pairwise Euclidean distance matrix.
pub fn distance_matrix(coords: &Array2<f64>) -> Array2<f64> {
    let n = coords.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| distance(coords, i, coords, j))
}

pub fn distance(a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize) -> f64 {
    let dx = a[[i, 0]] - b[[j, 0]];
    let dy = a[[i, 1]] - b[[j, 1]];
    let dz = a[[i, 2]] - b[[j, 2]];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// An orthogonal 3x3 matrix acting on row-vector coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct O3Transform {
    rotation: Array2<f64>,
}

impl O3Transform {
    pub fn new(rotation: Array2<f64>) -> Result<Self> {
        if rotation.dim() != (3, 3) {
            return Err(Error::Shape(format!("rotation must be 3x3, got {:?}", rotation.dim())));
        }
        let gram = rotation.t().dot(&rotation);
        let err = (&gram - &Array2::<f64>::eye(3)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(err <= ORTHO_TOL) {
            return Err(Error::InvalidArgument(format!("matrix is not orthogonal (|R^T R - I| = {err:e})")));
        }
        Ok(Self { rotation })
    }

    pub fn identity() -> Self {
        Self { rotation: Array2::eye(3) }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.rotation
    }

    pub fn determinant(&self) -> f64 {
        det3(&self.rotation)
    }

    /// Applies `x -> R x` to every row.
    pub fn apply(&self, coords: &Array2<f64>) -> Array2<f64> {
        coords.dot(&self.rotation.t())
    }

    pub fn apply_pocket(&self, pocket: &PocketCloud) -> PocketCloud {
        PocketCloud { coords: self.apply(&pocket.coords), types: pocket.types.clone() }
    }

    pub fn apply_ligand(&self, ligand: &LigandCloud) -> LigandCloud {
        LigandCloud { coords: self.apply(&ligand.coords), features: ligand.features.clone() }
    }

    /// Haar-random element of O(3); proper and improper with equal probability.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Array2::from_shape_fn((3, 3), |_| crate::random::normal(&mut rng));
        let mut q = gram_schmidt(&g);
        if det3(&q) < 0.0 {
            q.column_mut(0).mapv_inplace(|v| -v);
        }
        if rand::Rng::random_bool(&mut rng, 0.5) {
            q.mapv_inplace(|v| -v);
        }
        Self { rotation: q }
    }
}

fn gram_schmidt(g: &Array2<f64>) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((3, 3));
    for j in 0..3 {
        let mut v = g.column(j).to_owned();
        for k in 0..j {
            let qk = q.column(k).to_owned();
            let proj = qk.dot(&v);
            v -= &(qk * proj);
        }
        let norm = v.dot(&v).sqrt();
        q.column_mut(j).assign(&(v / norm));
    }
    // a second pass cleans up rounding so R^T R = I holds tightly
    let mut out = Array2::<f64>::zeros((3, 3));
    for j in 0..3 {
        let mut v = q.column(j).to_owned();
        for k in 0..j {
            let ok = out.column(k).to_owned();
            let proj = ok.dot(&v);
            v -= &(ok * proj);
        }
        let norm = v.dot(&v).sqrt();
        out.column_mut(j).assign(&(v / norm));
    }
    out
}

fn det3(m: &Array2<f64>) -> f64 {
    m[[0, 0]] * (m[[1, 1]] * m[[2, 2]] - m[[1, 2]] * m[[2, 1]])
        - m[[0, 1]] * (m[[1, 0]] * m[[2, 2]] - m[[1, 2]] * m[[2, 0]])
        + m[[0, 2]] * (m[[1, 0]] * m[[2, 1]] - m[[1, 1]] * m[[2, 0]])
}

/// Role line of the text format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Pocket,
    Ligand,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Pocket => "pocket",
            Role::Ligand => "ligand",
        }
    }
}

fn write_xyz<W: Write>(mut out: W, role: Role, names: &[&str], coords: &Array2<f64>) -> std::io::Result<()> {
    writeln!(out, "{}", names.len())?;
    writeln!(out, "role={}", role.as_str())?;
    for (i, name) in names.iter().enumerate() {
        writeln!(out, "{} {} {} {}", name, coords[[i, 0]], coords[[i, 1]], coords[[i, 2]])?;
    }
    Ok(())
}

pub fn write_pocket_xyz<W: Write>(out: W, pocket: &PocketCloud) -> std::io::Result<()> {
    let names: Vec<&str> = pocket.types.iter().map(|&k| POCKET_ALPHABET[k]).collect();
    write_xyz(out, Role::Pocket, &names, &pocket.coords)
}

/// Writes a ligand decoded by row-argmax of its features.
pub fn write_ligand_xyz<W: Write>(out: W, ligand: &LigandCloud) -> std::io::Result<()> {
    let names: Vec<&str> = ligand.types().iter().map(|&k| LIGAND_ALPHABET[k]).collect();
    write_xyz(out, Role::Ligand, &names, &ligand.coords)
}

fn read_xyz<R: BufRead>(input: R, path: &Path) -> Result<(Role, Vec<String>, Array2<f64>)> {
    let mut lines = input.lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::parse(path, format!("missing {what}")))?
            .map_err(Error::from)
    };
    let n: usize = next("atom count")?.trim().parse().map_err(|e| Error::parse(path, format!("atom count: {e}")))?;
    let role = match next("role line")?.trim() {
        "role=pocket" => Role::Pocket,
        "role=ligand" => Role::Ligand,
        other => return Err(Error::parse(path, format!("bad role line {other:?}"))),
    };
    let mut names = Vec::with_capacity(n);
    let mut coords = Array2::zeros((n, 3));
    for i in 0..n {
        let line = next("atom line")?;
        let mut parts = line.split_whitespace();
        let name = parts.next().ok_or_else(|| Error::parse(path, format!("empty atom line {i}")))?;
        names.push(name.to_string());
        for c in 0..3 {
            let v = parts
                .next()
                .ok_or_else(|| Error::parse(path, format!("atom line {i} has too few fields")))?;
            coords[[i, c]] = v.parse().map_err(|e| Error::parse(path, format!("atom line {i}: {e}")))?;
        }
        if parts.next().is_some() {
            return Err(Error::parse(path, format!("atom line {i} has extra fields")));
        }
    }
    Ok((role, names, coords))
}

fn lookup(alphabet: &[&str], name: &str, path: &Path) -> Result<usize> {
    alphabet
        .iter()
        .position(|a| *a == name)
        .ok_or_else(|| Error::parse(path, format!("unknown atom type {name:?}")))
}

pub fn read_pocket_xyz<R: BufRead>(input: R, path: &Path) -> Result<PocketCloud> {
    let (role, names, coords) = read_xyz(input, path)?;
    if role != Role::Pocket {
        return Err(Error::parse(path, "expected role=pocket"));
    }
    let types = names.iter().map(|n| lookup(&POCKET_ALPHABET, n, path)).collect::<Result<Vec<_>>>()?;
    PocketCloud::new(coords, types)
}

pub fn read_ligand_xyz<R: BufRead>(input: R, path: &Path) -> Result<LigandCloud> {
    let (role, names, coords) = read_xyz(input, path)?;
    if role != Role::Ligand {
        return Err(Error::parse(path, "expected role=ligand"));
    }
    let types = names.iter().map(|n| lookup(&LIGAND_ALPHABET, n, path)).collect::<Result<Vec<_>>>()?;
    LigandCloud::from_types(coords, &types)
}

pub fn load_pocket(path: &Path) -> Result<PocketCloud> {
    let file = std::fs::File::open(path)?;
    read_pocket_xyz(std::io::BufReader::new(file), path)
}

pub fn load_ligand(path: &Path) -> Result<LigandCloud> {
    let file = std::fs::File::open(path)?;
    read_ligand_xyz(std::io::BufReader::new(file), path)
}

/// Binary encoding of a dense matrix: `u32 rows, u32 cols, f64 LE data`.
pub fn write_matrix<W: Write>(mut out: W, a: &Array2<f64>) -> std::io::Result<()> {
    out.write_u32::<LittleEndian>(a.nrows() as u32)?;
    out.write_u32::<LittleEndian>(a.ncols() as u32)?;
    for &v in a.iter() {
        out.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_matrix<R: Read>(mut input: R) -> std::io::Result<Array2<f64>> {
    let rows = input.read_u32::<LittleEndian>()? as usize;
    let cols = input.read_u32::<LittleEndian>()? as usize;
    let mut data = vec![0.0; rows * cols];
    input.read_f64_into::<LittleEndian>(&mut data)?;
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

pub fn write_ligand_binary<W: Write>(mut out: W, ligand: &LigandCloud) -> std::io::Result<()> {
    write_matrix(&mut out, &ligand.coords)?;
    write_matrix(&mut out, &ligand.features)
}

pub fn read_ligand_binary<R: Read>(mut input: R) -> Result<LigandCloud> {
    let coords = read_matrix(&mut input)?;
    let features = read_matrix(&mut input)?;
    LigandCloud::new(coords, features)
}
