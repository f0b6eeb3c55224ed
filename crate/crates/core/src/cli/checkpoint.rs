//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f64` in row-major layer order:
//! parameters first, then the first and second optimizer moments if present.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::random::Rng64;
use crate::schedule::ScheduleSpec;

pub const MAGIC: &[u8; 8] = b"PKPOCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schedule: ScheduleSpec,
    pub params: DenoiserParams,
    pub optimizer: Option<AdamW>,
    /// Completed fine-tuning iterations (0 for a pretrained model).
    pub iteration: usize,
    pub rng: Rng64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    schedule: ScheduleSpec,
    denoiser: DenoiserConfig,
    shapes: Vec<(usize, usize)>,
    optimizer: Option<OptimizerHeader>,
    iteration: usize,
    rng: Rng64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Header {
            version: FORMAT_VERSION,
            schedule: self.schedule,
            denoiser: self.params.config(),
            shapes: self.params.tensors().iter().map(|t| t.dim()).collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader { config: o.config, step: o.step }),
            iteration: self.iteration,
            rng: self.rng.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        out.write_u64::<LittleEndian>(json.len() as u64)?;
        out.write_all(&json)?;
        let mut groups = vec![&self.params];
        if let Some(o) = &self.optimizer {
            groups.extend([&o.m, &o.v]);
        }
        for group in groups {
            for t in group.tensors() {
                for &x in t.iter() {
                    out.write_f64::<LittleEndian>(x)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated file".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = input.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let len = input.read_u64::<LittleEndian>()?;
        let mut json = vec![0u8; usize::try_from(len).map_err(|_| Error::Checkpoint("header too large".into()))?];
        input.read_exact(&mut json)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.version != version {
            return Err(Error::Checkpoint("header and preamble versions differ".into()));
        }
        let read_group = |input: &mut R| -> Result<DenoiserParams> {
            let mut tensors = Vec::with_capacity(header.shapes.len());
            for &(r, c) in &header.shapes {
                let mut data = vec![0.0; r * c];
                input.read_f64_into::<LittleEndian>(&mut data).map_err(|_| Error::Checkpoint("truncated tensors".into()))?;
                tensors.push(Array2::from_shape_vec((r, c), data).expect("length matches shape"));
            }
            DenoiserParams::from_tensors(header.denoiser, tensors)
                .map_err(|e| Error::Checkpoint(format!("tensor layout: {e}")))
        };
        let params = read_group(&mut input)?;
        let optimizer = match &header.optimizer {
            Some(o) => {
                let m = read_group(&mut input)?;
                let v = read_group(&mut input)?;
                Some(AdamW { config: o.config, m, v, step: o.step })
            }
            None => None,
        };
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { schedule: header.schedule, params, optimizer, iteration: header.iteration, rng: header.rng })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::read_from(bytes.as_slice())
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn check_schedule(&self, expected: &ScheduleSpec) -> Result<()> {
        if &self.schedule != expected {
            return Err(Error::Config(format!(
                "checkpoint was trained with schedule {:?}, run asks for {:?}",
                self.schedule, expected
            )));
        }
        Ok(())
    }
}
