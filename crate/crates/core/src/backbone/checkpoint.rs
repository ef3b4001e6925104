//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MOCOCKPT"            8 bytes magic
//! version: u32          currently 1
//! header_len: u32
//! header: JSON          {config, provenance, params: [{name, shape, offset, len}]}
//! blocks: f32 LE        parameter values, in header order
//! sha256: 32 bytes      over everything above
//! ```

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{NamedArray, ParameterSnapshot};
use super::BackboneConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MOCOCKPT";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Where a set of weights came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitLineage {
    Random,
    GenericSupervised { dataset: String },
    Moco { dataset: String, limited: Option<usize> },
    Finetune { dataset: String, mode: String },
}

impl fmt::Display for InitLineage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitLineage::Random => f.write_str("random"),
            InitLineage::GenericSupervised { dataset } => write!(f, "generic_supervised:{dataset}"),
            InitLineage::Moco { dataset, limited: None } => write!(f, "moco:{dataset}"),
            InitLineage::Moco {
                dataset,
                limited: Some(n),
            } => write!(f, "moco:{dataset}[limited={n}]"),
            InitLineage::Finetune { dataset, mode } => write!(f, "finetune:{dataset}:{mode}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageStep {
    pub init: InitLineage,
    pub config_hash: String,
    pub seed: u64,
    pub epochs: usize,
}

/// Ordered chain of training stages, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub lineage: Vec<LineageStep>,
}

impl Provenance {
    pub fn random(seed: u64) -> Self {
        Self {
            lineage: vec![LineageStep {
                init: InitLineage::Random,
                config_hash: String::new(),
                seed,
                epochs: 0,
            }],
        }
    }

    pub fn then(&self, step: LineageStep) -> Self {
        let mut lineage = self.lineage.clone();
        lineage.push(step);
        Self { lineage }
    }

    pub fn latest(&self) -> Option<&LineageStep> {
        self.lineage.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: BackboneConfig,
    pub snapshot: ParameterSnapshot,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: BackboneConfig,
    provenance: Provenance,
    params: Vec<BlockEntry>,
}

/// Short hex digest of any serializable configuration.
pub fn config_hash<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let params = self
            .snapshot
            .params
            .iter()
            .map(|p| {
                let e = BlockEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    offset,
                    len: p.data.len(),
                };
                offset += p.data.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            provenance: self.provenance.clone(),
            params,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset * 4 + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.snapshot.params {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 + DIGEST_LEN {
            return Err(Error::Checksum(format!("file too short ({} bytes)", bytes.len())));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum("sha256 mismatch".into()));
        }
        if &body[..8] != MAGIC {
            return Err(Error::Checksum("bad magic".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
        let header_end = 16 + header_len;
        if header_end > body.len() {
            return Err(Error::Checksum("header overruns file".into()));
        }
        let header: Header = serde_json::from_slice(&body[16..header_end])?;
        let blocks = &body[header_end..];
        let params = header
            .params
            .into_iter()
            .map(|e| {
                let start = e.offset * 4;
                let end = start + e.len * 4;
                if end > blocks.len() || e.shape.iter().product::<usize>() != e.len {
                    return Err(Error::Checksum(format!("block {} out of range", e.name)));
                }
                let data = blocks[start..end]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect();
                Ok(NamedArray {
                    name: e.name,
                    shape: e.shape,
                    data,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: header.config,
            snapshot: ParameterSnapshot { params },
            provenance: header.provenance,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, checkpoint.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    Checkpoint::from_bytes(&bytes)
}
