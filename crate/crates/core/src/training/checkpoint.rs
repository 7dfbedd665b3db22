//! Single-file checkpoints: magic, version, a JSON header with config and
//! metrics, then the parameters as little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Phase, TrainConfig};
use super::finetune::{Classifier, ClassifierConfig};
use super::metrics::History;
use crate::cpc::{CpcConfig, CpcModel};
use crate::error::{bail, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MDCPCKPT";
pub const CHECKPOINT_FORMAT: &str = "mdcpc-checkpoint/v1";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub phase: Phase,
    pub cpc: Option<CpcConfig>,
    pub classifier: Option<ClassifierConfig>,
    pub train: TrainConfig,
    pub history: History,
    pub best_epoch: usize,
    pub rng: ChaCha8Rng,
    pub params: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    phase: Phase,
    cpc: Option<CpcConfig>,
    classifier: Option<ClassifierConfig>,
    train: TrainConfig,
    history: History,
    best_epoch: usize,
    rng: ChaCha8Rng,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .params
            .iter()
            .map(|(_, name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = Header {
            format: CHECKPOINT_FORMAT.to_string(),
            phase: self.phase,
            cpc: self.cpc.clone(),
            classifier: self.classifier.clone(),
            train: self.train.clone(),
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            rng: self.rng.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 4 * offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            bail!(Format, "not a checkpoint file (bad magic)");
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            bail!(Format, "unsupported checkpoint version {version}");
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let Some(json) = bytes.get(20..20 + hlen) else {
            bail!(Format, "checkpoint header truncated");
        };
        let header: Header = serde_json::from_slice(json)?;
        if header.format != CHECKPOINT_FORMAT {
            bail!(Format, "unknown checkpoint format `{}`", header.format);
        }
        let blob = &bytes[20 + hlen..];
        let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if blob.len() != 4 * total {
            bail!(Format, "checkpoint holds {} parameter bytes, header describes {}", blob.len(), 4 * total);
        }
        let mut params = ParamStore::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let Some(raw) = blob.get(4 * e.offset..4 * (e.offset + n)) else {
                bail!(Format, "tensor `{}` lies outside the parameter section", e.name);
            };
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(&e.name, Tensor::from_vec(&e.shape, data)?)?;
        }
        Ok(Self {
            phase: header.phase,
            cpc: header.cpc,
            classifier: header.classifier,
            train: header.train,
            history: header.history,
            best_epoch: header.best_epoch,
            rng: header.rng,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the CPC model whose parameter ids index `self.params`.
    pub fn cpc_model(&self) -> Result<CpcModel> {
        let Some(cfg) = &self.cpc else {
            bail!(Config, "checkpoint holds no CPC model");
        };
        let mut fresh = ParamStore::<f32>::new();
        let model = CpcModel::build(cfg, &mut fresh, &mut <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        check_layout(&fresh, &self.params)?;
        Ok(model)
    }

    /// Rebuilds the classifier whose parameter ids index `self.params`.
    pub fn classifier_model(&self) -> Result<Classifier> {
        let Some(cfg) = &self.classifier else {
            bail!(Config, "checkpoint holds no classifier parameters");
        };
        let mut fresh = ParamStore::<f32>::new();
        let model = Classifier::build(cfg, &mut fresh, &mut <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        check_layout(&fresh, &self.params)?;
        Ok(model)
    }
}

/// Both stores must hold the same names and shapes in the same order.
fn check_layout(expected: &ParamStore<f32>, found: &ParamStore<f32>) -> Result<()> {
    for (_, name, t) in expected.iter() {
        match found.id(name) {
            None => bail!(Config, "checkpoint lacks parameter `{name}`"),
            Some(id) if found.get(id).shape() != t.shape() => bail!(
                Config,
                "parameter `{name}` has shape {:?}, model expects {:?}",
                found.get(id).shape(),
                t.shape()
            ),
            Some(_) => {}
        }
    }
    if let Some((_, name, _)) = found.iter().find(|(_, n, _)| expected.id(n).is_none()) {
        bail!(Config, "checkpoint holds unexpected parameter `{name}`");
    }
    if expected.iter().zip(found.iter()).any(|((_, a, _), (_, b, _))| a != b) {
        bail!(Config, "checkpoint parameters are stored in an unexpected order");
    }
    Ok(())
}
