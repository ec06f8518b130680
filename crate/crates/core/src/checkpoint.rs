//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, the JSON
//! manifest, then every tensor's values as little-endian `f64` in manifest
//! order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, PlacementPlan, HEAD_PREFIX, INVERTIBLE_PREFIX, LANGUAGE_PREFIX, TASK_PREFIX};
use crate::encoder::{EncoderConfig, BACKBONE_PREFIX};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{ParameterSet, Tensor};

const MAGIC: &[u8; 8] = b"ADLBCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Backbone,
    LAdapter,
    TAdapter,
}

impl ComponentKind {
    pub fn prefixes(self) -> &'static [&'static str] {
        match self {
            ComponentKind::Backbone => &[BACKBONE_PREFIX],
            ComponentKind::LAdapter => &[LANGUAGE_PREFIX, INVERTIBLE_PREFIX],
            ComponentKind::TAdapter => &[TASK_PREFIX, HEAD_PREFIX],
        }
    }

    pub fn owns(self, name: &str) -> bool {
        self.prefixes().iter().any(|p| name.starts_with(p))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ComponentKind,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub adapter: Option<AdapterConfig>,
    #[serde(default)]
    pub plan: Option<PlacementPlan>,
    #[serde(default)]
    pub language: Option<String>,
    #[serde(default)]
    pub task: Option<String>,
    pub tensors: Vec<TensorEntry>,
    /// SHA-256 over the stored parameters (see [`ParameterSet::checksum`]).
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParameterSet,
}

impl Checkpoint {
    /// Extracts one component from a model.
    pub fn from_model(model: &Model, kind: ComponentKind) -> Result<Self> {
        let params = model.params.subset(kind.prefixes());
        if params.is_empty() {
            return Err(Error::Checkpoint(format!("model has no {kind:?} parameters")));
        }
        // each component records only its own part of the placement
        let plan = match kind {
            ComponentKind::Backbone => None,
            ComponentKind::LAdapter => Some(PlacementPlan {
                task: Default::default(),
                ..model.plan.clone()
            }),
            ComponentKind::TAdapter => Some(PlacementPlan {
                language: Default::default(),
                invertible: false,
                ..model.plan.clone()
            }),
        };
        Ok(Self::new(kind, model.config.clone(), plan, params))
    }

    pub fn new(kind: ComponentKind, encoder: EncoderConfig, plan: Option<PlacementPlan>, params: ParameterSet) -> Self {
        let tensors = params
            .iter()
            .map(|(n, p)| TensorEntry {
                name: n.to_string(),
                shape: p.tensor.shape().to_vec(),
            })
            .collect();
        let checksum = params.checksum(|_| true);
        Checkpoint {
            manifest: Manifest {
                kind,
                encoder,
                adapter: None,
                plan,
                language: None,
                task: None,
                tensors,
                checksum,
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let values: usize = self.params.iter().map(|(_, p)| p.tensor.numel()).sum();
        let mut out = Vec::with_capacity(20 + manifest.len() + values * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for entry in &self.manifest.tensors {
            for v in self.params.get(&entry.name)?.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        read_exact(&mut r, &mut word)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut len = [0u8; 8];
        read_exact(&mut r, &mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > r.len() {
            return Err(Error::Checkpoint("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let mut params = ParameterSet::new();
        for entry in &manifest.tensors {
            let n: usize = entry.shape.iter().product();
            if r.len() < n * 8 {
                return Err(Error::Checkpoint(format!("truncated data for `{}`", entry.name)));
            }
            let data = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            r = &r[n * 8..];
            params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?, true)?;
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        let actual = params.checksum(|_| true);
        if actual != manifest.checksum {
            return Err(Error::Checkpoint(format!("checksum mismatch: stored {}, computed {actual}", manifest.checksum)));
        }
        if let Some(bad) = manifest.tensors.iter().find(|e| !manifest.kind.owns(&e.name)) {
            return Err(Error::Checkpoint(format!("`{}` does not belong to a {:?} checkpoint", bad.name, manifest.kind)));
        }
        Ok(Checkpoint { manifest, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated header".into()))
}

/// Rebuilds a model from a backbone checkpoint plus any adapter checkpoints.
/// The active plan is the union of the adapter checkpoints' plans.
pub fn compose(backbone: &Checkpoint, adapters: &[&Checkpoint]) -> Result<Model> {
    if backbone.manifest.kind != ComponentKind::Backbone {
        return Err(Error::Checkpoint("first checkpoint must be a backbone".into()));
    }
    let encoder = crate::encoder::Encoder::from_params(backbone.manifest.encoder.clone(), backbone.params.clone())?;
    let mut model = Model::bare(encoder);
    let mut plan = PlacementPlan::empty();
    for ck in adapters {
        if ck.manifest.kind == ComponentKind::Backbone {
            return Err(Error::Checkpoint("only one backbone may be composed".into()));
        }
        if ck.manifest.encoder.hidden != model.config.hidden || ck.manifest.encoder.num_layers != model.config.num_layers {
            return Err(Error::Checkpoint("adapter checkpoint was built for a different encoder geometry".into()));
        }
        model.add_parameters(ck.params.clone())?;
        if let Some(p) = &ck.manifest.plan {
            plan.language.extend(&p.language);
            plan.task.extend(&p.task);
            plan.invertible |= p.invertible;
        }
    }
    model.set_plan(plan)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Encoder;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            hidden: 8,
            heads: 2,
            ffn: 8,
            vocab_size: 12,
            max_positions: 6,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_bytes() {
        let m = Model::bare(Encoder::new(tiny(), 3).unwrap());
        let ck = Checkpoint::from_model(&m, ComponentKind::Backbone).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn corruption_detected() {
        let m = Model::bare(Encoder::new(tiny(), 3).unwrap());
        let mut bytes = Checkpoint::from_model(&m, ComponentKind::Backbone).unwrap().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(b"ADLBCK").is_err());
    }
}
