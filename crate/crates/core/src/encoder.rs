//! Post-norm transformer encoder backbone with a tied masked-LM head.
//!
//! The forward pass itself lives on [`crate::model::Model`], which also routes
//! activations through any attached adapters; an [`Encoder`] here is the bare
//! weight set plus its configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParameterSet, Tensor};
use crate::tokenizer::MaskedBatch;

pub const BACKBONE_PREFIX: &str = "encoder.";
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 4,
            hidden: 64,
            heads: 4,
            ffn: 256,
            vocab_size: 2048,
            max_positions: 128,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// Base-size RoBERTa geometry. Only used for budget arithmetic.
    pub fn paper_scale() -> Self {
        EncoderConfig {
            num_layers: 12,
            hidden: 768,
            heads: 12,
            ffn: 3072,
            vocab_size: 50265,
            max_positions: 514,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.num_layers >= 1, "num_layers must be at least 1"),
            (self.hidden >= 2, "hidden must be at least 2"),
            (self.heads >= 1, "heads must be at least 1"),
            (self.ffn >= 1, "ffn must be at least 1"),
            (self.vocab_size > 5, "vocab_size must exceed the special tokens"),
            (self.max_positions >= 1, "max_positions must be at least 1"),
            ((0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1)"),
            (self.layer_norm_eps > 0.0, "layer_norm_eps must be positive"),
        ];
        if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(Error::Config(msg.to_string()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Every backbone parameter as `(name, shape)`, in construction order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f, v, p) = (self.hidden, self.ffn, self.vocab_size, self.max_positions);
        let mut out = vec![
            ("embeddings.word".to_string(), vec![v, h]),
            ("embeddings.position".to_string(), vec![p, h]),
            ("embeddings.ln.gamma".to_string(), vec![h]),
            ("embeddings.ln.beta".to_string(), vec![h]),
        ];
        for l in 1..=self.num_layers {
            for proj in ["query", "key", "value", "output"] {
                out.push((format!("layer{l}.attn.{proj}.w"), vec![h, h]));
                out.push((format!("layer{l}.attn.{proj}.b"), vec![h]));
            }
            out.push((format!("layer{l}.attn_ln.gamma"), vec![h]));
            out.push((format!("layer{l}.attn_ln.beta"), vec![h]));
            out.push((format!("layer{l}.ffn.in.w"), vec![h, f]));
            out.push((format!("layer{l}.ffn.in.b"), vec![f]));
            out.push((format!("layer{l}.ffn.out.w"), vec![f, h]));
            out.push((format!("layer{l}.ffn.out.b"), vec![h]));
            out.push((format!("layer{l}.out_ln.gamma"), vec![h]));
            out.push((format!("layer{l}.out_ln.beta"), vec![h]));
        }
        out.push(("mlm.dense.w".to_string(), vec![h, h]));
        out.push(("mlm.dense.b".to_string(), vec![h]));
        out.push(("mlm.ln.gamma".to_string(), vec![h]));
        out.push(("mlm.ln.beta".to_string(), vec![h]));
        out.push(("mlm.bias".to_string(), vec![v]));
        out.into_iter()
            .map(|(n, s)| (format!("{BACKBONE_PREFIX}{n}"), s))
            .collect()
    }
}

/// Backbone weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParameterSet,
}

impl Encoder {
    /// Random initialization: weights `N(0, 0.02²)`, biases zero, layer-norm
    /// scales one.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for (name, shape) in config.parameter_shapes() {
            let t = if name.ends_with(".gamma") {
                Tensor::full(shape, 1.0)
            } else if name.ends_with(".w") || name.ends_with("embeddings.word") || name.ends_with("embeddings.position") {
                Tensor::randn(shape, INIT_STD, &mut rng)
            } else {
                Tensor::zeros(shape)
            };
            params.insert(name, t, true)?;
        }
        Ok(Encoder { config, params })
    }

    /// Rebuilds an encoder from a parameter set, checking every expected name
    /// and shape.
    pub fn from_params(config: EncoderConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        for (name, shape) in &expected {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("encoder", format!("`{name}` is {:?}, expected {shape:?}", t.shape())));
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "backbone has {} tensors, expected {}",
                params.len(),
                expected.len()
            )));
        }
        Ok(Encoder { config, params })
    }
}

/// Token ids with their padding mask, `[batch × len]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
}

impl InputBatch {
    pub fn new(batch: usize, len: usize, ids: Vec<u32>, mask: Vec<u8>) -> Result<Self> {
        if batch == 0 || len == 0 || ids.len() != batch * len || mask.len() != batch * len {
            return Err(Error::shape(
                "input_batch",
                format!("{batch}×{len} with {} ids and {} mask entries", ids.len(), mask.len()),
            ));
        }
        Ok(InputBatch { batch, len, ids, mask })
    }

    /// Right-pads sequences with the pad id.
    pub fn from_sequences(sequences: &[Vec<u32>]) -> Result<Self> {
        Ok(Self::from(&MaskedBatch::unmasked(sequences)?))
    }
}

impl From<&MaskedBatch> for InputBatch {
    fn from(b: &MaskedBatch) -> Self {
        InputBatch {
            batch: b.batch,
            len: b.len,
            ids: b.input_ids.clone(),
            mask: b.attention_mask.clone(),
        }
    }
}
