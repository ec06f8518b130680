//! The composed model: backbone weights, attached adapters, an optional task
//! head, and the forward pass that routes each layer through its adapters.

use std::sync::Arc;

use crate::adapters::{
    bottleneck_graph, invertible_forward_graph, invertible_inverse_graph, AdapterConfig, AdapterKind, AdapterStack,
    BottleneckAdapter, FreezeMode, InvertibleAdapter, PlacementPlan, HEAD_PREFIX, INVERTIBLE_PREFIX,
};
use crate::encoder::{Encoder, EncoderConfig, InputBatch, BACKBONE_PREFIX};
use crate::error::{Error, Result};
use crate::numerics::{Bindings, Graph, ParameterSet, Tensor, Var};

/// Graph handles produced by [`Model::forward_graph`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// Final hidden states `[batch, len, h]`.
    pub hidden: Var,
    /// Output of every layer, in order (layer 1 first).
    pub layers: Vec<Var>,
    /// Embedding output after the invertible adapter, `[batch, len, h]`.
    pub embeddings: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub plan: PlacementPlan,
    /// Backbone, adapter and head parameters under their namespaced names.
    pub params: ParameterSet,
    /// Apply the invertible adapter's inverse before the output projection.
    pub mlm_inverse: bool,
}

fn name(suffix: &str) -> String {
    format!("{BACKBONE_PREFIX}{suffix}")
}

impl Model {
    /// The bare backbone with nothing attached.
    pub fn bare(encoder: Encoder) -> Self {
        Model {
            config: encoder.config,
            plan: PlacementPlan::empty(),
            params: encoder.params,
            mlm_inverse: true,
        }
    }

    /// Splits the backbone weights back out.
    pub fn encoder(&self) -> Result<Encoder> {
        Encoder::from_params(self.config.clone(), self.params.subset(&[BACKBONE_PREFIX]))
    }

    /// Every adapter carried by the model, whether or not the plan activates it.
    pub fn adapters(&self) -> Result<AdapterStack> {
        AdapterStack::from_params(&self.params, self.config.num_layers)
    }

    pub fn param_count(&self) -> u64 {
        self.params.count()
    }

    /// Replaces the active placement. Every planned layer must carry an adapter.
    pub fn set_plan(&mut self, plan: PlacementPlan) -> Result<()> {
        plan.validate(self.config.num_layers)?;
        for (kind, layers) in [(AdapterKind::Language, &plan.language), (AdapterKind::Task, &plan.task)] {
            for &l in layers {
                let key = format!("{}down.w", BottleneckAdapter::prefix(kind, l));
                if !self.params.contains(&key) {
                    return Err(Error::Config(format!("plan puts a {kind:?} adapter on layer {l} but none is attached")));
                }
            }
        }
        if plan.invertible && !self.params.contains(&format!("{}down.w", InvertibleAdapter::step_prefix(1))) {
            return Err(Error::Config("plan enables the invertible adapter but none is attached".into()));
        }
        self.plan = plan;
        Ok(())
    }

    /// Adds adapters (and optionally a head) without changing the plan.
    pub fn add_parameters(&mut self, extra: ParameterSet) -> Result<()> {
        self.params.merge(extra)
    }

    /// Marks exactly the parameters the freeze mode allows as trainable and
    /// returns their names.
    pub fn freeze(&mut self, mode: FreezeMode) -> Vec<String> {
        self.params.set_trainable(|n| mode.trains(n));
        self.params.trainable_names()
    }

    fn invertible_steps(&self) -> usize {
        let mut k = 0;
        while self.params.contains(&format!("{}down.w", InvertibleAdapter::step_prefix(k + 1))) {
            k += 1;
        }
        k
    }

    fn check_input(&self, input: &InputBatch) -> Result<()> {
        if input.len > self.config.max_positions {
            return Err(Error::shape(
                "forward",
                format!("sequence length {} exceeds max positions {}", input.len, self.config.max_positions),
            ));
        }
        if let Some(bad) = input.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::shape("forward", format!("token id {bad} outside vocab {}", self.config.vocab_size)));
        }
        Ok(())
    }

    fn linear(&self, g: &mut Graph, b: &Bindings, x: Var, prefix: &str) -> Result<Var> {
        let y = g.matmul(x, b.get(&format!("{prefix}.w"))?, false)?;
        g.add_bias(y, b.get(&format!("{prefix}.b"))?)
    }

    fn norm(&self, g: &mut Graph, b: &Bindings, x: Var, prefix: &str) -> Result<Var> {
        let gamma = b.get(&format!("{prefix}.gamma"))?;
        let beta = b.get(&format!("{prefix}.beta"))?;
        g.layer_norm(x, gamma, beta, self.config.layer_norm_eps)
    }

    fn attention(&self, g: &mut Graph, b: &Bindings, x: Var, input: &InputBatch, l: usize, valid: &Arc<Vec<bool>>) -> Result<Var> {
        let (bs, t, h, heads) = (input.batch, input.len, self.config.hidden, self.config.heads);
        let dh = self.config.head_dim();
        let split = |g: &mut Graph, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[bs, t, heads, dh])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            g.reshape(v, &[bs * heads, t, dh])
        };
        let q = self.linear(g, b, x, &name(&format!("layer{l}.attn.query")))?;
        let k = self.linear(g, b, x, &name(&format!("layer{l}.attn.key")))?;
        let v = self.linear(g, b, x, &name(&format!("layer{l}.attn.value")))?;
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = g.masked_softmax(scores, valid.clone(), heads)?;
        let probs = g.dropout(probs, self.config.dropout)?;
        let ctx = g.batch_matmul(probs, v, false)?;
        let ctx = g.reshape(ctx, &[bs, heads, t, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[bs, t, h])?;
        self.linear(g, b, ctx, &name(&format!("layer{l}.attn.output")))
    }

    /// One encoder layer: attention, add & norm, feed-forward, adapters, add & norm.
    fn layer(&self, g: &mut Graph, b: &Bindings, x: Var, input: &InputBatch, l: usize, valid: &Arc<Vec<bool>>) -> Result<Var> {
        let a = self.attention(g, b, x, input, l, valid)?;
        let a = g.dropout(a, self.config.dropout)?;
        let x1 = g.add(x, a)?;
        let x1 = self.norm(g, b, x1, &name(&format!("layer{l}.attn_ln")))?;

        let f = self.linear(g, b, x1, &name(&format!("layer{l}.ffn.in")))?;
        let f = g.gelu(f);
        let f = self.linear(g, b, f, &name(&format!("layer{l}.ffn.out")))?;
        let f = g.dropout(f, self.config.dropout)?;

        let out_ln = name(&format!("layer{l}.out_ln"));
        let has_la = self.plan.has(AdapterKind::Language, l);
        let has_ta = self.plan.has(AdapterKind::Task, l);
        let top = if has_la || has_ta {
            let pre = g.add(x1, f)?;
            let hidden = self.norm(g, b, pre, &out_ln)?;
            let la = if has_la {
                Some(bottleneck_graph(g, b, &BottleneckAdapter::prefix(AdapterKind::Language, l), hidden, f)?)
            } else {
                None
            };
            if has_ta {
                let ta_in = la.unwrap_or(hidden);
                bottleneck_graph(g, b, &BottleneckAdapter::prefix(AdapterKind::Task, l), ta_in, f)?
            } else {
                la.unwrap_or(f)
            }
        } else {
            f
        };
        let y = g.add(x1, top)?;
        self.norm(g, b, y, &out_ln)
    }

    /// Forward pass over `[batch, len]` ids.
    pub fn forward_graph(&self, g: &mut Graph, b: &Bindings, input: &InputBatch) -> Result<Forward> {
        self.check_input(input)?;
        let (bs, t, h) = (input.batch, input.len, self.config.hidden);
        let ids: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..bs).flat_map(|_| 0..t).collect();
        let word = g.embedding(b.get(&name("embeddings.word"))?, &ids)?;
        let pos = g.embedding(b.get(&name("embeddings.position"))?, &positions)?;
        let x = g.add(word, pos)?;
        let x = g.reshape(x, &[bs, t, h])?;
        let x = self.norm(g, b, x, &name("embeddings.ln"))?;
        let mut x = g.dropout(x, self.config.dropout)?;
        if self.plan.invertible {
            x = invertible_forward_graph(g, b, self.invertible_steps(), x)?;
        }
        let embeddings = x;
        let valid = Arc::new(input.mask.iter().map(|&m| m != 0).collect::<Vec<_>>());
        let mut layers = Vec::with_capacity(self.config.num_layers);
        for l in 1..=self.config.num_layers {
            x = self.layer(g, b, x, input, l, &valid)?;
            layers.push(x);
        }
        Ok(Forward {
            hidden: x,
            layers,
            embeddings,
        })
    }

    /// MLM logits `[rows, V]` for the selected flat positions of `hidden`
    /// (`[batch, len, h]`), or for every position when `rows` is `None`.
    pub fn mlm_logits_graph(&self, g: &mut Graph, b: &Bindings, hidden: Var, rows: Option<&[usize]>) -> Result<Var> {
        let h = self.config.hidden;
        let n = g.value(hidden).numel() / h;
        let flat = g.reshape(hidden, &[n, h])?;
        let x = match rows {
            Some(r) => g.gather_rows(flat, r)?,
            None => flat,
        };
        let x = self.linear(g, b, x, &name("mlm.dense"))?;
        let x = g.gelu(x);
        let mut x = self.norm(g, b, x, &name("mlm.ln"))?;
        if self.plan.invertible && self.mlm_inverse {
            x = invertible_inverse_graph(g, b, self.invertible_steps(), x)?;
        }
        let logits = g.matmul(x, b.get(&name("embeddings.word"))?, true)?;
        g.add_bias(logits, b.get(&name("mlm.bias"))?)
    }

    /// Masked mean over non-pad positions followed by L2 normalization.
    pub fn sequence_embedding_graph(&self, g: &mut Graph, hidden: Var, input: &InputBatch) -> Result<Var> {
        let weights: Vec<f64> = input.mask.iter().map(|&m| f64::from(m.min(1))).collect();
        let pooled = g.masked_mean(hidden, &weights)?;
        g.l2_normalize(pooled)
    }

    /// Final hidden states in evaluation mode.
    pub fn hidden_states(&self, input: &InputBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let f = self.forward_graph(&mut g, &b, input)?;
        Ok(g.value(f.hidden).clone())
    }

    /// Every layer's output in evaluation mode.
    pub fn layer_outputs(&self, input: &InputBatch) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let f = self.forward_graph(&mut g, &b, input)?;
        Ok(f.layers.iter().map(|v| g.value(*v).clone()).collect())
    }

    /// MLM logits `[batch·len, V]` (or only the given flat rows).
    pub fn mlm_logits(&self, input: &InputBatch, rows: Option<&[usize]>) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let f = self.forward_graph(&mut g, &b, input)?;
        let logits = self.mlm_logits_graph(&mut g, &b, f.hidden, rows)?;
        Ok(g.value(logits).clone())
    }

    /// Unit-norm sequence embeddings `[batch, h]`.
    pub fn embed(&self, input: &InputBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let f = self.forward_graph(&mut g, &b, input)?;
        let e = self.sequence_embedding_graph(&mut g, f.hidden, input)?;
        Ok(g.value(e).clone())
    }
}

/// Composes a backbone with adapters. Adapters outside `plan` are carried
/// along inactive, so a trained stack can later be truncated with
/// [`Model::set_plan`].
pub fn attach(encoder: Encoder, plan: PlacementPlan, adapters: &AdapterStack) -> Result<Model> {
    let h = encoder.config.hidden;
    for a in adapters.language.values().chain(adapters.task.values()) {
        if a.hidden() != h {
            return Err(Error::shape("attach", format!("adapter width {} vs encoder hidden {h}", a.hidden())));
        }
    }
    if let Some(inv) = &adapters.invertible {
        if inv.steps.iter().any(|s| s.down_w.shape()[0] * 2 != h) {
            return Err(Error::shape("attach", format!("invertible adapter does not split hidden {h}")));
        }
    }
    let mut model = Model::bare(encoder);
    model.params.merge(adapters.to_params()?)?;
    model.set_plan(plan)?;
    Ok(model)
}

/// Builds fresh language adapters on every layer plus the invertible adapter
/// and activates them all.
pub fn with_language_adapters(encoder: Encoder, config: &AdapterConfig, seed: u64) -> Result<Model> {
    let stack = AdapterStack::language(encoder.config.hidden, encoder.config.num_layers, config, seed)?;
    let plan = PlacementPlan::language_prefix(encoder.config.num_layers);
    attach(encoder, plan, &stack)
}

/// Names selected by a freeze mode, without mutating the model.
pub fn trainable_parameters(model: &Model, mode: FreezeMode) -> Vec<String> {
    model.params.names().filter(|n| mode.trains(n)).map(str::to_string).collect()
}

/// True for names belonging to backbone or language-side adapters.
pub fn is_frozen_for_task(name: &str) -> bool {
    name.starts_with(BACKBONE_PREFIX)
        || name.starts_with(crate::adapters::LANGUAGE_PREFIX)
        || name.starts_with(INVERTIBLE_PREFIX)
}

pub fn is_head(name: &str) -> bool {
    name.starts_with(HEAD_PREFIX)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            hidden: 16,
            heads: 2,
            ffn: 32,
            vocab_size: 40,
            max_positions: 16,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        }
    }

    fn batch() -> InputBatch {
        InputBatch::new(2, 5, vec![0, 7, 9, 12, 2, 0, 30, 2, 1, 1], vec![1, 1, 1, 1, 1, 1, 1, 1, 0, 0]).unwrap()
    }

    #[test]
    fn output_shape() {
        let m = Model::bare(Encoder::new(tiny(), 1).unwrap());
        assert_eq!(m.hidden_states(&batch()).unwrap().shape(), &[2, 5, 16]);
    }

    #[test]
    fn too_long_rejected() {
        let m = Model::bare(Encoder::new(tiny(), 1).unwrap());
        let long = InputBatch::new(1, 17, vec![5; 17], vec![1; 17]).unwrap();
        assert!(m.hidden_states(&long).is_err());
    }

    #[test]
    fn fresh_adapters_are_identity() {
        let enc = Encoder::new(tiny(), 1).unwrap();
        let bare = Model::bare(enc.clone());
        let adapted = with_language_adapters(enc, &AdapterConfig::default(), 9).unwrap();
        let a = bare.hidden_states(&batch()).unwrap();
        let b = adapted.hidden_states(&batch()).unwrap();
        assert_eq!(a, b);
        assert_eq!(bare.mlm_logits(&batch(), None).unwrap(), adapted.mlm_logits(&batch(), None).unwrap());
    }

    #[test]
    fn empty_plan_is_bit_identical() {
        let enc = Encoder::new(tiny(), 1).unwrap();
        let bare = Model::bare(enc.clone());
        let cfg = AdapterConfig {
            init_std: 0.5,
            ..Default::default()
        };
        let stack = AdapterStack::language(16, 2, &cfg, 3).unwrap();
        let m = attach(enc, PlacementPlan::empty(), &stack).unwrap();
        assert_eq!(bare.hidden_states(&batch()).unwrap(), m.hidden_states(&batch()).unwrap());
    }

    #[test]
    fn plan_requires_attached_adapters() {
        let enc = Encoder::new(tiny(), 1).unwrap();
        assert!(attach(enc, PlacementPlan::language_prefix(1), &AdapterStack::default()).is_err());
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let m = Model::bare(Encoder::new(tiny(), 1).unwrap());
        let e = m.embed(&batch()).unwrap();
        for r in 0..2 {
            let n: f64 = e.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn freeze_modes_select_expected_names() {
        let enc = Encoder::new(tiny(), 1).unwrap();
        let mut m = with_language_adapters(enc, &AdapterConfig::default(), 2).unwrap();
        let names = m.freeze(FreezeMode::TrainLAdapter);
        assert!(!names.is_empty());
        assert!(names
            .iter()
            .all(|n| n.starts_with("adapters.language.") || n.starts_with("adapters.invertible.")));
        assert_eq!(names, trainable_parameters(&m, FreezeMode::TrainLAdapter));
    }
}
