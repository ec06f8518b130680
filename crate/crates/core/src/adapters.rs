//! Bottleneck language/task adapters, the invertible embedding adapter,
//! placement plans and freeze policies.
//!
//! A bottleneck adapter at layer `l` computes `U(ReLU(D(input))) + residual`,
//! where `D` is `h×d`, `U` is `d×h`, the input is the layer's post-norm hidden
//! state and the residual is the layer's feed-forward output. A task adapter
//! takes the language adapter's output as its input when both sit on the same
//! layer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bindings, Graph, ParameterSet, Tensor, Var};

pub const LANGUAGE_PREFIX: &str = "adapters.language.";
pub const TASK_PREFIX: &str = "adapters.task.";
pub const INVERTIBLE_PREFIX: &str = "adapters.invertible.";
pub const HEAD_PREFIX: &str = "head.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Language,
    Task,
}

impl AdapterKind {
    pub fn prefix(self) -> &'static str {
        match self {
            AdapterKind::Language => LANGUAGE_PREFIX,
            AdapterKind::Task => TASK_PREFIX,
        }
    }
}

/// Sizing of the adapters relative to the hidden size `h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// Language adapter bottleneck `d = h / language_reduction`.
    pub language_reduction: usize,
    /// Task adapter bottleneck `d = h / task_reduction`.
    pub task_reduction: usize,
    /// Invertible coupler bottleneck is `(h/2) / invertible_reduction`.
    pub invertible_reduction: usize,
    pub coupling_steps: usize,
    /// Standard deviation of down-projection weights at initialization.
    pub init_std: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            language_reduction: 2,
            task_reduction: 16,
            invertible_reduction: 2,
            coupling_steps: 2,
            init_std: 1e-3,
        }
    }
}

impl AdapterConfig {
    pub fn bottleneck(&self, kind: AdapterKind, hidden: usize) -> Result<usize> {
        let r = match kind {
            AdapterKind::Language => self.language_reduction,
            AdapterKind::Task => self.task_reduction,
        };
        if r == 0 || hidden / r == 0 {
            return Err(Error::Config(format!("reduction {r} leaves no bottleneck for hidden {hidden}")));
        }
        Ok(hidden / r)
    }

    pub fn coupler_dim(&self, hidden: usize) -> Result<usize> {
        if !hidden.is_multiple_of(2) {
            return Err(Error::Config(format!("invertible adapter needs an even hidden size, got {hidden}")));
        }
        let r = self.invertible_reduction;
        if r == 0 || (hidden / 2) / r == 0 {
            return Err(Error::Config(format!("invertible reduction {r} too large for hidden {hidden}")));
        }
        Ok((hidden / 2) / r)
    }
}

/// Which layers carry which adapters. Layers are numbered from 1.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub language: BTreeSet<usize>,
    pub task: BTreeSet<usize>,
    pub invertible: bool,
}

impl PlacementPlan {
    pub fn empty() -> Self {
        PlacementPlan::default()
    }

    /// Language adapters on layers `1..=upto` plus the invertible adapter
    /// (unless `upto` is zero, which is the bare backbone).
    pub fn language_prefix(upto: usize) -> Self {
        PlacementPlan {
            language: (1..=upto).collect(),
            task: BTreeSet::new(),
            invertible: upto > 0,
        }
    }

    pub fn with_task_layers(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.task = layers.into_iter().collect();
        self
    }

    pub fn is_empty(&self) -> bool {
        self.language.is_empty() && self.task.is_empty() && !self.invertible
    }

    pub fn has(&self, kind: AdapterKind, layer: usize) -> bool {
        match kind {
            AdapterKind::Language => self.language.contains(&layer),
            AdapterKind::Task => self.task.contains(&layer),
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        for &l in self.language.iter().chain(&self.task) {
            if l == 0 || l > num_layers {
                return Err(Error::Config(format!("layer {l} outside [1, {num_layers}]")));
            }
        }
        Ok(())
    }
}

/// Which parameters an optimizer may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    PretrainBackbone,
    TrainLAdapter,
    TrainTAdapter,
    FinetuneAll,
}

impl FreezeMode {
    pub fn trains(self, name: &str) -> bool {
        match self {
            FreezeMode::PretrainBackbone => name.starts_with(crate::encoder::BACKBONE_PREFIX),
            FreezeMode::TrainLAdapter => name.starts_with(LANGUAGE_PREFIX) || name.starts_with(INVERTIBLE_PREFIX),
            FreezeMode::TrainTAdapter => name.starts_with(TASK_PREFIX) || name.starts_with(HEAD_PREFIX),
            FreezeMode::FinetuneAll => true,
        }
    }
}

impl FromStr for FreezeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain_backbone" => Ok(FreezeMode::PretrainBackbone),
            "train_l_adapter" => Ok(FreezeMode::TrainLAdapter),
            "train_t_adapter" => Ok(FreezeMode::TrainTAdapter),
            "finetune_all" => Ok(FreezeMode::FinetuneAll),
            other => Err(Error::Config(format!("unknown freeze mode `{other}`"))),
        }
    }
}

impl fmt::Display for FreezeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FreezeMode::PretrainBackbone => "pretrain_backbone",
            FreezeMode::TrainLAdapter => "train_l_adapter",
            FreezeMode::TrainTAdapter => "train_t_adapter",
            FreezeMode::FinetuneAll => "finetune_all",
        };
        f.write_str(s)
    }
}

/// Down/up projection pair of one adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct Projections {
    pub down_w: Tensor,
    pub down_b: Tensor,
    pub up_w: Tensor,
    pub up_b: Tensor,
}

impl Projections {
    /// Up-projection zero, down-projection `N(0, std²)`: the adapter starts as
    /// an exact residual pass-through.
    fn init(width: usize, bottleneck: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Projections {
            down_w: Tensor::randn(vec![width, bottleneck], std, rng),
            down_b: Tensor::zeros(vec![bottleneck]),
            up_w: Tensor::zeros(vec![bottleneck, width]),
            up_b: Tensor::zeros(vec![width]),
        }
    }

    fn insert_into(&self, prefix: &str, ps: &mut ParameterSet) -> Result<()> {
        ps.insert(format!("{prefix}down.w"), self.down_w.clone(), true)?;
        ps.insert(format!("{prefix}down.b"), self.down_b.clone(), true)?;
        ps.insert(format!("{prefix}up.w"), self.up_w.clone(), true)?;
        ps.insert(format!("{prefix}up.b"), self.up_b.clone(), true)
    }

    fn from_params(prefix: &str, ps: &ParameterSet) -> Result<Self> {
        let p = Projections {
            down_w: ps.get(&format!("{prefix}down.w"))?.clone(),
            down_b: ps.get(&format!("{prefix}down.b"))?.clone(),
            up_w: ps.get(&format!("{prefix}up.w"))?.clone(),
            up_b: ps.get(&format!("{prefix}up.b"))?.clone(),
        };
        let (w, d) = (p.down_w.shape()[0], p.down_w.last_dim());
        if p.down_b.shape() != [d] || p.up_w.shape() != [d, w] || p.up_b.shape() != [w] {
            return Err(Error::shape("adapter", format!("inconsistent projection shapes under `{prefix}`")));
        }
        Ok(p)
    }

    fn count(&self) -> u64 {
        (self.down_w.numel() + self.down_b.numel() + self.up_w.numel() + self.up_b.numel()) as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckAdapter {
    pub layer: usize,
    pub kind: AdapterKind,
    pub proj: Projections,
}

impl BottleneckAdapter {
    pub fn new(layer: usize, kind: AdapterKind, hidden: usize, bottleneck: usize, init_std: f64, seed: u64) -> Result<Self> {
        if bottleneck == 0 {
            return Err(Error::Config("adapter bottleneck must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(BottleneckAdapter {
            layer,
            kind,
            proj: Projections::init(hidden, bottleneck, init_std, &mut rng),
        })
    }

    pub fn prefix(kind: AdapterKind, layer: usize) -> String {
        format!("{}layer{layer}.", kind.prefix())
    }

    pub fn hidden(&self) -> usize {
        self.proj.down_w.shape()[0]
    }

    pub fn bottleneck(&self) -> usize {
        self.proj.down_w.last_dim()
    }

    /// `2·h·d + d + h`.
    pub fn param_count(&self) -> u64 {
        self.proj.count()
    }

    pub fn insert_into(&self, ps: &mut ParameterSet) -> Result<()> {
        self.proj.insert_into(&Self::prefix(self.kind, self.layer), ps)
    }

    pub fn from_params(kind: AdapterKind, layer: usize, ps: &ParameterSet) -> Result<Self> {
        Ok(BottleneckAdapter {
            layer,
            kind,
            proj: Projections::from_params(&Self::prefix(kind, layer), ps)?,
        })
    }

    /// Eager `U(ReLU(D(input))) + residual` over `[.., h]` tensors.
    pub fn forward(&self, input: &Tensor, residual: &Tensor) -> Result<Tensor> {
        let mut ps = ParameterSet::new();
        self.insert_into(&mut ps)?;
        let mut g = Graph::new();
        let b = ps.bind(&mut g, false);
        let x = g.constant(input.clone());
        let r = g.constant(residual.clone());
        let out = bottleneck_graph(&mut g, &b, &Self::prefix(self.kind, self.layer), x, r)?;
        Ok(g.value(out).clone())
    }
}

/// `U(ReLU(D(input))) + residual` on the graph, weights looked up under `prefix`.
pub fn bottleneck_graph(g: &mut Graph, b: &Bindings, prefix: &str, input: Var, residual: Var) -> Result<Var> {
    if g.shape(input) != g.shape(residual) {
        return Err(Error::shape(
            "adapter",
            format!("input {:?} vs residual {:?}", g.shape(input), g.shape(residual)),
        ));
    }
    let delta = coupler_graph(g, b, prefix, input)?;
    g.add(delta, residual)
}

/// `U(ReLU(D(x)))`.
fn coupler_graph(g: &mut Graph, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let down = g.matmul(x, b.get(&format!("{prefix}down.w"))?, false)?;
    let down = g.add_bias(down, b.get(&format!("{prefix}down.b"))?)?;
    let act = g.relu(down);
    let up = g.matmul(act, b.get(&format!("{prefix}up.w"))?, false)?;
    g.add_bias(up, b.get(&format!("{prefix}up.b"))?)
}

/// Language adapter: `U(ReLU(D(h_l))) + r_l`.
pub fn language_adapter_forward(adapter: &BottleneckAdapter, hidden: &Tensor, residual: &Tensor) -> Result<Tensor> {
    adapter.forward(hidden, residual)
}

/// Task adapter stacked on the language adapter output (or on `h_l` when the
/// layer has no language adapter): `U(ReLU(D(la_out))) + r_l`.
pub fn task_adapter_forward(adapter: &BottleneckAdapter, la_out: &Tensor, residual: &Tensor) -> Result<Tensor> {
    adapter.forward(la_out, residual)
}

/// Additive coupling over the two halves of the embedding dimension. Odd
/// steps update the first half from the second, even steps the reverse, so
/// each step is inverted by subtracting the same coupler output.
#[derive(Clone, Debug, PartialEq)]
pub struct InvertibleAdapter {
    pub steps: Vec<Projections>,
}

impl InvertibleAdapter {
    pub fn new(hidden: usize, config: &AdapterConfig, seed: u64) -> Result<Self> {
        let d = config.coupler_dim(hidden)?;
        if config.coupling_steps == 0 {
            return Err(Error::Config("invertible adapter needs at least one coupling step".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(InvertibleAdapter {
            steps: (0..config.coupling_steps)
                .map(|_| Projections::init(hidden / 2, d, config.init_std, &mut rng))
                .collect(),
        })
    }

    pub fn step_prefix(step: usize) -> String {
        format!("{INVERTIBLE_PREFIX}step{step}.")
    }

    pub fn param_count(&self) -> u64 {
        self.steps.iter().map(Projections::count).sum()
    }

    pub fn insert_into(&self, ps: &mut ParameterSet) -> Result<()> {
        for (i, s) in self.steps.iter().enumerate() {
            s.insert_into(&Self::step_prefix(i + 1), ps)?;
        }
        Ok(())
    }

    pub fn from_params(ps: &ParameterSet) -> Result<Option<Self>> {
        let mut steps = Vec::new();
        while ps.contains(&format!("{}down.w", Self::step_prefix(steps.len() + 1))) {
            steps.push(Projections::from_params(&Self::step_prefix(steps.len() + 1), ps)?);
        }
        Ok((!steps.is_empty()).then_some(InvertibleAdapter { steps }))
    }

    fn eager(&self, x: &Tensor, inverse: bool) -> Result<Tensor> {
        let mut ps = ParameterSet::new();
        self.insert_into(&mut ps)?;
        let mut g = Graph::new();
        let b = ps.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = if inverse {
            invertible_inverse_graph(&mut g, &b, self.steps.len(), xv)?
        } else {
            invertible_forward_graph(&mut g, &b, self.steps.len(), xv)?
        };
        Ok(g.value(out).clone())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.eager(x, false)
    }

    pub fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        self.eager(y, true)
    }
}

fn halves(g: &mut Graph, x: Var) -> Result<(Var, Var, usize)> {
    let w = g.value(x).last_dim();
    if !w.is_multiple_of(2) {
        return Err(Error::Config(format!("invertible adapter needs an even width, got {w}")));
    }
    let half = w / 2;
    Ok((g.slice_last(x, 0, half)?, g.slice_last(x, half, half)?, half))
}

pub fn invertible_forward_graph(g: &mut Graph, b: &Bindings, steps: usize, x: Var) -> Result<Var> {
    let (mut x1, mut x2, _) = halves(g, x)?;
    for k in 1..=steps {
        let prefix = InvertibleAdapter::step_prefix(k);
        if k % 2 == 1 {
            let c = coupler_graph(g, b, &prefix, x2)?;
            x1 = g.add(x1, c)?;
        } else {
            let c = coupler_graph(g, b, &prefix, x1)?;
            x2 = g.add(x2, c)?;
        }
    }
    g.concat_last(&[x1, x2])
}

pub fn invertible_inverse_graph(g: &mut Graph, b: &Bindings, steps: usize, y: Var) -> Result<Var> {
    let (mut y1, mut y2, _) = halves(g, y)?;
    for k in (1..=steps).rev() {
        let prefix = InvertibleAdapter::step_prefix(k);
        if k % 2 == 1 {
            let c = coupler_graph(g, b, &prefix, y2)?;
            y1 = g.sub(y1, c)?;
        } else {
            let c = coupler_graph(g, b, &prefix, y1)?;
            y2 = g.sub(y2, c)?;
        }
    }
    g.concat_last(&[y1, y2])
}

/// Language adapters, task adapters and the invertible adapter of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterStack {
    pub language: BTreeMap<usize, BottleneckAdapter>,
    pub task: BTreeMap<usize, BottleneckAdapter>,
    pub invertible: Option<InvertibleAdapter>,
}

impl AdapterStack {
    /// Language adapters on every layer plus an invertible adapter.
    pub fn language(hidden: usize, num_layers: usize, config: &AdapterConfig, seed: u64) -> Result<Self> {
        let d = config.bottleneck(AdapterKind::Language, hidden)?;
        let language = (1..=num_layers)
            .map(|l| {
                BottleneckAdapter::new(l, AdapterKind::Language, hidden, d, config.init_std, seed.wrapping_add(l as u64))
                    .map(|a| (l, a))
            })
            .collect::<Result<_>>()?;
        Ok(AdapterStack {
            language,
            task: BTreeMap::new(),
            invertible: Some(InvertibleAdapter::new(hidden, config, seed.wrapping_add(1000))?),
        })
    }

    /// Task adapters on every layer.
    pub fn task(hidden: usize, num_layers: usize, config: &AdapterConfig, seed: u64) -> Result<Self> {
        let d = config.bottleneck(AdapterKind::Task, hidden)?;
        let task = (1..=num_layers)
            .map(|l| {
                BottleneckAdapter::new(l, AdapterKind::Task, hidden, d, config.init_std, seed.wrapping_add(l as u64))
                    .map(|a| (l, a))
            })
            .collect::<Result<_>>()?;
        Ok(AdapterStack {
            language: BTreeMap::new(),
            task,
            invertible: None,
        })
    }

    pub fn merge(mut self, other: AdapterStack) -> Self {
        self.language.extend(other.language);
        self.task.extend(other.task);
        if other.invertible.is_some() {
            self.invertible = other.invertible;
        }
        self
    }

    pub fn param_count(&self) -> u64 {
        self.language.values().chain(self.task.values()).map(BottleneckAdapter::param_count).sum::<u64>()
            + self.invertible.as_ref().map_or(0, InvertibleAdapter::param_count)
    }

    pub fn to_params(&self) -> Result<ParameterSet> {
        let mut ps = ParameterSet::new();
        for a in self.language.values().chain(self.task.values()) {
            a.insert_into(&mut ps)?;
        }
        if let Some(inv) = &self.invertible {
            inv.insert_into(&mut ps)?;
        }
        Ok(ps)
    }

    /// Recovers adapters from a parameter set by name.
    pub fn from_params(ps: &ParameterSet, num_layers: usize) -> Result<Self> {
        let mut stack = AdapterStack::default();
        for l in 1..=num_layers {
            for kind in [AdapterKind::Language, AdapterKind::Task] {
                if ps.contains(&format!("{}down.w", BottleneckAdapter::prefix(kind, l))) {
                    let a = BottleneckAdapter::from_params(kind, l, ps)?;
                    match kind {
                        AdapterKind::Language => stack.language.insert(l, a),
                        AdapterKind::Task => stack.task.insert(l, a),
                    };
                }
            }
        }
        stack.invertible = InvertibleAdapter::from_params(ps)?;
        Ok(stack)
    }
}
