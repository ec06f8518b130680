//! MLM pretraining, language-adapter and task-adapter training with Adam and
//! early stopping.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, AdapterStack, FreezeMode, PlacementPlan};
use crate::corpus::{PairRecord, RetrievalRecord};
use crate::encoder::{Encoder, InputBatch};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{GradMap, Graph, ParameterSet, Tensor};
use crate::tasks::{
    classify_pairs, embed_corpus, encode_texts, eval_pairs, in_batch_negative_loss_graph, map_at_r, pair_head,
    pair_logits_graph, Similarity, TaskKind,
};
use crate::tokenizer::{apply_mlm_mask, MaskingConfig, Vocabulary, BOS_ID, EOS_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Linear warm-up length; 0 keeps the rate constant.
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Steps between validation evaluations.
    pub eval_every: usize,
    pub seed: u64,
    /// Token length of packed MLM windows and of truncated task inputs.
    pub seq_len: usize,
    pub masking: MaskingConfig,
    /// Softmax temperature of the in-batch contrastive loss.
    pub temperature: f64,
    /// Number of held-out MLM batches used for validation loss.
    pub val_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            warmup_steps: 0,
            batch_size: 16,
            max_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: 3,
            eval_every: 100,
            seed: 0,
            seq_len: 64,
            masking: MaskingConfig::default(),
            temperature: crate::tasks::DEFAULT_TEMPERATURE,
            val_batches: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.learning_rate > 0.0, "learning_rate must be positive"),
            (self.patience >= 1, "patience must be at least 1"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.eval_every >= 1, "eval_every must be at least 1"),
            (self.seq_len >= 4, "seq_len must be at least 4"),
            ((0.0..1.0).contains(&self.beta1), "beta1 must lie in [0, 1)"),
            ((0.0..1.0).contains(&self.beta2), "beta2 must lie in [0, 1)"),
            (self.epsilon > 0.0, "epsilon must be positive"),
            (self.temperature > 0.0, "temperature must be positive"),
            (self.val_batches >= 1, "val_batches must be at least 1"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config(msg.to_string())),
            None => self.masking.validate(),
        }
    }
}

impl TrainConfig {
    /// Multiplier on the learning rate at optimizer step `step` (1-based).
    pub fn warmup_factor(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Gradients for frozen parameters are a contract violation.
pub fn adam_step(params: &mut ParameterSet, grads: &GradMap, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let lr = cfg.learning_rate * cfg.warmup_factor(state.step);
    for (name, g) in grads {
        let p = params
            .parameter(name)
            .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        if !p.trainable {
            return Err(Error::Contract(format!("gradient supplied for frozen parameter `{name}`")));
        }
        if p.tensor.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("`{name}` is {:?}, gradient {:?}", p.tensor.shape(), g.shape()),
            ));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let w = params.get_mut(name)?;
        for (((wi, mi), vi), gi) in w
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            *wi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    EarlyStop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub step: usize,
    pub val_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: FreezeMode,
    /// `mlm_loss` (lower is better), `map_at_r` or `f1` (higher is better).
    pub metric: String,
    pub steps: usize,
    pub loss: Vec<StepLoss>,
    /// Validation metric curve; the first point is measured before training.
    pub val_metric: Vec<ValPoint>,
    pub best_step: usize,
    pub best_val_metric: f64,
    pub stopping_reason: StopReason,
    pub seconds: f64,
    pub trainable_parameters: u64,
}

impl TrainReport {
    pub fn initial_val_metric(&self) -> Option<f64> {
        self.val_metric.first().map(|p| p.val_metric)
    }
}

/// Tokenizes texts and cuts them into windows of at most `seq_len` tokens,
/// each wrapped in `<s> … </s>`.
pub fn pack_sequences(vocab: &Vocabulary, texts: &[&str], seq_len: usize) -> Vec<Vec<u32>> {
    let body = seq_len.saturating_sub(2).max(1);
    let mut out = Vec::new();
    for t in texts {
        let ids = vocab.encode_raw(t);
        for chunk in ids.chunks(body) {
            let mut s = Vec::with_capacity(chunk.len() + 2);
            s.push(BOS_ID);
            s.extend_from_slice(chunk);
            s.push(EOS_ID);
            out.push(s);
        }
    }
    out
}

/// Masked batch of the given sequences with a seeded corruption pattern.
fn masked_batch(seqs: &[Vec<u32>], vocab_size: usize, cfg: &TrainConfig, seed: u64) -> Result<(InputBatch, Vec<usize>, Vec<Option<usize>>)> {
    let mb = apply_mlm_mask(seqs, vocab_size, &cfg.masking, seed)?;
    let rows: Vec<usize> = mb.labels.iter().enumerate().filter(|(_, l)| l.is_some()).map(|(i, _)| i).collect();
    let targets: Vec<Option<usize>> = rows.iter().map(|&i| mb.labels[i].map(|t| t as usize)).collect();
    Ok((InputBatch::from(&mb), rows, targets))
}

/// Mean MLM loss over masked positions of one batch. Returns `None` when no
/// position was selected for masking.
fn mlm_loss(model: &Model, g: &mut Graph, seqs: &[Vec<u32>], cfg: &TrainConfig, seed: u64, track: bool) -> Result<Option<(crate::numerics::Var, f64)>> {
    let (batch, rows, targets) = masked_batch(seqs, model.config.vocab_size, cfg, seed)?;
    if rows.is_empty() {
        return Ok(None);
    }
    let b = model.params.bind(g, track);
    let f = model.forward_graph(g, &b, &batch)?;
    let logits = model.mlm_logits_graph(g, &b, f.hidden, Some(&rows))?;
    let loss = g.cross_entropy(logits, &targets)?;
    let v = g.value(loss).item()?;
    Ok(Some((loss, v)))
}

/// Fixed validation batches: the first `val_batches` batches of the
/// validation sequences, each masked with its own fixed seed.
pub fn mlm_validation_loss(model: &Model, val: &[Vec<u32>], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, chunk) in val.chunks(cfg.batch_size).take(cfg.val_batches).enumerate() {
        let mut g = Graph::new();
        if let Some((_, v)) = mlm_loss(model, &mut g, chunk, cfg, cfg.seed ^ 0x5eed_0000 ^ i as u64, false)? {
            total += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Dataset("validation set produced no masked positions".into()));
    }
    Ok(total / n as f64)
}

/// Shared loop: `step_loss` builds the loss of one step on a training-mode
/// graph, `validate` returns the validation metric.
struct Loop<'a> {
    cfg: &'a TrainConfig,
    mode: FreezeMode,
    metric: &'static str,
    higher_is_better: bool,
}

impl Loop<'_> {
    fn run(
        &self,
        model: &mut Model,
        mut step_loss: impl FnMut(&Model, &mut Graph, usize) -> Result<Option<crate::numerics::Var>>,
        validate: impl Fn(&Model) -> Result<f64>,
    ) -> Result<TrainReport> {
        let start = Instant::now();
        let cfg = self.cfg;
        model.freeze(self.mode);
        let trainable_parameters = model.params.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.tensor.numel() as u64).sum();
        let better = |a: f64, b: f64| if self.higher_is_better { a > b } else { a < b };
        let mut state = AdamState::default();
        let mut report = TrainReport {
            mode: self.mode,
            metric: self.metric.to_string(),
            steps: 0,
            loss: Vec::new(),
            val_metric: Vec::new(),
            best_step: 0,
            best_val_metric: 0.0,
            stopping_reason: StopReason::MaxSteps,
            seconds: 0.0,
            trainable_parameters,
        };
        let initial = validate(model)?;
        report.val_metric.push(ValPoint { step: 0, val_metric: initial });
        report.best_val_metric = initial;
        let mut best = model.params.clone();
        let mut stale = 0;
        for step in 1..=cfg.max_steps {
            let mut g = Graph::training(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(step as u64));
            let Some(loss) = step_loss(model, &mut g, step)? else {
                continue;
            };
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::TrainingAborted {
                    step,
                    reason: format!("non-finite loss {value}"),
                });
            }
            let grads = g
                .backward(loss)
                .map_err(|e| Error::TrainingAborted { step, reason: e.to_string() })?
                .named();
            if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
                return Err(Error::TrainingAborted {
                    step,
                    reason: format!("non-finite gradient for `{name}`"),
                });
            }
            adam_step(&mut model.params, &grads, &mut state, cfg)?;
            report.loss.push(StepLoss { step, loss: value });
            report.steps = step;
            if step % cfg.eval_every == 0 || step == cfg.max_steps {
                let v = validate(model)?;
                report.val_metric.push(ValPoint { step, val_metric: v });
                log::info!("{} step {step}: loss {value:.4}, {} {v:.4}", self.mode, self.metric);
                if better(v, report.best_val_metric) {
                    report.best_val_metric = v;
                    report.best_step = step;
                    best = model.params.clone();
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.patience {
                        report.stopping_reason = StopReason::EarlyStop;
                        break;
                    }
                }
            }
        }
        // Keep the best validated weights; frozen tensors are identical in both.
        for name in model.params.trainable_names() {
            *model.params.get_mut(&name)? = best.get(&name)?.clone();
        }
        report.seconds = start.elapsed().as_secs_f64();
        Ok(report)
    }
}

fn mlm_loop(model: &mut Model, mode: FreezeMode, train: &[Vec<u32>], val: &[Vec<u32>], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset("MLM training needs non-empty train and validation sequences".into()));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let lp = Loop {
        cfg,
        mode,
        metric: "mlm_loss",
        higher_is_better: false,
    };
    lp.run(
        model,
        |m, g, step| {
            let k = (step - 1) % per_epoch;
            if k == 0 {
                order.shuffle(&mut rng);
            }
            let idx = &order[k * cfg.batch_size..((k + 1) * cfg.batch_size).min(order.len())];
            let seqs: Vec<Vec<u32>> = idx.iter().map(|&i| train[i].clone()).collect();
            let mask_seed = rng.random::<u64>();
            Ok(mlm_loss(m, g, &seqs, cfg, mask_seed, true)?.map(|(l, _)| l))
        },
        |m| mlm_validation_loss(m, val, cfg),
    )
}

/// Trains every backbone parameter with masked language modelling.
pub fn pretrain_mlm(encoder: Encoder, train: &[Vec<u32>], val: &[Vec<u32>], cfg: &TrainConfig) -> Result<(Encoder, TrainReport)> {
    let mut model = Model::bare(encoder);
    let report = mlm_loop(&mut model, FreezeMode::PretrainBackbone, train, val, cfg)?;
    Ok((model.encoder()?, report))
}

/// Attaches fresh language adapters (every layer, plus the invertible
/// adapter) to a frozen backbone and trains them with MLM.
pub fn train_language_adapter(
    encoder: Encoder,
    adapter_cfg: &AdapterConfig,
    train: &[Vec<u32>],
    val: &[Vec<u32>],
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    let mut model = crate::model::with_language_adapters(encoder, adapter_cfg, cfg.seed ^ 0x1a)?;
    let report = mlm_loop(&mut model, FreezeMode::TrainLAdapter, train, val, cfg)?;
    Ok((model, report))
}

/// Continues MLM training of whatever the freeze mode selects on an already
/// composed model.
pub fn train_mlm_model(model: &mut Model, mode: FreezeMode, train: &[Vec<u32>], val: &[Vec<u32>], cfg: &TrainConfig) -> Result<TrainReport> {
    mlm_loop(model, mode, train, val, cfg)
}

#[derive(Clone, Debug)]
pub enum TaskData {
    Retrieval {
        train: Vec<RetrievalRecord>,
        val: Vec<RetrievalRecord>,
    },
    Pair {
        train: Vec<PairRecord>,
        val: Vec<PairRecord>,
    },
}

impl TaskData {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskData::Retrieval { .. } => TaskKind::Retrieval,
            TaskData::Pair { .. } => TaskKind::PairClassification,
        }
    }
}

/// Attaches task adapters to `layers` (every layer when `None`) of a model
/// that already carries its language adapters, then trains only the task
/// adapters and, for pair classification, the pair head.
pub fn train_task_adapter(
    mut model: Model,
    vocab: &Vocabulary,
    data: &TaskData,
    adapter_cfg: &AdapterConfig,
    layers: Option<&[usize]>,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let (n_train, n_val) = match data {
        TaskData::Retrieval { train, val } => (train.len(), val.len()),
        TaskData::Pair { train, val } => (train.len(), val.len()),
    };
    if n_val == 0 {
        return Err(Error::Dataset("task training requires a validation split".into()));
    }
    if n_train == 0 {
        return Err(Error::Dataset("empty task training split".into()));
    }
    let (h, num_layers) = (model.config.hidden, model.config.num_layers);
    let all: Vec<usize> = (1..=num_layers).collect();
    let layers = layers.unwrap_or(&all);
    let mut stack = AdapterStack::task(h, num_layers, adapter_cfg, cfg.seed ^ 0x7a)?;
    stack.task.retain(|l, _| layers.contains(l));
    model.add_parameters(stack.to_params()?)?;
    if data.kind() == TaskKind::PairClassification {
        model.add_parameters(pair_head(h))?;
    }
    let plan = PlacementPlan {
        task: layers.iter().copied().collect(),
        ..model.plan.clone()
    };
    model.set_plan(plan)?;

    let max_len = cfg.seq_len.min(model.config.max_positions);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let report = match data {
        TaskData::Retrieval { train, val } => {
            let by_class = group_by_label(train);
            if by_class.iter().all(|(_, m)| m.len() < 2) {
                return Err(Error::Dataset("no training class has two members".into()));
            }
            let lp = Loop {
                cfg,
                mode: FreezeMode::TrainTAdapter,
                metric: "map_at_r",
                higher_is_better: true,
            };
            lp.run(
                &mut model,
                |m, g, _| {
                    let picked = balanced_batch(&by_class, cfg.batch_size, &mut rng);
                    let texts: Vec<&str> = picked.iter().map(|&i| train[i].code.as_str()).collect();
                    let labels: Vec<&str> = picked.iter().map(|&i| train[i].label.as_str()).collect();
                    let (batch, _) = encode_texts(vocab, &texts, max_len)?;
                    let b = m.params.bind(g, true);
                    let f = m.forward_graph(g, &b, &batch)?;
                    let pooled = g.masked_mean(f.hidden, &batch.mask.iter().map(|&x| f64::from(x)).collect::<Vec<_>>())?;
                    let (loss, _) = in_batch_negative_loss_graph(g, pooled, &labels, cfg.temperature)?;
                    Ok(Some(loss))
                },
                |m| {
                    let table = embed_corpus(m, vocab, val, max_len)?;
                    let labels: Vec<&str> = val.iter().map(|r| r.label.as_str()).collect();
                    Ok(map_at_r(&table.vectors, &labels, Similarity::Cosine)?.map_at_r)
                },
            )?
        }
        TaskData::Pair { train, val } => {
            let mut order: Vec<usize> = (0..train.len()).collect();
            let per_epoch = train.len().div_ceil(cfg.batch_size);
            let lp = Loop {
                cfg,
                mode: FreezeMode::TrainTAdapter,
                metric: "f1",
                higher_is_better: true,
            };
            lp.run(
                &mut model,
                |m, g, step| {
                    let k = (step - 1) % per_epoch;
                    if k == 0 {
                        order.shuffle(&mut rng);
                    }
                    let idx = &order[k * cfg.batch_size..((k + 1) * cfg.batch_size).min(order.len())];
                    let a: Vec<&str> = idx.iter().map(|&i| train[i].code_a.as_str()).collect();
                    let bt: Vec<&str> = idx.iter().map(|&i| train[i].code_b.as_str()).collect();
                    let targets: Vec<f64> = idx.iter().map(|&i| f64::from(train[i].label)).collect();
                    let b = m.params.bind(g, true);
                    let ea = embed_graph(m, g, &b, vocab, &a, max_len)?;
                    let eb = embed_graph(m, g, &b, vocab, &bt, max_len)?;
                    let z = pair_logits_graph(g, &b, ea, eb)?;
                    let z = g.reshape(z, &[idx.len()])?;
                    Ok(Some(g.bce_with_logits(z, &targets)?))
                },
                |m| {
                    let p = classify_pairs(m, vocab, val, max_len)?;
                    Ok(eval_pairs(&p, val, 0.5)?.1.f1)
                },
            )?
        }
    };
    Ok((model, report))
}

fn embed_graph(
    m: &Model,
    g: &mut Graph,
    b: &crate::numerics::Bindings,
    vocab: &Vocabulary,
    texts: &[&str],
    max_len: usize,
) -> Result<crate::numerics::Var> {
    let (batch, _) = encode_texts(vocab, texts, max_len)?;
    let f = m.forward_graph(g, b, &batch)?;
    m.sequence_embedding_graph(g, f.hidden, &batch)
}

fn group_by_label(records: &[RetrievalRecord]) -> Vec<(String, Vec<usize>)> {
    let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        map.entry(&r.label).or_default().push(i);
    }
    map.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// `batch_size / 2` classes with two members each (at least two classes).
fn balanced_batch(by_class: &[(String, Vec<usize>)], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let eligible: Vec<&Vec<usize>> = by_class.iter().map(|(_, m)| m).filter(|m| m.len() >= 2).collect();
    let k = (batch_size / 2).max(2).min(eligible.len());
    let mut out = Vec::with_capacity(2 * k);
    for members in eligible.choose_multiple(rng, k) {
        out.extend(members.choose_multiple(rng, 2).copied());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::full(vec![3], 2.0), true).unwrap();
        let grads: GradMap = [("w".to_string(), Tensor::zeros(vec![3]))].into_iter().collect();
        adam_step(&mut ps, &grads, &mut AdamState::default(), &TrainConfig::default()).unwrap();
        assert_eq!(ps.get("w").unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::full(vec![2], 1.0), true).unwrap();
        let grads: GradMap = [("w".to_string(), Tensor::new(vec![2], vec![0.3, -5.0]).unwrap())].into_iter().collect();
        let cfg = TrainConfig::default();
        adam_step(&mut ps, &grads, &mut AdamState::default(), &cfg).unwrap();
        let w = ps.get("w").unwrap().data();
        assert!((w[0] - (1.0 - cfg.learning_rate)).abs() < 1e-9);
        assert!((w[1] - (1.0 + cfg.learning_rate)).abs() < 1e-9);
    }

    #[test]
    fn frozen_gradient_rejected() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::full(vec![1], 1.0), false).unwrap();
        let grads: GradMap = [("w".to_string(), Tensor::full(vec![1], 1.0))].into_iter().collect();
        assert!(adam_step(&mut ps, &grads, &mut AdamState::default(), &TrainConfig::default()).is_err());
    }

    #[test]
    fn packing_wraps_windows() {
        let vocab = crate::tokenizer::train_bpe(["abc abc abc"], 120).unwrap();
        let seqs = pack_sequences(&vocab, &["abc abc abc abc abc"], 4);
        assert!(seqs.iter().all(|s| s.len() <= 4 && s[0] == BOS_ID && *s.last().unwrap() == EOS_ID));
    }
}
