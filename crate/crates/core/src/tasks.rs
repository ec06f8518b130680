//! Cloze evaluation, clone retrieval and pair classification, and the
//! metrics they report.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{ClozeRecord, PairRecord, RetrievalRecord};
use crate::encoder::InputBatch;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Bindings, Graph, ParameterSet, Tensor, Var};
use crate::tokenizer::{Vocabulary, EOS_ID, MASK_ID};

pub const PAIR_HEAD_WEIGHT: &str = "head.pair.w";
pub const PAIR_HEAD_BIAS: &str = "head.pair.b";
pub const DEFAULT_TEMPERATURE: f64 = 0.05;
const EVAL_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Retrieval,
    PairClassification,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieval" => Ok(TaskKind::Retrieval),
            "pair_classification" | "pair" => Ok(TaskKind::PairClassification),
            other => Err(Error::Config(format!("unknown task kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Retrieval => "retrieval",
            TaskKind::PairClassification => "pair_classification",
        })
    }
}

// ---------------------------------------------------------------- cloze

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClozeExample {
    pub id: String,
    pub tokens: Vec<u32>,
    pub mask_index: usize,
    pub candidates: Vec<u32>,
    pub answer: u32,
    pub language: String,
    pub has_nl: bool,
}

impl ClozeExample {
    pub fn from_record(r: &ClozeRecord, vocab: &Vocabulary) -> Result<Self> {
        let id_of = |t: &str| {
            vocab
                .id(t)
                .ok_or_else(|| Error::Dataset(format!("cloze `{}`: token `{t}` not in vocabulary", r.id)))
        };
        let ex = ClozeExample {
            id: r.id.clone(),
            tokens: r.tokens.iter().map(|t| id_of(t)).collect::<Result<_>>()?,
            mask_index: r.mask_index,
            candidates: r.candidates.iter().map(|t| id_of(t)).collect::<Result<_>>()?,
            answer: id_of(&r.answer)?,
            language: r.language.clone(),
            has_nl: r.has_nl,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn validate(&self) -> Result<()> {
        let masks = self.tokens.iter().filter(|&&t| t == MASK_ID).count();
        if masks != 1 || self.tokens.get(self.mask_index) != Some(&MASK_ID) {
            return Err(Error::Dataset(format!("cloze `{}` must have exactly one mask at mask_index", self.id)));
        }
        if !self.candidates.contains(&self.answer) {
            return Err(Error::Dataset(format!("cloze `{}`: answer not among candidates", self.id)));
        }
        Ok(())
    }
}

/// Anything that can score candidate tokens at a cloze mask.
pub trait ClozeScorer {
    /// Logits of each example's candidates, in candidate order.
    fn candidate_logits(&self, examples: &[ClozeExample]) -> Result<Vec<Vec<f64>>>;
}

impl ClozeScorer for Model {
    fn candidate_logits(&self, examples: &[ClozeExample]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(EVAL_BATCH) {
            let seqs: Vec<Vec<u32>> = chunk.iter().map(|e| e.tokens.clone()).collect();
            let batch = InputBatch::from_sequences(&seqs)?;
            let rows: Vec<usize> = chunk.iter().enumerate().map(|(i, e)| i * batch.len + e.mask_index).collect();
            let logits = self.mlm_logits(&batch, Some(&rows))?;
            for (i, e) in chunk.iter().enumerate() {
                let row = logits.row(i);
                out.push(e.candidates.iter().map(|&c| row[c as usize]).collect());
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClozePrediction {
    pub id: String,
    pub predicted: u32,
    pub answer: u32,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClozeReport {
    pub accuracy: f64,
    pub correct: usize,
    pub n: usize,
    pub predictions: Vec<ClozePrediction>,
}

/// Index of the largest value; the first one wins ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Accuracy of argmax-over-candidates predictions.
pub fn eval_cloze(scorer: &dyn ClozeScorer, examples: &[ClozeExample]) -> Result<ClozeReport> {
    if examples.is_empty() {
        return Err(Error::Dataset("no cloze examples to evaluate".into()));
    }
    for e in examples {
        e.validate()?;
    }
    let logits = scorer.candidate_logits(examples)?;
    let predictions: Vec<ClozePrediction> = examples
        .iter()
        .zip(&logits)
        .map(|(e, l)| {
            let predicted = e.candidates[argmax(l)];
            ClozePrediction {
                id: e.id.clone(),
                predicted,
                answer: e.answer,
                correct: predicted == e.answer,
            }
        })
        .collect();
    let correct = predictions.iter().filter(|p| p.correct).count();
    Ok(ClozeReport {
        accuracy: correct as f64 / examples.len() as f64,
        correct,
        n: examples.len(),
        predictions,
    })
}

// ------------------------------------------------------------ encoding

/// Tokenizes texts into a padded batch, truncating each to `max_len` tokens
/// (keeping the end-of-sequence marker). Returns the number truncated.
pub fn encode_texts(vocab: &Vocabulary, texts: &[&str], max_len: usize) -> Result<(InputBatch, usize)> {
    if max_len < 2 {
        return Err(Error::Config(format!("max_len {max_len} leaves no room for content")));
    }
    let mut truncated = 0;
    let seqs: Vec<Vec<u32>> = texts
        .iter()
        .map(|t| {
            let mut ids = vocab.encode(t);
            if ids.len() > max_len {
                ids.truncate(max_len - 1);
                ids.push(EOS_ID);
                truncated += 1;
            }
            ids
        })
        .collect();
    Ok((InputBatch::from_sequences(&seqs)?, truncated))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    pub truncated: usize,
}

/// One unit-norm embedding per item, in item order.
pub fn embed_corpus(model: &Model, vocab: &Vocabulary, items: &[RetrievalRecord], max_len: usize) -> Result<EmbeddingTable> {
    let texts: Vec<&str> = items.iter().map(|r| r.code.as_str()).collect();
    let (vectors, truncated) = embed_texts(model, vocab, &texts, max_len)?;
    Ok(EmbeddingTable {
        ids: items.iter().map(|r| r.id.clone()).collect(),
        vectors,
        truncated,
    })
}

pub fn embed_texts(model: &Model, vocab: &Vocabulary, texts: &[&str], max_len: usize) -> Result<(Vec<Vec<f64>>, usize)> {
    let mut vectors = Vec::with_capacity(texts.len());
    let mut truncated = 0;
    for chunk in texts.chunks(EVAL_BATCH) {
        let (batch, t) = encode_texts(vocab, chunk, max_len)?;
        truncated += t;
        let e = model.embed(&batch)?;
        vectors.extend((0..chunk.len()).map(|i| e.row(i).to_vec()));
    }
    Ok((vectors, truncated))
}

// ------------------------------------------------------------- MAP@R

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Cosine,
    NegEuclidean,
}

impl Similarity {
    pub fn score(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Similarity::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot / (na * nb)
                }
            }
            Similarity::NegEuclidean => -a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEvalResult {
    pub per_query: Vec<f64>,
    pub r: Vec<usize>,
    pub map_at_r: f64,
}

/// Mean over queries of `(1/R) Σ_{i≤R} P(i)`, where `R` is the number of
/// other items sharing the query's label and `P(i)` is precision at rank `i`
/// when the `i`-th retrieval is correct and 0 otherwise. Ties in similarity
/// go to the lower item index.
pub fn map_at_r<L: Ord + fmt::Display>(vectors: &[Vec<f64>], labels: &[L], similarity: Similarity) -> Result<RetrievalEvalResult> {
    let n = vectors.len();
    if n < 2 || labels.len() != n {
        return Err(Error::shape("map_at_r", format!("{n} vectors with {} labels", labels.len())));
    }
    let mut class_sizes: BTreeMap<&L, usize> = BTreeMap::new();
    for l in labels {
        *class_sizes.entry(l).or_default() += 1;
    }
    if let Some((l, _)) = class_sizes.iter().find(|(_, &c)| c < 2) {
        return Err(Error::SingletonClass(l.to_string()));
    }
    let mut per_query = Vec::with_capacity(n);
    let mut rs = Vec::with_capacity(n);
    let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for q in 0..n {
        let r = class_sizes[&labels[q]] - 1;
        ranked.clear();
        // `+ 0.0` folds -0.0 into 0.0 so that zero similarities tie by id
        ranked.extend((0..n).filter(|&j| j != q).map(|j| (similarity.score(&vectors[q], &vectors[j]) + 0.0, j)));
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut hits = 0usize;
        let mut total = 0.0;
        for (i, &(_, j)) in ranked.iter().take(r).enumerate() {
            if labels[j] == labels[q] {
                hits += 1;
                total += hits as f64 / (i + 1) as f64;
            }
        }
        per_query.push(total / r as f64);
        rs.push(r);
    }
    let map = per_query.iter().sum::<f64>() / n as f64;
    Ok(RetrievalEvalResult {
        per_query,
        r: rs,
        map_at_r: map,
    })
}

// ------------------------------------------------------------------ F1

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_predictions(predicted: &[bool], gold: &[bool]) -> Result<Self> {
        if predicted.len() != gold.len() {
            return Err(Error::shape("confusion", format!("{} predictions vs {} labels", predicted.len(), gold.len())));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &g) in predicted.iter().zip(gold) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a denominator was zero and the affected value defaulted to 0.
    pub degenerate: bool,
}

pub fn f1(c: &ConfusionCounts) -> F1Score {
    let mut degenerate = false;
    let mut div = |num: u64, den: u64| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = div(c.tp, c.tp + c.fp);
    let recall = div(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        degenerate = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    F1Score {
        precision,
        recall,
        f1,
        degenerate,
    }
}

// ------------------------------------------------- contrastive loss

/// For every item `a`, the other items sharing its label.
pub fn positives_by_label<L: PartialEq>(labels: &[L]) -> Vec<Vec<usize>> {
    (0..labels.len())
        .map(|a| (0..labels.len()).filter(|&j| j != a && labels[j] == labels[a]).collect())
        .collect()
}

/// In-batch negative loss over `embeddings [N, h]`: every item is an anchor,
/// same-label items are positives and all other items negatives. Cosine
/// similarity scaled by `1/temperature`. Returns the loss and the number of
/// anchors skipped for lacking a positive.
pub fn in_batch_negative_loss_graph<L: PartialEq>(
    g: &mut Graph,
    embeddings: Var,
    labels: &[L],
    temperature: f64,
) -> Result<(Var, usize)> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let n = g.shape(embeddings)[0];
    if labels.len() != n {
        return Err(Error::shape("in_batch_negative_loss", format!("{n} embeddings with {} labels", labels.len())));
    }
    let unit = g.l2_normalize(embeddings)?;
    let sim = g.matmul(unit, unit, true)?;
    let sim = g.scale(sim, 1.0 / temperature);
    let positives = positives_by_label(labels);
    let skipped = positives.iter().filter(|p| p.is_empty()).count();
    let exclude: Vec<Option<usize>> = (0..n).map(Some).collect();
    let loss = g.in_batch_nll(sim, &positives, &exclude)?;
    Ok((loss, skipped))
}

pub fn in_batch_negative_loss<L: PartialEq>(embeddings: &Tensor, labels: &[L], temperature: f64) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let e = g.constant(embeddings.clone());
    let (loss, skipped) = in_batch_negative_loss_graph(&mut g, e, labels, temperature)?;
    Ok((g.value(loss).item()?, skipped))
}

// ------------------------------------------------------- pair head

/// Zero-initialized pair head `[4h → 1]`.
pub fn pair_head(hidden: usize) -> ParameterSet {
    let mut ps = ParameterSet::new();
    ps.insert(PAIR_HEAD_WEIGHT, Tensor::zeros(vec![4 * hidden, 1]), true)
        .expect("fresh set");
    ps.insert(PAIR_HEAD_BIAS, Tensor::zeros(vec![1]), true).expect("fresh set");
    ps
}

/// `[a; b; |a−b|; a⊙b]` for `[n, h]` inputs.
pub fn pair_features_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let diff = g.sub(a, b)?;
    let diff = g.abs(diff);
    let prod = g.mul(a, b)?;
    g.concat_last(&[a, b, diff, prod])
}

/// Clone logits `[n, 1]` for embedding pairs.
pub fn pair_logits_graph(g: &mut Graph, bind: &Bindings, a: Var, b: Var) -> Result<Var> {
    let f = pair_features_graph(g, a, b)?;
    let z = g.matmul(f, bind.get(PAIR_HEAD_WEIGHT)?, false)?;
    g.add_bias(z, bind.get(PAIR_HEAD_BIAS)?)
}

/// Clone probabilities for a set of pairs.
pub fn classify_pairs(model: &Model, vocab: &Vocabulary, pairs: &[PairRecord], max_len: usize) -> Result<Vec<f64>> {
    let a: Vec<&str> = pairs.iter().map(|p| p.code_a.as_str()).collect();
    let b: Vec<&str> = pairs.iter().map(|p| p.code_b.as_str()).collect();
    let (ea, _) = embed_texts(model, vocab, &a, max_len)?;
    let (eb, _) = embed_texts(model, vocab, &b, max_len)?;
    let h = model.config.hidden;
    let flat = |v: Vec<Vec<f64>>| Tensor::new(vec![pairs.len(), h], v.concat());
    let mut g = Graph::new();
    let bind = model.params.subset(&[crate::adapters::HEAD_PREFIX]).bind(&mut g, false);
    let va = g.constant(flat(ea)?);
    let vb = g.constant(flat(eb)?);
    let z = pair_logits_graph(&mut g, &bind, va, vb)?;
    let p = g.sigmoid(z);
    Ok(g.value(p).data().to_vec())
}

pub fn classify_pair(model: &Model, vocab: &Vocabulary, pair: &PairRecord, max_len: usize) -> Result<f64> {
    Ok(classify_pairs(model, vocab, std::slice::from_ref(pair), max_len)?[0])
}

/// Confusion counts and F1 at a probability threshold.
pub fn eval_pairs(probabilities: &[f64], pairs: &[PairRecord], threshold: f64) -> Result<(ConfusionCounts, F1Score)> {
    let predicted: Vec<bool> = probabilities.iter().map(|&p| p > threshold).collect();
    let gold: Vec<bool> = pairs.iter().map(|p| p.label == 1).collect();
    let c = ConfusionCounts::from_predictions(&predicted, &gold)?;
    Ok((c, f1(&c)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case_map_at_r() {
        let v = vec![vec![0.0], vec![3.0], vec![1.0], vec![1.2]];
        let labels = ["A", "A", "B", "B"];
        let r = map_at_r(&v, &labels, Similarity::NegEuclidean).unwrap();
        assert_eq!(r.per_query, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(r.map_at_r, 0.5);
    }

    #[test]
    fn singleton_class_named() {
        let v = vec![vec![0.0], vec![1.0], vec![2.0]];
        match map_at_r(&v, &["a", "a", "lonely"], Similarity::Cosine) {
            Err(Error::SingletonClass(c)) => assert_eq!(c, "lonely"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn f1_arithmetic() {
        let s = f1(&ConfusionCounts { tp: 2, fp: 1, tn: 0, fn_: 1 });
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        let s = f1(&ConfusionCounts { tp: 0, fp: 3, tn: 1, fn_: 2 });
        assert_eq!(s.f1, 0.0);
        assert!(s.degenerate);
        let s = f1(&ConfusionCounts { tp: 4, fp: 4, tn: 9, fn_: 4 });
        assert_eq!(s.f1, s.precision);
    }

    #[test]
    fn uniform_similarities_give_log_n_minus_one() {
        let e = Tensor::full(vec![6, 4], 0.5);
        let (loss, skipped) = in_batch_negative_loss(&e, &[0, 0, 1, 1, 2, 2], 0.05).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        assert_eq!(skipped, 0);
    }

    #[test]
    fn saturated_loss_is_near_zero() {
        let e = Tensor::new(vec![4, 2], vec![1.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0, 0.0]).unwrap();
        let (loss, _) = in_batch_negative_loss(&e, &["a", "a", "b", "b"], 0.05).unwrap();
        assert!(loss < 1e-12);
        assert!(in_batch_negative_loss(&e, &["a", "b", "c", "d"], 0.05).is_err());
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[1.0, 1.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }
}
