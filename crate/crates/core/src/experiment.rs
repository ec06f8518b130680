//! Multi-model runs: the placement sweep and zero-shot comparisons.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, AdapterStack, FreezeMode, PlacementPlan};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::model::{attach, Model};
use crate::training::{train_mlm_model, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Language adapters active on layers `1..=layers`; 0 is the bare backbone.
    pub layers: usize,
    pub metric: f64,
}

/// Parses `a..b` (inclusive) or a single layer count.
pub fn parse_layer_range(text: &str) -> Result<RangeInclusive<usize>> {
    let bad = || Error::Config(format!("layer range `{text}` is not `a..b` or a number"));
    match text.split_once("..") {
        Some((a, b)) => {
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            Ok(a..=b)
        }
        None => {
            let n: usize = text.trim().parse().map_err(|_| bad())?;
            Ok(n..=n)
        }
    }
}

fn check_range(range: &RangeInclusive<usize>, num_layers: usize) -> Result<()> {
    if *range.end() > num_layers {
        return Err(Error::Config(format!(
            "placement {} is outside 0..={num_layers}",
            range.end()
        )));
    }
    Ok(())
}

/// Runs `f` over `items`, sequentially or on scoped threads, keeping order.
fn map_ordered<T: Sync, R: Send>(items: &[T], parallel: bool, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if !parallel {
        return items.iter().map(&f).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = items.iter().map(|it| s.spawn(|| f(it))).collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| Error::Contract("sweep worker panicked".into()))?)
            .collect()
    })
}

/// Evaluates a model trained with language adapters on every layer under
/// each truncated placement `{1..i}`. Adapters above `i` (and the invertible
/// adapter when `i = 0`) are switched off, not retrained.
pub fn sweep_layers<F>(model: &Model, range: RangeInclusive<usize>, parallel: bool, eval: F) -> Result<Vec<SweepRow>>
where
    F: Fn(&Model) -> Result<f64> + Sync,
{
    let num_layers = model.config.num_layers;
    check_range(&range, num_layers)?;
    let stack = model.adapters()?;
    if stack.language.len() != num_layers || stack.invertible.is_none() {
        return Err(Error::Config(
            "sweep needs language adapters trained on every layer plus the invertible adapter".into(),
        ));
    }
    let layers: Vec<usize> = range.collect();
    map_ordered(&layers, parallel, |&i| {
        let mut m = model.clone();
        m.set_plan(PlacementPlan::language_prefix(i))?;
        Ok(SweepRow { layers: i, metric: eval(&m)? })
    })
}

/// The alternative reading of the sweep: a fresh language-adapter stack is
/// trained for every placement `{1..i}`. `i = 0` is the untouched backbone.
#[allow(clippy::too_many_arguments)]
pub fn sweep_layers_retrained<F>(
    encoder: &Encoder,
    adapter_cfg: &AdapterConfig,
    train: &[Vec<u32>],
    val: &[Vec<u32>],
    cfg: &TrainConfig,
    range: RangeInclusive<usize>,
    parallel: bool,
    eval: F,
) -> Result<Vec<(SweepRow, Option<TrainReport>)>>
where
    F: Fn(&Model) -> Result<f64> + Sync,
{
    check_range(&range, encoder.config.num_layers)?;
    let layers: Vec<usize> = range.collect();
    map_ordered(&layers, parallel, |&i| {
        if i == 0 {
            let m = Model::bare(encoder.clone());
            return Ok((SweepRow { layers: 0, metric: eval(&m)? }, None));
        }
        let mut stack = AdapterStack::language(encoder.config.hidden, encoder.config.num_layers, adapter_cfg, cfg.seed ^ 0x1a)?;
        stack.language.retain(|&l, _| l <= i);
        let mut m = attach(encoder.clone(), PlacementPlan::language_prefix(i), &stack)?;
        let report = train_mlm_model(&mut m, FreezeMode::TrainLAdapter, train, val, cfg)?;
        Ok((SweepRow { layers: i, metric: eval(&m)? }, Some(report)))
    })
}

/// Scores of one model on a source and a target language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguagePair {
    pub source: f64,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub source_language: String,
    pub target_language: String,
    pub adapter: LanguagePair,
    pub bare: LanguagePair,
}

/// Evaluates an adapted model and its bare backbone on the adapter's own
/// language and on an unseen one.
pub fn zero_shot<F>(adapted: &Model, source_language: &str, target_language: &str, eval: F) -> Result<ZeroShotReport>
where
    F: Fn(&Model, bool) -> Result<f64>,
{
    let bare = Model::bare(adapted.encoder()?);
    Ok(ZeroShotReport {
        source_language: source_language.into(),
        target_language: target_language.into(),
        adapter: LanguagePair {
            source: eval(adapted, false)?,
            target: eval(adapted, true)?,
        },
        bare: LanguagePair {
            source: eval(&bare, false)?,
            target: eval(&bare, true)?,
        },
    })
}
