//! Command-line front end: one run per invocation, every artifact under
//! `--out`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::adapters::AdapterConfig;
use crate::budget::{budget_report, BudgetSpec, ReferenceBudgets};
use crate::checkpoint::{compose, Checkpoint, ComponentKind};
use crate::corpus::{load_jsonl, split_90_10, strip_corpus, write_jsonl, ClozeRecord, CommentRules, CorpusRecord, PairRecord, RetrievalRecord};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::experiment::{parse_layer_range, sweep_layers, sweep_layers_retrained, zero_shot};
use crate::model::Model;
use crate::synthetic::{self, ToyLanguage};
use crate::tasks::{classify_pairs, embed_corpus, eval_cloze, eval_pairs, map_at_r, ClozeExample, Similarity};
use crate::tokenizer::{train_bpe, Vocabulary};
use crate::training::{pack_sequences, pretrain_mlm, train_language_adapter, train_task_adapter, TaskData, TrainConfig};

pub const SEED_ENV: &str = "ADAPTERLAB_SEED";

#[derive(Debug, Parser)]
#[command(name = "adapterlab", version, about = "Adapters on a small masked-language-model encoder")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Output directory for reports, configs and checkpoints.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Run seed; takes precedence over ADAPTERLAB_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration value, e.g. `pretrain.max_steps=200`.
    #[arg(long = "set", global = true, value_name = "KEY.PATH=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CloneTask {
    Retrieval,
    Pair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepTask {
    Cloze,
    Retrieval,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic prose, toy-code, clone and cloze datasets.
    Synth {
        /// Vocabulary used to emit cloze probes; without it no probes are written.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Learn a BPE vocabulary from corpus records.
    TokenizerTrain {
        #[arg(long, required = true)]
        corpus: Vec<PathBuf>,
    },
    /// Pretrain the backbone with masked language modelling.
    Pretrain {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, required = true)]
        corpus: Vec<PathBuf>,
    },
    /// Train language adapters (all layers plus the invertible adapter) on a frozen backbone.
    TrainLangAdapter {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long, required = true)]
        corpus: Vec<PathBuf>,
        /// Remove comment lines and NL fields before training.
        #[arg(long)]
        strip_nl: bool,
        /// Extra comment rule `LANGUAGE=PREFIX`; the toy-language rules are always present.
        #[arg(long = "comment-prefix")]
        comment_prefixes: Vec<String>,
    },
    /// Train task adapters (and the pair head) on top of a backbone and optional language adapters.
    TrainTaskAdapter {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long = "adapter")]
        adapters: Vec<PathBuf>,
        #[arg(long, value_enum)]
        task: CloneTask,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Comma-separated layers for task adapters; all layers by default.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
    },
    /// Two-candidate or multi-candidate cloze accuracy.
    EvalCloze {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long = "adapter")]
        adapters: Vec<PathBuf>,
        #[arg(long)]
        probes: PathBuf,
    },
    /// MAP@R for retrieval data or F1 for pair data.
    EvalClone {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long = "adapter")]
        adapters: Vec<PathBuf>,
        #[arg(long, value_enum)]
        task: CloneTask,
        #[arg(long)]
        data: PathBuf,
    },
    /// Parameter and memory budget.
    Budget {
        /// Use the base-size reference geometry instead of the configured encoder.
        #[arg(long)]
        paper_scale: bool,
    },
    /// Metric for each language-adapter placement {1..i}.
    SweepLayers {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        /// Language-adapter checkpoint trained on every layer.
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "cloze")]
        task: SweepTask,
        /// Cloze probes or retrieval records.
        #[arg(long)]
        data: PathBuf,
        /// Inclusive placement range such as `0..4`.
        #[arg(long)]
        layers: String,
        /// Train a fresh adapter stack for each placement instead of truncating one.
        #[arg(long)]
        retrain_per_layer: bool,
        /// Training corpus for `--retrain-per-layer`.
        #[arg(long)]
        corpus: Vec<PathBuf>,
        /// Evaluate placements concurrently; output order is unchanged.
        #[arg(long)]
        parallel: bool,
    },
    /// Cloze accuracy of a language adapter on its own and on an unseen language.
    ZeroShot {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        /// Probes in the adapter's training language.
        #[arg(long)]
        source_probes: PathBuf,
        /// Probes in the unseen language.
        #[arg(long)]
        probes: PathBuf,
        #[arg(long)]
        eval_language: String,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::TokenizerTrain { .. } => "tokenizer-train",
            Command::Pretrain { .. } => "pretrain",
            Command::TrainLangAdapter { .. } => "train-lang-adapter",
            Command::TrainTaskAdapter { .. } => "train-task-adapter",
            Command::EvalCloze { .. } => "eval-cloze",
            Command::EvalClone { .. } => "eval-clone",
            Command::Budget { .. } => "budget",
            Command::SweepLayers { .. } => "sweep-layers",
            Command::ZeroShot { .. } => "zero-shot",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSettings {
    pub vocab_size: usize,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        TokenizerSettings { vocab_size: 2048 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Token limit for retrieval and pair inputs.
    pub max_len: usize,
    /// Probability threshold for pair classification.
    pub threshold: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            max_len: 128,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub prose_bytes: usize,
    pub code_bytes: usize,
    pub clone_classes: usize,
    pub programs_per_class: usize,
    /// Per-class train / validation counts; the rest is test.
    pub clone_train: usize,
    pub clone_val: usize,
    pub pairs: usize,
    pub probes: usize,
    pub probe_tokens: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            prose_bytes: 1_000_000,
            code_bytes: 1_000_000,
            clone_classes: 20,
            programs_per_class: 20,
            clone_train: 12,
            clone_val: 4,
            pairs: 400,
            probes: 400,
            probe_tokens: 64,
        }
    }
}

/// Everything a run reads from configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub tokenizer: TokenizerSettings,
    pub pretrain: TrainConfig,
    pub language: TrainConfig,
    pub task: TrainConfig,
    pub eval: EvalSettings,
    pub synth: SynthSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = TrainConfig {
            learning_rate: 1e-3,
            patience: 10,
            ..TrainConfig::default()
        };
        RunConfig {
            seed: 0,
            encoder: EncoderConfig::default(),
            adapter: AdapterConfig::default(),
            tokenizer: TokenizerSettings::default(),
            // the loss plateaus for long stretches before it drops; stopping early would cut that off
            pretrain: TrainConfig {
                max_steps: 4000,
                patience: 100,
                ..desk.clone()
            },
            language: TrainConfig {
                max_steps: 1000,
                ..desk.clone()
            },
            task: TrainConfig {
                max_steps: 300,
                eval_every: 50,
                seq_len: 128,
                ..desk
            },
            eval: EvalSettings::default(),
            synth: SynthSettings::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the config file, then `--set` overrides, then the seed
    /// (`--seed` over `ADAPTERLAB_SEED` over the file). Training seeds are
    /// derived from the run seed.
    pub fn resolve(file: Option<&Path>, overrides: &[String], cli_seed: Option<u64>, env_seed: Option<&str>) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file_value: Value = serde_json::from_str(&text)?;
            merge(&mut value, file_value);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value)?;
        let env_seed = env_seed
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))
            })
            .transpose()?;
        if let Some(s) = cli_seed.or(env_seed) {
            cfg.seed = s;
        }
        cfg.pretrain.seed = cfg.seed;
        cfg.language.seed = cfg.seed.wrapping_add(1);
        cfg.task.seed = cfg.seed.wrapping_add(2);
        for t in [&cfg.pretrain, &cfg.language, &cfg.task] {
            t.validate()?;
        }
        cfg.encoder.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON when possible and taken
/// as a string otherwise. Every key on the path must already exist.
pub fn apply_override(value: &mut Value, text: &str) -> Result<()> {
    let (path, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not KEY.PATH=VALUE")))?;
    let mut slot = value;
    for key in path.split('.') {
        slot = slot
            .get_mut(key)
            .ok_or_else(|| Error::Config(format!("override `{path}`: unknown key `{key}`")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Output directory plus the checksums gathered while the run executes.
struct Run {
    out: PathBuf,
    config: RunConfig,
    checksums: BTreeMap<String, String>,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn vocab(&mut self, path: &Path) -> Result<Vocabulary> {
        let v = Vocabulary::load(path)?;
        self.checksums.insert("vocab".into(), sha256_hex(v.to_text().as_bytes()));
        Ok(v)
    }

    fn checkpoint(&mut self, path: &Path) -> Result<Checkpoint> {
        let c = Checkpoint::load(path)?;
        let label = format!("{}:{}", kind_name(c.manifest.kind), path.display());
        self.checksums.insert(label, c.manifest.checksum.clone());
        Ok(c)
    }

    fn model(&mut self, backbone: &Path, adapters: &[PathBuf]) -> Result<Model> {
        let b = self.checkpoint(backbone)?;
        let extra = adapters.iter().map(|p| self.checkpoint(p)).collect::<Result<Vec<_>>>()?;
        compose(&b, &extra.iter().collect::<Vec<_>>())
    }

    fn save_checkpoint(&mut self, ck: &Checkpoint, name: &str) -> Result<PathBuf> {
        let path = self.path(name);
        ck.save(&path)?;
        self.checksums.insert(format!("{}:{name}", kind_name(ck.manifest.kind)), ck.manifest.checksum.clone());
        Ok(path)
    }
}

fn kind_name(k: ComponentKind) -> &'static str {
    match k {
        ComponentKind::Backbone => "backbone",
        ComponentKind::LAdapter => "l_adapter",
        ComponentKind::TAdapter => "t_adapter",
    }
}

fn load_records<R: crate::corpus::Record>(paths: &[PathBuf]) -> Result<Vec<R>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(load_jsonl::<R>(p)?.records);
    }
    Ok(out)
}

fn load_probes(path: &Path, vocab: &Vocabulary) -> Result<Vec<ClozeExample>> {
    load_jsonl::<ClozeRecord>(path)?
        .records
        .iter()
        .map(|r| ClozeExample::from_record(r, vocab))
        .collect()
}

/// Train and validation token sequences.
type SequenceSplit = (Vec<Vec<u32>>, Vec<Vec<u32>>);

fn mlm_sequences(records: &[CorpusRecord], vocab: &Vocabulary, seq_len: usize, seed: u64) -> Result<SequenceSplit> {
    let (train, val) = split_90_10(records, seed)?;
    let pack = |rs: &[CorpusRecord]| {
        let texts: Vec<&str> = rs.iter().map(|r| r.code.as_str()).collect();
        pack_sequences(vocab, &texts, seq_len)
    };
    Ok((pack(&train), pack(&val)))
}

/// Parses argv, runs the command and returns the process exit code: 0 on
/// success, 2 on usage errors, 1 on failures (with an error JSON).
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let report = json!({
                "command": cli.command.name(),
                "error": { "kind": e.kind(), "message": e.to_string() },
            });
            let text = serde_json::to_string_pretty(&report).unwrap_or_default();
            eprintln!("{text}");
            if fs::create_dir_all(&cli.common.out).is_ok() {
                let _ = fs::write(cli.common.out.join("error.json"), &text);
            }
            1
        }
    }
}

/// Runs a parsed command.
pub fn execute(cli: &Cli) -> Result<()> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let config = RunConfig::resolve(cli.common.config.as_deref(), &cli.common.overrides, cli.common.seed, env_seed.as_deref())?;
    let out = cli.common.out.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut run = Run {
        out,
        config,
        checksums: BTreeMap::new(),
    };
    write_json(&run.path("config.json"), &run.config)?;
    let started = std::time::Instant::now();
    let body = run_command(&mut run, &cli.command)?;
    let report = json!({
        "command": cli.command.name(),
        "seed": run.config.seed,
        "seconds": started.elapsed().as_secs_f64(),
        "checksums": run.checksums,
        "result": body,
    });
    write_json(&run.path("report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn run_command(run: &mut Run, command: &Command) -> Result<Value> {
    let cfg = run.config.clone();
    match command {
        Command::Synth { vocab } => synth(run, vocab.as_deref()),
        Command::TokenizerTrain { corpus } => {
            let records: Vec<CorpusRecord> = load_records(corpus)?;
            let vocab = train_bpe(records.iter().map(|r| r.code.as_str()), cfg.tokenizer.vocab_size)?;
            let path = run.path("vocab.txt");
            vocab.save(&path)?;
            run.checksums.insert("vocab".into(), sha256_hex(vocab.to_text().as_bytes()));
            Ok(json!({ "vocab": path, "vocab_size": vocab.len(), "records": records.len() }))
        }
        Command::Pretrain { vocab, corpus } => {
            let vocab = run.vocab(vocab)?;
            let records: Vec<CorpusRecord> = load_records(corpus)?;
            let (train, val) = mlm_sequences(&records, &vocab, cfg.pretrain.seq_len, cfg.seed)?;
            let enc_cfg = EncoderConfig {
                vocab_size: vocab.len(),
                ..cfg.encoder.clone()
            };
            let encoder = Encoder::new(enc_cfg, cfg.seed)?;
            let (encoder, report) = pretrain_mlm(encoder, &train, &val, &cfg.pretrain)?;
            let ck = Checkpoint::from_model(&Model::bare(encoder), ComponentKind::Backbone)?;
            let path = run.save_checkpoint(&ck, "backbone.ckpt")?;
            Ok(json!({ "checkpoint": path, "train_sequences": train.len(), "val_sequences": val.len(), "train": report }))
        }
        Command::TrainLangAdapter {
            vocab,
            backbone,
            corpus,
            strip_nl,
            comment_prefixes,
        } => {
            let vocab = run.vocab(vocab)?;
            let encoder = run.model(backbone, &[])?.encoder()?;
            let mut records: Vec<CorpusRecord> = load_records(corpus)?;
            let mut excluded = 0;
            if *strip_nl {
                let mut rules: CommentRules = synthetic::comment_rules();
                for r in comment_prefixes {
                    let (lang, prefix) = r
                        .split_once('=')
                        .ok_or_else(|| Error::Config(format!("comment rule `{r}` is not LANGUAGE=PREFIX")))?;
                    rules.entry(lang.to_string()).or_default().push(prefix.to_string());
                }
                (records, excluded) = strip_corpus(&records, &rules)?;
            }
            let (train, val) = mlm_sequences(&records, &vocab, cfg.language.seq_len, cfg.seed)?;
            let (model, report) = train_language_adapter(encoder, &cfg.adapter, &train, &val, &cfg.language)?;
            let mut ck = Checkpoint::from_model(&model, ComponentKind::LAdapter)?;
            ck.manifest.adapter = Some(cfg.adapter.clone());
            ck.manifest.language = records.first().map(|r| r.language.clone());
            let path = run.save_checkpoint(&ck, "l_adapter.ckpt")?;
            Ok(json!({ "checkpoint": path, "strip_nl": strip_nl, "excluded_records": excluded, "train": report }))
        }
        Command::TrainTaskAdapter {
            vocab,
            backbone,
            adapters,
            task,
            train,
            val,
            layers,
        } => {
            let vocab = run.vocab(vocab)?;
            let model = run.model(backbone, adapters)?;
            let data = match task {
                CloneTask::Retrieval => TaskData::Retrieval {
                    train: load_jsonl::<RetrievalRecord>(train)?.records,
                    val: load_jsonl::<RetrievalRecord>(val)?.records,
                },
                CloneTask::Pair => TaskData::Pair {
                    train: load_jsonl::<PairRecord>(train)?.records,
                    val: load_jsonl::<PairRecord>(val)?.records,
                },
            };
            let (model, report) = train_task_adapter(model, &vocab, &data, &cfg.adapter, layers.as_deref(), &cfg.task)?;
            let mut ck = Checkpoint::from_model(&model, ComponentKind::TAdapter)?;
            ck.manifest.adapter = Some(cfg.adapter.clone());
            ck.manifest.task = Some(data.kind().to_string());
            let path = run.save_checkpoint(&ck, "t_adapter.ckpt")?;
            Ok(json!({ "checkpoint": path, "train": report }))
        }
        Command::EvalCloze {
            vocab,
            backbone,
            adapters,
            probes,
        } => {
            let vocab = run.vocab(vocab)?;
            let model = run.model(backbone, adapters)?;
            let examples = load_probes(probes, &vocab)?;
            let report = eval_cloze(&model, &examples)?;
            let per_example = run.path("predictions.json");
            write_json(&per_example, &report.predictions)?;
            Ok(json!({ "metric": "accuracy", "value": report.accuracy, "n": report.n, "per_example": per_example }))
        }
        Command::EvalClone {
            vocab,
            backbone,
            adapters,
            task,
            data,
        } => {
            let vocab = run.vocab(vocab)?;
            let model = run.model(backbone, adapters)?;
            match task {
                CloneTask::Retrieval => {
                    let records = load_jsonl::<RetrievalRecord>(data)?.records;
                    let table = embed_corpus(&model, &vocab, &records, cfg.eval.max_len)?;
                    let labels: Vec<&str> = records.iter().map(|r| r.label.as_str()).collect();
                    let r = map_at_r(&table.vectors, &labels, Similarity::Cosine)?;
                    let per_example = run.path("per_query.json");
                    write_json(&per_example, &r)?;
                    Ok(json!({ "metric": "map_at_r", "value": r.map_at_r, "n": records.len(), "truncated": table.truncated, "per_example": per_example }))
                }
                CloneTask::Pair => {
                    let pairs = load_jsonl::<PairRecord>(data)?.records;
                    let probs = classify_pairs(&model, &vocab, &pairs, cfg.eval.max_len)?;
                    let (counts, score) = eval_pairs(&probs, &pairs, cfg.eval.threshold)?;
                    let per_example = run.path("probabilities.json");
                    write_json(&per_example, &probs)?;
                    Ok(json!({ "metric": "f1", "value": score.f1, "n": pairs.len(), "counts": counts, "score": score, "per_example": per_example }))
                }
            }
        }
        Command::Budget { paper_scale } => {
            let spec = if *paper_scale {
                BudgetSpec::paper_scale()
            } else {
                BudgetSpec::from_configs(&cfg.encoder, &cfg.adapter)
            };
            let report = budget_report(&spec, &ReferenceBudgets::default())?;
            eprintln!("{}", report.render());
            Ok(json!({ "paper_scale": paper_scale, "spec": spec, "budget": report }))
        }
        Command::SweepLayers {
            vocab,
            backbone,
            adapter,
            task,
            data,
            layers,
            retrain_per_layer,
            corpus,
            parallel,
        } => {
            let vocab = run.vocab(vocab)?;
            let range = parse_layer_range(layers)?;
            let probes = match task {
                SweepTask::Cloze => Some(load_probes(data, &vocab)?),
                SweepTask::Retrieval => None,
            };
            let records = match task {
                SweepTask::Retrieval => load_jsonl::<RetrievalRecord>(data)?.records,
                SweepTask::Cloze => Vec::new(),
            };
            let max_len = cfg.eval.max_len;
            let eval = |m: &Model| -> Result<f64> {
                match &probes {
                    Some(p) => Ok(eval_cloze(m, p)?.accuracy),
                    None => {
                        let t = embed_corpus(m, &vocab, &records, max_len)?;
                        let labels: Vec<&str> = records.iter().map(|r| r.label.as_str()).collect();
                        Ok(map_at_r(&t.vectors, &labels, Similarity::Cosine)?.map_at_r)
                    }
                }
            };
            if *retrain_per_layer {
                if corpus.is_empty() {
                    return Err(Error::Config("--retrain-per-layer needs --corpus".into()));
                }
                let encoder = run.model(backbone, &[])?.encoder()?;
                let recs: Vec<CorpusRecord> = load_records(corpus)?;
                let (train, val) = mlm_sequences(&recs, &vocab, cfg.language.seq_len, cfg.seed)?;
                let rows = sweep_layers_retrained(&encoder, &cfg.adapter, &train, &val, &cfg.language, range, *parallel, eval)?;
                let (rows, reports): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
                Ok(json!({ "mode": "retrain", "task": format!("{task:?}").to_lowercase(), "rows": rows, "train": reports }))
            } else {
                let adapter = adapter
                    .as_ref()
                    .ok_or_else(|| Error::Config("sweep-layers needs --adapter unless --retrain-per-layer is set".into()))?;
                let model = run.model(backbone, std::slice::from_ref(adapter))?;
                let rows = sweep_layers(&model, range, *parallel, eval)?;
                Ok(json!({ "mode": "truncate", "task": format!("{task:?}").to_lowercase(), "rows": rows }))
            }
        }
        Command::ZeroShot {
            vocab,
            backbone,
            adapter,
            source_probes,
            probes,
            eval_language,
        } => {
            let vocab = run.vocab(vocab)?;
            let ck = run.checkpoint(adapter)?;
            let source_language = ck.manifest.language.clone().unwrap_or_else(|| "unknown".into());
            let model = run.model(backbone, std::slice::from_ref(adapter))?;
            let source = load_probes(source_probes, &vocab)?;
            let target = load_probes(probes, &vocab)?;
            let report = zero_shot(&model, &source_language, eval_language, |m, unseen| {
                Ok(eval_cloze(m, if unseen { &target } else { &source })?.accuracy)
            })?;
            Ok(serde_json::to_value(report)?)
        }
    }
}

fn synth(run: &mut Run, vocab: Option<&Path>) -> Result<Value> {
    let s = run.config.synth.clone();
    let seed = run.config.seed;
    let mut files: BTreeMap<String, usize> = BTreeMap::new();
    let prose = synthetic::prose_corpus(s.prose_bytes, seed);
    write_jsonl(&run.path("prose.jsonl"), &prose)?;
    files.insert("prose.jsonl".into(), prose.len());
    for (i, lang) in [ToyLanguage::A, ToyLanguage::B].into_iter().enumerate() {
        let code = synthetic::code_corpus(lang, s.code_bytes, seed.wrapping_add(1 + i as u64));
        let name = format!("code_{}.jsonl", lang.tag());
        write_jsonl(&run.path(&name), &code)?;
        files.insert(name, code.len());
    }
    let clones = synthetic::clone_set(s.clone_classes, s.programs_per_class, seed.wrapping_add(3))?;
    let (tr, va, te) = synthetic::split_per_class(&clones, s.clone_train, s.clone_val);
    for (split, recs) in [("train", &tr), ("val", &va), ("test", &te)] {
        let name = format!("clones_{split}.jsonl");
        write_jsonl(&run.path(&name), recs)?;
        files.insert(name, recs.len());
        let pairs = synthetic::clone_pairs(recs, s.pairs, seed.wrapping_add(4))?;
        let name = format!("pairs_{split}.jsonl");
        write_jsonl(&run.path(&name), &pairs)?;
        files.insert(name, pairs.len());
    }
    if let Some(path) = vocab {
        let vocab = run.vocab(path)?;
        for (i, lang) in [ToyLanguage::A, ToyLanguage::B].into_iter().enumerate() {
            let k = seed.wrapping_add(10 + i as u64);
            let sets = [
                ("keyword", synthetic::keyword_probes(lang, &vocab, s.probes, s.probe_tokens, k)?),
                ("maxmin", synthetic::cloze_probes(lang, &vocab, s.probes, false, s.probe_tokens, k)?),
                ("maxmin_nl", synthetic::cloze_probes(lang, &vocab, s.probes, true, s.probe_tokens, k)?),
            ];
            for (kind, probes) in sets {
                let name = format!("cloze_{kind}_{}.jsonl", lang.tag());
                write_jsonl(&run.path(&name), &probes)?;
                files.insert(name, probes.len());
            }
        }
    }
    Ok(json!({ "files": files }))
}
