//! Tokenizer, corpus files, checkpoints and the synthetic generators.

use std::fs;

use adapterlab::adapters::{AdapterConfig, AdapterStack, PlacementPlan};
use adapterlab::checkpoint::{compose, Checkpoint, ComponentKind};
use adapterlab::corpus::{
    load_jsonl, split_90_10, strip_corpus, write_jsonl, ClozeRecord, CorpusRecord, PairRecord, RetrievalRecord,
};
use adapterlab::encoder::{Encoder, EncoderConfig, InputBatch};
use adapterlab::model::attach;
use adapterlab::synthetic::{
    clone_pairs, clone_set, cloze_probes, code_corpus, comment_rules, keyword_probes, prose_corpus, split_per_class,
    ToyLanguage,
};
use adapterlab::tasks::{pair_head, ClozeExample};
use adapterlab::tokenizer::{apply_mlm_mask, train_bpe, MaskingConfig, Vocabulary, MASK_ID, PAD_ID, UNK_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vocab() -> Vocabulary {
    let prose = prose_corpus(60_000, 11);
    train_bpe(prose.iter().map(|r| r.code.as_str()), 400).unwrap()
}

// ------------------------------------------------------------ tokenizer

#[test]
fn corpus_lines_round_trip_and_unknowns_surface() {
    let v = vocab();
    let code = code_corpus(ToyLanguage::B, 5_000, 4);
    for r in &code {
        let ids = v.encode(&r.code);
        assert_eq!(v.decode(&ids).unwrap(), r.code);
    }
    assert!(v.encode("snowman \u{2603}").contains(&UNK_ID));
    assert!(v.decode(&[v.len() as u32]).is_err());
}

#[test]
fn vocabulary_file_round_trip() {
    let v = vocab();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    v.save(&path).unwrap();
    assert!(fs::read_to_string(&path).unwrap().starts_with("adapterlab-vocab v1\n"));
    assert_eq!(Vocabulary::load(&path).unwrap(), v);
}

#[test]
fn corruption_rate_and_special_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seqs: Vec<Vec<u32>> = (0..300)
        .map(|_| {
            let n = rng.random_range(20..80);
            let mut s = vec![0];
            s.extend((0..n).map(|_| rng.random_range(5..300)));
            s.push(2);
            s
        })
        .collect();
    let eligible: usize = seqs.iter().map(|s| s.len() - 2).sum();
    assert!(eligible >= 10_000);
    let cfg = MaskingConfig::default();
    let b = apply_mlm_mask(&seqs, 300, &cfg, 7).unwrap();
    let rate = b.num_targets() as f64 / eligible as f64;
    assert!((rate / cfg.mask_rate - 1.0).abs() < 0.1, "rate {rate}");
    let masked = b.labels.iter().zip(&b.input_ids).filter(|(l, &i)| l.is_some() && i == MASK_ID).count();
    assert!((masked as f64 / b.num_targets() as f64 - 0.8).abs() < 0.05);
    for i in 0..b.input_ids.len() {
        if b.attention_mask[i] == 0 {
            assert_eq!(b.input_ids[i], PAD_ID);
            assert!(b.labels[i].is_none());
        }
        if let Some(orig) = b.labels[i] {
            assert!(!Vocabulary::is_special(orig));
        }
    }
    assert_eq!(apply_mlm_mask(&seqs, 300, &cfg, 7).unwrap(), b);
    let bad = MaskingConfig { mask_rate: 1.5, ..cfg };
    assert!(apply_mlm_mask(&seqs, 300, &bad, 7).is_err());
}

// --------------------------------------------------------------- corpus

fn record(i: usize) -> CorpusRecord {
    CorpusRecord {
        id: format!("r{i}"),
        language: "toy_a".into(),
        code: format!("x{i} = {i}\n"),
        nl: i.is_multiple_of(2).then(|| "a note".to_string()),
        split: None,
    }
}

#[test]
fn jsonl_loading_rules() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert!(load_jsonl::<CorpusRecord>(&empty).is_err());

    let three = dir.path().join("three.jsonl");
    write_jsonl(&three, &[record(0), record(1), record(2)]).unwrap();
    assert_eq!(load_jsonl::<CorpusRecord>(&three).unwrap().records.len(), 3);

    let broken = dir.path().join("broken.jsonl");
    fs::write(
        &broken,
        "{\"id\":\"a\",\"language\":\"toy_a\",\"code\":\"x\"}\n{\"id\":\"b\",\"language\":\"toy_a\"}\n",
    )
    .unwrap();
    let err = load_jsonl::<CorpusRecord>(&broken).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("line 2") || msg.contains(":2") || msg.contains(" 2:"), "{msg}");
    assert!(msg.contains("code"), "{msg}");

    // one bad line in 200 is tolerated and reported
    let mostly = dir.path().join("mostly.jsonl");
    let mut text: String = (0..199).map(|i| serde_json::to_string(&record(i)).unwrap() + "\n").collect();
    text.push_str("not json\n");
    fs::write(&mostly, text).unwrap();
    let loaded = load_jsonl::<CorpusRecord>(&mostly).unwrap();
    assert_eq!(loaded.records.len(), 199);
    assert_eq!(loaded.malformed[0].0, 200);
}

#[test]
fn every_record_kind_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let v = vocab();
    let clones = clone_set(3, 3, 1).unwrap();
    let pairs = clone_pairs(&clones, 6, 2).unwrap();
    let probes = keyword_probes(ToyLanguage::A, &v, 5, 32, 3).unwrap();
    let corpus: Vec<CorpusRecord> = (0..5).map(record).collect();

    let p = dir.path().join("c.jsonl");
    write_jsonl(&p, &corpus).unwrap();
    assert_eq!(load_jsonl::<CorpusRecord>(&p).unwrap().records, corpus);
    write_jsonl(&p, &clones).unwrap();
    assert_eq!(load_jsonl::<RetrievalRecord>(&p).unwrap().records, clones);
    write_jsonl(&p, &pairs).unwrap();
    assert_eq!(load_jsonl::<PairRecord>(&p).unwrap().records, pairs);
    write_jsonl(&p, &probes).unwrap();
    assert_eq!(load_jsonl::<ClozeRecord>(&p).unwrap().records, probes);
}

#[test]
fn ninety_ten_split() {
    let hundred: Vec<CorpusRecord> = (0..100).map(record).collect();
    let (tr, va) = split_90_10(&hundred, 3).unwrap();
    assert_eq!((tr.len(), va.len()), (90, 10));
    let (tr2, va2) = split_90_10(&hundred, 3).unwrap();
    assert_eq!((tr.clone(), va.clone()), (tr2, va2));

    let more: Vec<CorpusRecord> = (0..101).map(record).collect();
    let (tr, va) = split_90_10(&more, 3).unwrap();
    assert_eq!((tr.len(), va.len()), (91, 10));
    let mut ids: Vec<String> = tr.iter().chain(&va).map(|r| r.id.clone()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 101);

    let mut reversed = more.clone();
    reversed.reverse();
    let (tr_r, _) = split_90_10(&reversed, 3).unwrap();
    let set = |rs: &[CorpusRecord]| rs.iter().map(|r| r.id.clone()).collect::<std::collections::BTreeSet<_>>();
    assert_eq!(set(&tr_r), set(&tr));

    assert!(split_90_10(&hundred[..9], 3).is_err());
}

#[test]
fn stripping_comments_keeps_code_bytes() {
    let rules = comment_rules();
    let code = code_corpus(ToyLanguage::A, 20_000, 9);
    let (kept, excluded) = strip_corpus(&code, &rules).unwrap();
    assert_eq!(excluded, 0);
    for (before, after) in code.iter().zip(&kept) {
        assert!(after.nl.is_none());
        let survivors: String = before
            .code
            .split_inclusive('\n')
            .filter(|l| !l.trim_start().starts_with(ToyLanguage::A.comment_prefix()))
            .collect();
        assert_eq!(after.code, survivors);
    }
    let only_comments = CorpusRecord {
        code: "# one\n  # two\n".into(),
        ..record(0)
    };
    assert_eq!(strip_corpus(&[only_comments], &rules).unwrap(), (vec![], 1));
    let alien = CorpusRecord {
        language: "cobol".into(),
        ..record(0)
    };
    assert!(strip_corpus(&[alien], &rules).is_err());
}

// ----------------------------------------------------------- checkpoints

#[test]
fn components_save_load_and_compose() {
    let cfg = EncoderConfig {
        num_layers: 2,
        hidden: 16,
        heads: 2,
        ffn: 32,
        vocab_size: 40,
        max_positions: 10,
        dropout: 0.0,
        layer_norm_eps: 1e-5,
    };
    let enc = Encoder::new(cfg, 1).unwrap();
    let acfg = AdapterConfig { init_std: 0.2, ..Default::default() };
    let mut stack = AdapterStack::language(16, 2, &acfg, 2).unwrap().merge(AdapterStack::task(16, 2, &acfg, 3).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for a in stack.language.values_mut().chain(stack.task.values_mut()) {
        a.proj.up_w = adapterlab::numerics::Tensor::randn(a.proj.up_w.shape().to_vec(), 0.2, &mut rng);
    }
    let plan = PlacementPlan::language_prefix(2).with_task_layers([2]);
    let mut model = attach(enc, plan, &stack).unwrap();
    model.add_parameters(pair_head(16)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for (kind, file) in [
        (ComponentKind::Backbone, "backbone.ckpt"),
        (ComponentKind::LAdapter, "l.ckpt"),
        (ComponentKind::TAdapter, "t.ckpt"),
    ] {
        let p = dir.path().join(file);
        Checkpoint::from_model(&model, kind).unwrap().save(&p).unwrap();
        paths.push(p);
    }
    let bb = Checkpoint::load(&paths[0]).unwrap();
    let l = Checkpoint::load(&paths[1]).unwrap();
    let t = Checkpoint::load(&paths[2]).unwrap();
    assert!(bb.params.names().all(|n| ComponentKind::Backbone.owns(n)));
    assert!(t.params.contains("head.pair.w"));

    let rebuilt = compose(&bb, &[&l, &t]).unwrap();
    let input = InputBatch::new(1, 5, vec![0, 7, 8, 9, 2], vec![1; 5]).unwrap();
    assert_eq!(rebuilt.hidden_states(&input).unwrap(), model.hidden_states(&input).unwrap());
    assert_eq!(rebuilt.params, model.params);

    // language adapters alone give a model without the task path
    let lang_only = compose(&bb, &[&l]).unwrap();
    assert!(lang_only.plan.task.is_empty());
    assert!(compose(&l, &[]).is_err());
    assert!(compose(&bb, &[&bb]).is_err());

    let mut bytes = fs::read(&paths[1]).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x55;
    fs::write(&paths[1], bytes).unwrap();
    assert!(Checkpoint::load(&paths[1]).is_err());
}

// ------------------------------------------------------------ synthetic

#[test]
fn probes_are_well_formed_and_deterministic() {
    let v = vocab();
    for lang in [ToyLanguage::A, ToyLanguage::B] {
        let kw = keyword_probes(lang, &v, 50, 48, 5).unwrap();
        assert_eq!(kw, keyword_probes(lang, &v, 50, 48, 5).unwrap());
        let mm = cloze_probes(lang, &v, 50, true, 48, 6).unwrap();
        for r in kw.iter().chain(&mm) {
            assert!(r.tokens.len() <= 48);
            assert_eq!(r.candidates.len(), 2);
            let ex = ClozeExample::from_record(r, &v).unwrap();
            assert_eq!(ex.tokens[ex.mask_index], MASK_ID);
        }
        assert!(mm.iter().all(|r| r.has_nl));
    }
    assert!(keyword_probes(ToyLanguage::A, &v, 1, 8, 0).is_err());
}

#[test]
fn clone_splits_keep_every_class() {
    let set = clone_set(5, 10, 3).unwrap();
    assert_eq!(set.len(), 50);
    let (tr, va, te) = split_per_class(&set, 6, 2);
    assert_eq!((tr.len(), va.len(), te.len()), (30, 10, 10));
    for part in [&tr, &va, &te] {
        let labels: std::collections::BTreeSet<_> = part.iter().map(|r| r.label.clone()).collect();
        assert_eq!(labels.len(), 5);
    }
    let pairs = clone_pairs(&tr, 40, 1).unwrap();
    let positives = pairs.iter().filter(|p| p.label == 1).count();
    assert!(positives > 0 && positives < 40);
}
