use adapterlab::adapters::{AdapterConfig, AdapterStack, PlacementPlan};
use adapterlab::encoder::{Encoder, EncoderConfig};
use adapterlab::error::Result;
use adapterlab::experiment::{sweep_layers, sweep_layers_retrained, zero_shot};
use adapterlab::model::{attach, Model};
use adapterlab::tasks::{eval_cloze, ClozeExample, ClozeScorer};
use adapterlab::training::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LAYERS: usize = 3;

fn encoder() -> Encoder {
    let cfg = EncoderConfig {
        num_layers: LAYERS,
        hidden: 16,
        heads: 2,
        ffn: 32,
        vocab_size: 40,
        max_positions: 16,
        dropout: 0.0,
        layer_norm_eps: 1e-5,
    };
    Encoder::new(cfg, 5).unwrap()
}

/// A full language stack with every weight randomized, so each layer matters.
fn adapted() -> Model {
    let enc = encoder();
    let stack = AdapterStack::language(16, LAYERS, &AdapterConfig::default(), 8).unwrap();
    let mut m = attach(enc, PlacementPlan::language_prefix(LAYERS), &stack).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let names: Vec<String> = m.params.names().filter(|n| n.starts_with("adapters.")).map(String::from).collect();
    for n in names {
        for x in m.params.get_mut(&n).unwrap().data_mut() {
            *x = rng.random_range(-0.3..0.3);
        }
    }
    m
}

fn probes(n: usize, seed: u64) -> Vec<ClozeExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut tokens = vec![0];
            tokens.extend((0..8).map(|_| rng.random_range(5..40)));
            tokens.push(2);
            let mask_index = rng.random_range(1..9);
            let answer = tokens[mask_index];
            tokens[mask_index] = 4;
            let other = if answer == 5 { 6 } else { 5 };
            ClozeExample {
                id: format!("p{i}"),
                tokens,
                mask_index,
                candidates: vec![answer, other],
                answer,
                language: "toy".into(),
                has_nl: false,
            }
        })
        .collect()
}

/// Sum of candidate logits: continuous, so any change in the forward shows up.
fn logit_mass(m: &Model, examples: &[ClozeExample]) -> Result<f64> {
    Ok(m.candidate_logits(examples)?.iter().flatten().sum())
}

#[test]
fn sweep_end_points_match_bare_and_full_models() {
    let m = adapted();
    let p = probes(20, 1);
    let rows = sweep_layers(&m, 0..=LAYERS, false, |x| logit_mass(x, &p)).unwrap();
    assert_eq!(rows.iter().map(|r| r.layers).collect::<Vec<_>>(), (0..=LAYERS).collect::<Vec<_>>());
    let bare = logit_mass(&Model::bare(m.encoder().unwrap()), &p).unwrap();
    assert_eq!(rows[0].metric, bare);
    assert_eq!(rows[LAYERS].metric, logit_mass(&m, &p).unwrap());
    for w in rows.windows(2) {
        assert_ne!(w[0].metric, w[1].metric);
    }
}

#[test]
fn parallel_sweep_keeps_order_and_values() {
    let m = adapted();
    let p = probes(10, 2);
    let seq = sweep_layers(&m, 1..=LAYERS, false, |x| logit_mass(x, &p)).unwrap();
    let par = sweep_layers(&m, 1..=LAYERS, true, |x| logit_mass(x, &p)).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn sweep_rejects_bad_inputs() {
    let m = adapted();
    let p = probes(4, 3);
    assert!(sweep_layers(&m, 0..=LAYERS + 1, false, |x| logit_mass(x, &p)).is_err());
    let bare = Model::bare(encoder());
    assert!(sweep_layers(&bare, 0..=1, false, |x| logit_mass(x, &p)).is_err());
}

#[test]
fn sweep_accuracy_at_zero_equals_plain_cloze_eval() {
    let m = adapted();
    let p = probes(30, 4);
    let rows = sweep_layers(&m, 0..=0, false, |x| Ok(eval_cloze(x, &p)?.accuracy)).unwrap();
    let bare = eval_cloze(&Model::bare(m.encoder().unwrap()), &p).unwrap();
    assert_eq!(rows[0].metric, bare.accuracy);
}

#[test]
fn retrained_sweep_starts_from_the_bare_backbone() {
    let enc = encoder();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seqs: Vec<Vec<u32>> = (0..24)
        .map(|_| {
            let mut s = vec![0];
            s.extend((0..10).map(|_| rng.random_range(5..40)));
            s.push(2);
            s
        })
        .collect();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        max_steps: 4,
        batch_size: 4,
        eval_every: 2,
        seq_len: 12,
        ..Default::default()
    };
    let p = probes(10, 5);
    let rows = sweep_layers_retrained(&enc, &AdapterConfig::default(), &seqs[..16], &seqs[16..], &cfg, 0..=2, false, |x| {
        logit_mass(x, &p)
    })
    .unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].1.is_none());
    assert_eq!(rows[0].0.metric, logit_mass(&Model::bare(enc), &p).unwrap());
    assert!(rows[1].1.is_some() && rows[2].1.is_some());
}

#[test]
fn zero_shot_evaluates_both_models_on_both_languages() {
    let m = adapted();
    let src = probes(10, 7);
    let tgt = probes(10, 8);
    let r = zero_shot(&m, "toy-a", "toy-b", |x, unseen| logit_mass(x, if unseen { &tgt } else { &src })).unwrap();
    let bare = Model::bare(m.encoder().unwrap());
    assert_eq!(r.source_language, "toy-a");
    assert_eq!(r.target_language, "toy-b");
    assert_eq!(r.adapter.source, logit_mass(&m, &src).unwrap());
    assert_eq!(r.adapter.target, logit_mass(&m, &tgt).unwrap());
    assert_eq!(r.bare.source, logit_mass(&bare, &src).unwrap());
    assert_eq!(r.bare.target, logit_mass(&bare, &tgt).unwrap());
    assert_ne!(r.adapter.target, r.bare.target);
}
