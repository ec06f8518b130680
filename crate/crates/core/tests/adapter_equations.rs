//! Adapter forwards against a plain-loop reimplementation, plus the
//! placement properties of the composed model.

use adapterlab::adapters::{
    language_adapter_forward, task_adapter_forward, AdapterConfig, AdapterKind, AdapterStack, BottleneckAdapter,
    PlacementPlan, Projections,
};
use adapterlab::encoder::{Encoder, EncoderConfig, InputBatch};
use adapterlab::model::{attach, Model};
use adapterlab::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-major `[rows, h]` values.
struct Rows {
    h: usize,
    data: Vec<f64>,
}

fn affine(x: &[f64], w: &[f64], b: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len();
    (0..out_dim)
        .map(|j| b[j] + (0..in_dim).map(|i| x[i] * w[i * out_dim + j]).sum::<f64>())
        .collect()
}

/// `U(ReLU(D(x))) + r`, one row at a time.
fn reference_bottleneck(p: &Projections, input: &Rows, residual: &Rows) -> Vec<f64> {
    let h = input.h;
    let d = p.down_b.numel();
    let mut out = Vec::with_capacity(input.data.len());
    for (x, r) in input.data.chunks(h).zip(residual.data.chunks(h)) {
        let hidden: Vec<f64> = affine(x, p.down_w.data(), p.down_b.data(), d)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let up = affine(&hidden, p.up_w.data(), p.up_b.data(), h);
        out.extend(up.iter().zip(r).map(|(u, r)| u + r));
    }
    out
}

fn random_adapter(rng: &mut ChaCha8Rng, kind: AdapterKind, h: usize, d: usize) -> BottleneckAdapter {
    let mut a = BottleneckAdapter::new(1, kind, h, d, 0.5, rng.random()).unwrap();
    a.proj.down_b = Tensor::randn(vec![d], 0.5, rng);
    a.proj.up_w = Tensor::randn(vec![d, h], 0.5, rng);
    a.proj.up_b = Tensor::randn(vec![h], 0.5, rng);
    a
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, h: usize) -> (Tensor, Rows) {
    let t = Tensor::randn(vec![n, h], 1.0, rng);
    let rows = Rows {
        h,
        data: t.data().to_vec(),
    };
    (t, rows)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn language_and_task_adapters_match_reference_on_100_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let h = rng.random_range(2..=24);
        let d = rng.random_range(1..=h);
        let n = rng.random_range(1..=5);
        let la = random_adapter(&mut rng, AdapterKind::Language, h, d);
        let dt = rng.random_range(1..=h);
        let ta = random_adapter(&mut rng, AdapterKind::Task, h, dt);
        let (ht, hr) = random_rows(&mut rng, n, h);
        let (rt, rr) = random_rows(&mut rng, n, h);

        let la_out = language_adapter_forward(&la, &ht, &rt).unwrap();
        let la_ref = reference_bottleneck(&la.proj, &hr, &rr);
        worst = worst.max(max_abs(la_out.data(), &la_ref));

        // stacked: the task adapter reads the language adapter's output
        let ta_out = task_adapter_forward(&ta, &la_out, &rt).unwrap();
        let ta_ref = reference_bottleneck(&ta.proj, &Rows { h, data: la_ref }, &rr);
        worst = worst.max(max_abs(ta_out.data(), &ta_ref));

        // no language adapter on the layer: the task adapter reads h_l
        let bare_out = task_adapter_forward(&ta, &ht, &rt).unwrap();
        worst = worst.max(max_abs(bare_out.data(), &reference_bottleneck(&ta.proj, &hr, &rr)));
    }
    assert!(worst < 1e-12, "worst deviation {worst:e}");
}

#[test]
fn zero_up_projection_passes_residual_through_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for kind in [AdapterKind::Language, AdapterKind::Task] {
        let a = BottleneckAdapter::new(3, kind, 16, 4, 0.7, 11).unwrap();
        let (h, _) = random_rows(&mut rng, 6, 16);
        let (r, _) = random_rows(&mut rng, 6, 16);
        let out = a.forward(&h, &r).unwrap();
        assert_eq!(out.data(), r.data());
    }
}

#[test]
fn identity_projections_add_hidden_to_residual() {
    let h = 5;
    let mut a = BottleneckAdapter::new(1, AdapterKind::Language, h, h, 0.0, 0).unwrap();
    let mut eye = vec![0.0; h * h];
    for i in 0..h {
        eye[i * h + i] = 1.0;
    }
    a.proj.down_w = Tensor::new(vec![h, h], eye.clone()).unwrap();
    a.proj.up_w = Tensor::new(vec![h, h], eye).unwrap();
    let hidden = Tensor::new(vec![2, h], (0..10).map(|v| v as f64 * 0.5).collect()).unwrap();
    let residual = Tensor::new(vec![2, h], (0..10).map(|v| 1.0 - v as f64).collect()).unwrap();
    let out = language_adapter_forward(&a, &hidden, &residual).unwrap();
    let expected: Vec<f64> = hidden.data().iter().zip(residual.data()).map(|(x, r)| x + r).collect();
    assert_eq!(out.data(), expected.as_slice());
}

#[test]
fn mismatched_shapes_are_rejected() {
    let a = BottleneckAdapter::new(1, AdapterKind::Language, 8, 2, 0.1, 0).unwrap();
    let h = Tensor::zeros(vec![3, 8]);
    let r = Tensor::zeros(vec![2, 8]);
    assert!(a.forward(&h, &r).is_err());
}

fn small_encoder() -> Encoder {
    let cfg = EncoderConfig {
        num_layers: 3,
        hidden: 16,
        heads: 2,
        ffn: 32,
        vocab_size: 30,
        max_positions: 10,
        dropout: 0.0,
        layer_norm_eps: 1e-5,
    };
    Encoder::new(cfg, 17).unwrap()
}

fn busy_stack(seed: u64) -> AdapterStack {
    let cfg = AdapterConfig { init_std: 0.3, ..Default::default() };
    let mut stack = AdapterStack::language(16, 3, &cfg, seed)
        .unwrap()
        .merge(AdapterStack::task(16, 3, &cfg, seed + 50).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for a in stack.language.values_mut().chain(stack.task.values_mut()) {
        a.proj.up_w = Tensor::randn(a.proj.up_w.shape().to_vec(), 0.3, &mut rng);
    }
    for s in &mut stack.invertible.as_mut().unwrap().steps {
        s.up_w = Tensor::randn(s.up_w.shape().to_vec(), 0.3, &mut rng);
    }
    stack
}

fn batch() -> InputBatch {
    InputBatch::new(2, 5, vec![0, 9, 14, 21, 2, 0, 5, 2, 1, 1], vec![1, 1, 1, 1, 1, 1, 1, 1, 0, 0]).unwrap()
}

#[test]
fn empty_plan_is_bit_identical_to_bare_backbone() {
    let enc = small_encoder();
    let bare = Model::bare(enc.clone());
    let attached = attach(enc, PlacementPlan::empty(), &busy_stack(1)).unwrap();
    let input = batch();
    assert_eq!(bare.hidden_states(&input).unwrap(), attached.hidden_states(&input).unwrap());
    assert_eq!(bare.mlm_logits(&input, None).unwrap(), attached.mlm_logits(&input, None).unwrap());
}

#[test]
fn fresh_adapters_leave_the_forward_unchanged() {
    let enc = small_encoder();
    let bare = Model::bare(enc.clone());
    let cfg = AdapterConfig::default();
    let stack = AdapterStack::language(16, 3, &cfg, 4).unwrap().merge(AdapterStack::task(16, 3, &cfg, 9).unwrap());
    let plan = PlacementPlan::language_prefix(3).with_task_layers(1..=3);
    let adapted = attach(enc, plan, &stack).unwrap();
    let input = batch();
    assert_eq!(bare.hidden_states(&input).unwrap(), adapted.hidden_states(&input).unwrap());
}

#[test]
fn growing_the_plan_only_changes_later_layers() {
    let enc = small_encoder();
    let stack = busy_stack(3);
    let input = batch();
    for i in 0..3 {
        let mut lower = attach(enc.clone(), PlacementPlan::language_prefix(i), &stack).unwrap();
        let mut upper = attach(enc.clone(), PlacementPlan::language_prefix(i + 1), &stack).unwrap();
        if i == 0 {
            // isolate the layer effect from the embedding-side adapter
            lower.plan.invertible = true;
            upper.plan.invertible = true;
        }
        let a = lower.layer_outputs(&input).unwrap();
        let b = upper.layer_outputs(&input).unwrap();
        for l in 0..i {
            assert_eq!(a[l], b[l], "layer {} differs between plans {i} and {}", l + 1, i + 1);
        }
        assert!(a[i].max_abs_diff(&b[i]) > 1e-9, "layer {} should change", i + 1);
    }
}

#[test]
fn task_adapter_without_language_adapter_on_last_layer() {
    let enc = small_encoder();
    let stack = busy_stack(8);
    let plan = PlacementPlan::language_prefix(2).with_task_layers(1..=3);
    let m = attach(enc, plan, &stack).unwrap();
    let out = m.hidden_states(&batch()).unwrap();
    assert!(out.all_finite());
}

#[test]
fn adapter_width_must_match_encoder() {
    let enc = small_encoder();
    let stack = AdapterStack::language(8, 3, &AdapterConfig::default(), 0).unwrap();
    assert!(attach(enc, PlacementPlan::language_prefix(3), &stack).is_err());
}

#[test]
fn plan_needs_attached_adapters() {
    let enc = small_encoder();
    let mut stack = busy_stack(2);
    stack.language.remove(&3);
    assert!(attach(enc, PlacementPlan::language_prefix(3), &stack).is_err());
}

#[test]
fn adapter_parameter_count_is_closed_form() {
    for (h, d) in [(768, 48), (768, 384), (64, 4), (7, 3), (1, 1)] {
        let a = BottleneckAdapter::new(1, AdapterKind::Task, h, d, 0.0, 0).unwrap();
        assert_eq!(a.param_count(), (2 * h * d + d + h) as u64);
    }
    assert!(BottleneckAdapter::new(1, AdapterKind::Task, 4, 0, 0.0, 0).is_err());
}
