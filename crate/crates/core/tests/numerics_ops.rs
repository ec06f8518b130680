use std::sync::Arc;

use adapterlab::numerics::gradcheck::{analytic_gradients, compare_gradients};
use adapterlab::numerics::{finite_difference_check, Bindings, Graph, ParameterSet, Tensor, Var};
use adapterlab::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn params(specs: &[(&str, Vec<usize>)], seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParameterSet::new();
    for (name, shape) in specs {
        ps.insert(*name, Tensor::randn(shape.clone(), 1.0, &mut rng), true).unwrap();
    }
    ps
}

/// Weighted sum so that every output entry gets a distinct upstream gradient.
fn probe(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.value(x).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
    let w = g.constant(Tensor::new(g.shape(x).to_vec(), w)?);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn check<F>(ps: &ParameterSet, f: F)
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var>,
{
    let report = finite_difference_check(f, ps, STEP, TOL).unwrap();
    assert!(
        report.passed(),
        "max relative error {} at {:?}",
        report.max_relative_error,
        report.worst_parameter
    );
}

#[test]
fn sum_of_squares_is_nearly_exact() {
    let ps = params(&[("x", vec![3, 4])], 1);
    let report = finite_difference_check(
        |g, b| {
            let x = b.get("x")?;
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        },
        &ps,
        STEP,
        1e-8,
    )
    .unwrap();
    assert!(report.passed(), "{}", report.max_relative_error);
}

#[test]
fn corrupted_gradient_fails_check() {
    let ps = params(&[("x", vec![2, 3])], 2);
    let f = |g: &mut Graph, b: &Bindings| {
        let x = b.get("x")?;
        let sq = g.mul(x, x)?;
        Ok(g.sum(sq))
    };
    let mut analytic = analytic_gradients(&f, &ps).unwrap();
    analytic.get_mut("x").unwrap().data_mut()[4] += 1.0;
    let report = compare_gradients(&f, &ps, &analytic, STEP, TOL).unwrap();
    assert!(!report.passed());
}

#[test]
fn nondeterministic_objective_is_rejected() {
    let ps = params(&[("x", vec![2])], 3);
    let counter = std::cell::Cell::new(0.0);
    let f = |g: &mut Graph, b: &Bindings| {
        counter.set(counter.get() + 1.0);
        let x = b.get("x")?;
        let s = g.sum(x);
        let c = g.constant(Tensor::scalar(counter.get()));
        g.add(s, c)
    };
    assert!(finite_difference_check(f, &ps, STEP, TOL).is_err());
}

#[test]
fn linear_and_bias() {
    let ps = params(&[("x", vec![2, 3, 4]), ("w", vec![4, 5]), ("b", vec![5])], 4);
    check(&ps, |g, b| {
        let y = g.matmul(b.get("x")?, b.get("w")?, false)?;
        let y = g.add_bias(y, b.get("b")?)?;
        probe(g, y)
    });
}

#[test]
fn matmul_transposed_weight() {
    let ps = params(&[("x", vec![3, 4]), ("w", vec![5, 4])], 5);
    check(&ps, |g, b| {
        let y = g.matmul(b.get("x")?, b.get("w")?, true)?;
        probe(g, y)
    });
}

#[test]
fn batch_matmul_both_layouts() {
    let ps = params(&[("a", vec![2, 3, 4]), ("b", vec![2, 4, 2]), ("c", vec![2, 5, 4])], 6);
    check(&ps, |g, b| {
        let y = g.batch_matmul(b.get("a")?, b.get("b")?, false)?;
        let z = g.batch_matmul(b.get("a")?, b.get("c")?, true)?;
        let s1 = probe(g, y)?;
        let s2 = probe(g, z)?;
        g.add(s1, s2)
    });
}

#[test]
fn permute_and_reshape() {
    let ps = params(&[("x", vec![2, 3, 2, 2])], 7);
    check(&ps, |g, b| {
        let y = g.permute(b.get("x")?, &[0, 2, 1, 3])?;
        let y = g.reshape(y, &[4, 6])?;
        probe(g, y)
    });
}

#[test]
fn pointwise_nonlinearities() {
    let ps = params(&[("x", vec![3, 5])], 8);
    check(&ps, |g, b| {
        let x = b.get("x")?;
        let r = g.relu(x);
        let ge = g.gelu(x);
        let s = g.sigmoid(x);
        let a = g.abs(x);
        let t = g.add(r, ge)?;
        let t = g.add(t, s)?;
        let t = g.add(t, a)?;
        probe(g, t)
    });
}

#[test]
fn softmax_variants() {
    let ps = params(&[("x", vec![4, 3, 3])], 9);
    check(&ps, |g, b| {
        let x = b.get("x")?;
        let s = g.softmax(x);
        let m = g.masked_softmax(x, Arc::new(vec![true, false, true, true, true, false]), 2)?;
        let t = g.add(s, m)?;
        probe(g, t)
    });
}

#[test]
fn layer_norm_all_inputs() {
    let ps = params(&[("x", vec![3, 6]), ("gamma", vec![6]), ("beta", vec![6])], 10);
    check(&ps, |g, b| {
        let y = g.layer_norm(b.get("x")?, b.get("gamma")?, b.get("beta")?, 1e-5)?;
        probe(g, y)
    });
}

#[test]
fn gathers_slices_and_concat() {
    let ps = params(&[("table", vec![5, 4]), ("x", vec![3, 4])], 11);
    check(&ps, |g, b| {
        let e = g.embedding(b.get("table")?, &[0, 3, 3, 1])?;
        let r = g.gather_rows(b.get("x")?, &[2, 2, 0, 1])?;
        let lo = g.slice_last(e, 0, 2)?;
        let hi = g.slice_last(r, 1, 3)?;
        let c = g.concat_last(&[hi, lo])?;
        probe(g, c)
    });
}

#[test]
fn pooling_and_normalization() {
    let ps = params(&[("x", vec![2, 3, 4])], 12);
    check(&ps, |g, b| {
        let m = g.masked_mean(b.get("x")?, &[1.0, 1.0, 0.0, 1.0, 0.0, 0.0])?;
        let n = g.l2_normalize(m)?;
        probe(g, n)
    });
}

#[test]
fn losses() {
    let ps = params(&[("logits", vec![4, 5]), ("z", vec![3]), ("sim", vec![4, 4])], 13);
    check(&ps, |g, b| {
        let ce = g.cross_entropy(b.get("logits")?, &[Some(1), None, Some(4), Some(0)])?;
        let bce = g.bce_with_logits(b.get("z")?, &[1.0, 0.0, 1.0])?;
        let nll = g.in_batch_nll(
            b.get("sim")?,
            &[vec![1], vec![0], vec![3, 1], vec![]],
            &[Some(0), Some(1), Some(2), Some(3)],
        )?;
        let t = g.add(ce, bce)?;
        let t = g.add(t, nll)?;
        let m = g.mean(t);
        Ok(g.scale(m, 2.0))
    });
}

#[test]
fn two_layer_mlp() {
    let ps = params(
        &[("x", vec![4, 6]), ("w1", vec![6, 8]), ("b1", vec![8]), ("w2", vec![8, 3]), ("b2", vec![3])],
        14,
    );
    check(&ps, |g, b| {
        let h = g.matmul(b.get("x")?, b.get("w1")?, false)?;
        let h = g.add_bias(h, b.get("b1")?)?;
        let h = g.gelu(h);
        let o = g.matmul(h, b.get("w2")?, false)?;
        let o = g.add_bias(o, b.get("b2")?)?;
        g.cross_entropy(o, &[Some(0), Some(2), Some(1), Some(1)])
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let y = g.softmax(x);
        for r in 0..3 {
            let row = g.value(y).row(r);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(vals in prop::collection::vec(-10.0f64..10.0, 16), spread in 0.5f64..5.0) {
        let vals: Vec<f64> = vals.iter().enumerate().map(|(i, v)| v + spread * i as f64).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 8], vals).unwrap());
        let gamma = g.constant(Tensor::full(vec![8], 1.0));
        let beta = g.constant(Tensor::zeros(vec![8]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        for r in 0..2 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn relu_is_nonnegative_and_identity_on_nonnegatives(vals in prop::collection::vec(-5.0f64..5.0, 10)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![10], vals.clone()).unwrap());
        let y = g.relu(x);
        for (o, i) in g.value(y).data().iter().zip(&vals) {
            prop_assert!(*o >= 0.0);
            if *i >= 0.0 {
                prop_assert_eq!(o, i);
            }
        }
    }
}
