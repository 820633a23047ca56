use ialab::gradcheck::{check_op, check_scalar, op_catalog, OpCase, DEFAULT_STEP, DEFAULT_TOL};
use ialab::rng;
use ialab::tensor::{Tape, Tensor, TensorError, Var};
use proptest::prelude::*;

fn uniform(shape: &[usize], rng: &mut rng::Rng) -> Tensor {
    Tensor::rand_uniform(shape, -2.0, 2.0, rng)
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[&[0.7, 0.7, 0.7], &[0.0, 3f64.ln(), 0.0]]));
    let s = tape.softmax_rows(x).unwrap();
    let v = tape.value(s);
    for j in 0..3 {
        assert!((v.get(&[0, j]) - 1.0 / 3.0).abs() < 1e-15);
    }
    // exp(0) / (exp(0) + exp(ln 3)) = 1/4 when restricted to a 2-entry row
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[&[0.0, 3f64.ln()]]));
    let s = tape.softmax_rows(x).unwrap();
    let v = tape.value(s).data().to_vec();
    assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);

    let x = tape.constant(Tensor::from_rows(&[&[0.0, 1000.0]]));
    let s = tape.softmax_rows(x).unwrap();
    let v = tape.value(s).data();
    assert!(v[0] < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_rejects_non_finite() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[&[0.0, f64::NAN]]));
    assert!(matches!(tape.softmax_rows(x), Err(TensorError::NonFinite { .. })));
    let y = tape.constant(Tensor::from_rows(&[&[f64::INFINITY, 0.0]]));
    assert!(tape.softmax_rows(y).is_err());
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[&[-1.0, 2.0]]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 2.0]);

    let table = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let e = tape.embedding_lookup(table, &[0]).unwrap();
    assert_eq!(tape.value(e).data(), &[1.0, 2.0]);
    assert!(matches!(
        tape.embedding_lookup(table, &[2]),
        Err(TensorError::Index { index: 2, len: 2, .. })
    ));

    for c in [2usize, 7, 10] {
        let logits = tape.constant(Tensor::full(&[3, c], 0.3));
        let l = tape.cross_entropy(logits, &[Some(0), Some(c - 1), Some(1)]).unwrap();
        assert!((tape.value(l).data()[0] - (c as f64).ln()).abs() < 1e-12);
    }
    let logits = tape.constant(Tensor::zeros(&[1, 4]));
    assert!(tape.cross_entropy(logits, &[Some(4)]).is_err());
    assert!(tape.cross_entropy(logits, &[None]).is_err());
}

#[test]
fn backward_examples() {
    let x0 = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.25]).unwrap();

    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), Tensor::full(&[2, 3], 1.0));

    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let half = tape.scale(s, 0.5);
    tape.backward(half).unwrap();
    assert_eq!(tape.grad(x).unwrap(), x0);
}

#[test]
fn backward_error_paths() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(TensorError::BackwardTwice)));
    tape.zero_grad();
    tape.backward(s).unwrap();
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(&[2, 2], 1.0));
    let c = tape.constant(Tensor::full(&[2, 2], 3.0));
    let p = tape.mul(x, c).unwrap();
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), Tensor::full(&[2, 2], 3.0));
    assert!(tape.grad(c).is_none());
}

#[test]
fn softmax_cross_entropy_matches_finite_differences() {
    let mut r = rng::stream(11, 0);
    let logits = uniform(&[4, 5], &mut r);
    let report = check_scalar(&[logits], DEFAULT_STEP, |t, v| {
        t.cross_entropy(v[0], &[Some(1), Some(4), None, Some(0)])
    })
    .unwrap();
    assert!(report.passed(DEFAULT_TOL), "{}", report.max_rel_error);

    let logits = uniform(&[3, 6], &mut r);
    let report = check_scalar(&[logits], DEFAULT_STEP, |t, v| {
        let p = t.softmax_rows(v[0])?;
        let lp = t.matmul_nt(p, p)?;
        let s = t.sum(lp);
        Ok(s)
    })
    .unwrap();
    assert!(report.passed(DEFAULT_TOL), "{}", report.max_rel_error);
}

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut r = rng::stream(seed, 1);
        for OpCase { name, shapes, f } in op_catalog() {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(s, &mut r)).collect();
            let report = check_op(&inputs, DEFAULT_STEP, &mut r, f).unwrap();
            assert!(
                report.passed(DEFAULT_TOL),
                "{name} seed {seed}: {}",
                report.max_rel_error
            );
        }
    }
}

#[test]
fn split_and_merge_heads_are_inverse() {
    let mut r = rng::stream(3, 0);
    let x0 = uniform(&[6, 8], &mut r);
    let mut tape = Tape::new();
    let x = tape.constant(x0.clone());
    let s = tape.split_heads(x, 2, 4).unwrap();
    assert_eq!(tape.shape(s), &[8, 3, 2]);
    // batch 1, head 2, token 0 holds columns 4..6 of merged row 3
    let v = tape.value(s);
    assert_eq!(v.get(&[6, 0, 0]), x0.get(&[3, 4]));
    assert_eq!(v.get(&[6, 0, 1]), x0.get(&[3, 5]));
    let m = tape.merge_heads(s, 2, 4).unwrap();
    assert_eq!(tape.value(m), &x0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_normalised_and_shift_invariant(
        seed in any::<u64>(), rows in 1usize..5, cols in 1usize..9, shift in -50.0f64..50.0
    ) {
        let mut r = rng::stream(seed, 0);
        let x0 = Tensor::rand_uniform(&[rows, cols], -10.0, 10.0, &mut r);
        let mut shifted = x0.clone();
        for v in &mut shifted.data_mut()[..cols] {
            *v += shift;
        }
        let mut tape = Tape::new();
        let a = tape.constant(x0);
        let b = tape.constant(shifted);
        let sa = tape.softmax_rows(a).unwrap();
        let sb = tape.softmax_rows(b).unwrap();
        let (va, vb) = (tape.value(sa), tape.value(sb));
        for i in 0..rows {
            let sum: f64 = va.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(va.row(i).iter().all(|&p| p >= 0.0));
        }
        prop_assert!(va.max_abs_diff(vb) < 1e-12);
    }

    #[test]
    fn backward_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut r = rng::stream(seed, 0);
        let x0 = Tensor::rand_uniform(&[3, 4], -2.0, 2.0, &mut r);
        let w0 = Tensor::rand_uniform(&[4, 4], -2.0, 2.0, &mut r);
        let l1 = |t: &mut Tape, x: Var, w: Var| {
            let h = t.matmul(x, w).unwrap();
            let s = t.softmax_rows(h).unwrap();
            t.cross_entropy(s, &[Some(0), Some(2), Some(3)]).unwrap()
        };
        let l2 = |t: &mut Tape, x: Var, w: Var| {
            let h = t.matmul(x, w).unwrap();
            let n = t.layer_norm(h);
            let r = t.relu(n);
            t.mean(r)
        };
        let grads = |which: u8| {
            let mut t = Tape::new();
            let x = t.param(x0.clone());
            let w = t.param(w0.clone());
            let loss = match which {
                1 => l1(&mut t, x, w),
                2 => l2(&mut t, x, w),
                _ => {
                    let a = l1(&mut t, x, w);
                    let b = l2(&mut t, x, w);
                    let a = t.scale(a, alpha);
                    let b = t.scale(b, beta);
                    t.add(a, b).unwrap()
                }
            };
            t.backward(loss).unwrap();
            (t.grad(x).unwrap(), t.grad(w).unwrap())
        };
        let (g1, g2, g3) = (grads(1), grads(2), grads(3));
        for (a, b, c) in [(&g1.0, &g2.0, &g3.0), (&g1.1, &g2.1, &g3.1)] {
            for i in 0..a.numel() {
                let want = alpha * a.data()[i] + beta * b.data()[i];
                prop_assert!((c.data()[i] - want).abs() < 1e-10);
            }
        }
    }
}
