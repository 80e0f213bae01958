use eatt::binarize::selective_project;
use eatt::gradcheck::{finite_difference, relative_error};
use eatt::{Error, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

fn eval1(f: impl Fn(&mut Tape<f64>, Var) -> eatt::Result<Var>, a: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let a = tape.leaf(a.clone());
    let out = f(&mut tape, a).unwrap();
    tape.value(out).clone()
}

/// Builds `Σ f(inputs) ∘ probe` and compares every input's gradient against
/// central differences.
fn grad_check(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> eatt::Result<Var>, seed: u64) -> f64 {
    let probe_for = |tape: &mut Tape<f64>, out: Var| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let p = rand_t(tape.value(out).shape(), &mut rng);
        tape.constant(p)
    };
    let loss_of = |xs: &[Tensor<f64>]| -> eatt::Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let p = probe_for(&mut tape, out);
        let m = tape.mul(out, p)?;
        let l = tape.sum_all(m)?;
        Ok(tape.value(l).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let p = probe_for(&mut tape, out);
    let m = tape.mul(out, p).unwrap();
    let l = tape.sum_all(m).unwrap();
    let grads = tape.backward(l).unwrap();
    let mut worst = 0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        assert_eq!(analytic.shape(), inputs[i].shape());
        let numeric = finite_difference(
            |x| {
                let mut xs = inputs.to_vec();
                xs[i] = x.clone();
                loss_of(&xs)
            },
            &inputs[i],
            1e-5,
        )
        .unwrap();
        worst = worst.max(relative_error(&analytic, &numeric).unwrap());
    }
    worst
}

/// Ten seeded random points per op.
fn check_op(shapes: &[&[usize]], f: impl Fn(&mut Tape<f64>, &[Var]) -> eatt::Result<Var> + Copy) {
    check_op_with(shapes, |_| true, f)
}

fn check_op_with(
    shapes: &[&[usize]],
    accept: impl Fn(&[Tensor<f64>]) -> bool,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> eatt::Result<Var> + Copy,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut done = 0;
    while done < 10 {
        let xs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_t(s, &mut rng)).collect();
        if !accept(&xs) {
            continue;
        }
        let err = grad_check(&xs, f, done);
        assert!(err <= 1e-4, "relative error {err}");
        done += 1;
    }
}

fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

#[test]
fn matmul_examples_and_oracle() {
    let b = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let mut tape = Tape::new();
    let i = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let bv = tape.leaf(b.clone());
    let r = tape.matmul(i, bv).unwrap();
    assert_eq!(tape.value(r), &b);
    let i3 = tape.leaf(Tensor::from_fn(vec![3, 3], |k| if k % 4 == 0 { 1.0 } else { 0.0 }));
    let r = tape.matmul(bv, i3).unwrap();
    assert_eq!(tape.value(r), &b);
    let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
    let y = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
    let r = tape.matmul(x, y).unwrap();
    assert_eq!(tape.value(r).data(), [11.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a32: Tensor<f32> = Tensor::uniform(vec![4, 5], 1.0, &mut rng);
    let b32: Tensor<f32> = Tensor::uniform(vec![5, 3], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (av, bv) = (tape.leaf(a32.clone()), tape.leaf(b32.clone()));
    let r = tape.matmul(av, bv).unwrap();
    let want = matmul_oracle(&a32.cast(), &b32.cast());
    let diff = tape.value(r).data().iter().zip(&want).map(|(g, w)| (*g as f64 - w).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-6);

    let e = tape.matmul(av, av).unwrap_err();
    assert!(matches!(e, Error::Dimension { ref left, ref right, .. } if left == &[4, 5] && right == &[4, 5]));
}

#[test]
fn softmax_examples() {
    let s = eval1(|tp, a| tp.softmax_rows(a, 1.0), &t(&[1, 3], &[0.0, 0.0, 0.0]));
    assert!(s.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    let s = eval1(|tp, a| tp.softmax_rows(a, 1.0), &t(&[1, 3], &[1.0, 2.0, 3.0]));
    // exp(k) / (e + e² + e³), evaluated at 30 significant digits.
    let want = [0.090030573170380458, 0.24472847105479765, 0.66524095577482189];
    for (g, w) in s.data().iter().zip(want) {
        assert!((g - w).abs() < 1e-12);
    }

    let mut tape = Tape::new();
    let a = tape.leaf(t(&[2, 2], &[0.7, 0.0, 0.0, 0.0]));
    let m = tape.add_mask(a, &t(&[2, 2], &[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0])).unwrap();
    let s = tape.softmax_rows(m, 1.0).unwrap();
    assert_eq!(tape.value(s).data(), [1.0, 0.0, 0.0, 1.0]);
    let dead = tape.add_mask(a, &t(&[2, 2], &[f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, 0.0])).unwrap();
    assert!(matches!(tape.softmax_rows(dead, 1.0), Err(Error::DegenerateRow { row: 0 })));
}

#[test]
fn l1_examples_and_oracle() {
    let mut tape = Tape::new();
    let q = tape.leaf(t(&[1, 1, 2], &[1.0, 2.0]));
    let k = tape.leaf(t(&[1, 1, 2], &[3.0, 0.0]));
    let r = tape.l1_pairwise(q, k).unwrap();
    assert_eq!(tape.value(r).data(), [4.0]);
    let r = tape.l1_pairwise(q, q).unwrap();
    assert_eq!(tape.value(r).data(), [0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (qa, ka) = (rand_t(&[1, 3, 4], &mut rng), rand_t(&[1, 2, 4], &mut rng));
    let q = tape.leaf(qa.clone());
    let k = tape.leaf(ka.clone());
    let r = tape.l1_pairwise(q, k).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for c in 0..4 {
                s += (qa.data()[i * 4 + c] - ka.data()[j * 4 + c]).abs();
            }
            assert_eq!(tape.value(r).data()[i * 2 + j], s);
        }
    }
    let bad = tape.leaf(rand_t(&[1, 2, 3], &mut rng));
    assert!(matches!(tape.l1_pairwise(q, bad), Err(Error::Dimension { .. })));
}

#[test]
fn l1_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let q = tape.leaf(t(&[1, 1, 2], &[1.0, 2.0]));
    let k = tape.leaf(t(&[1, 1, 2], &[1.0, 0.0]));
    let r = tape.l1_pairwise(q, k).unwrap();
    let l = tape.sum_all(r).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(q).unwrap().data(), [0.0, 1.0]);
    assert_eq!(g.get(k).unwrap().data(), [0.0, -1.0]);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
    let b = tape.leaf(t(&[2, 3], &[4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
    let s = tape.sum_all(a).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap(), &Tensor::ones(vec![2, 3]));
    let p = tape.mul(a, b).unwrap();
    let s = tape.sum_all(p).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap(), tape.value(b));

    let mut other = Tape::new();
    let foreign = other.leaf(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(foreign), Err(Error::Provenance)));
    assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss { .. })));
}

#[test]
fn overflow_is_caught_before_backward() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[2], &[1.0, 1000.0]));
    assert_eq!(tape.first_non_finite(), None);
    let e = tape.exp(a).unwrap();
    assert_eq!(tape.first_non_finite(), Some(1));
    let s = tape.sum_all(e).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::NonFinite(_))));
}

#[test]
fn elementwise_and_shape_ops() {
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t(&[2, 2], &[0.5, -1.0, 2.0, 0.0]);
    let mut tape = Tape::new();
    let (av, bv) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let cases: Vec<(Var, Vec<f64>)> = vec![
        (tape.add(av, bv).unwrap(), vec![1.5, 1.0, 5.0, 4.0]),
        (tape.sub(av, bv).unwrap(), vec![0.5, 3.0, 1.0, 4.0]),
        (tape.mul(av, bv).unwrap(), vec![0.5, -2.0, 6.0, 0.0]),
        (tape.scale(av, 2.0).unwrap(), vec![2.0, 4.0, 6.0, 8.0]),
        (tape.neg(bv).unwrap(), vec![-0.5, 1.0, -2.0, -0.0]),
        (tape.relu(bv).unwrap(), vec![0.5, 0.0, 2.0, 0.0]),
        (tape.sum_axis(av, 0).unwrap(), vec![4.0, 6.0]),
        (tape.sum_axis(av, 1).unwrap(), vec![3.0, 7.0]),
        (tape.transpose(av).unwrap(), vec![1.0, 3.0, 2.0, 4.0]),
        (tape.reshape(av, &[4]).unwrap(), vec![1.0, 2.0, 3.0, 4.0]),
        (tape.tile(bv, 2).unwrap(), vec![0.5, -1.0, 2.0, 0.0, 0.5, -1.0, 2.0, 0.0]),
    ];
    for (v, want) in cases {
        assert_eq!(tape.value(v).data(), want.as_slice());
    }
    let e = tape.exp(av).unwrap();
    for (g, x) in tape.value(e).data().iter().zip(a.data()) {
        assert_eq!(*g, x.exp());
    }
    let tiled = tape.tile(bv, 3).unwrap();
    assert_eq!(tape.value(tiled).shape(), [3, 2, 2]);
    assert!(tape.reshape(av, &[3]).is_err());
    let c = tape.leaf(t(&[1, 2], &[0.0, 0.0]));
    assert!(matches!(tape.add(av, c), Err(Error::Dimension { .. })));
    assert!(tape.sum_axis(av, 2).is_err());
}

#[test]
fn elementwise_ops_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (rand_t(&[3, 4], &mut rng), rand_t(&[3, 4], &mut rng));
    let mut tape = Tape::new();
    let (av, bv) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let ops: Vec<(Var, fn(f64, f64) -> f64)> = vec![
        (tape.add(av, bv).unwrap(), |x, y| x + y),
        (tape.sub(av, bv).unwrap(), |x, y| x - y),
        (tape.mul(av, bv).unwrap(), |x, y| x * y),
    ];
    for (v, f) in ops {
        for i in 0..12 {
            assert_eq!(tape.value(v).data()[i], f(a.data()[i], b.data()[i]));
        }
    }
    let tr = tape.transpose(av).unwrap();
    let s1 = tape.sum_axis(av, 1).unwrap();
    for i in 0..3 {
        let mut s = 0.0;
        for j in 0..4 {
            assert_eq!(tape.value(tr).data()[j * 3 + i], a.data()[i * 4 + j]);
            s += a.data()[i * 4 + j];
        }
        assert!((tape.value(s1).data()[i] - s).abs() < 1e-15);
    }
}

#[test]
fn argmax_and_masking() {
    let a = t(&[2, 3], &[1.0, 5.0, 2.0, 7.0, 0.0, 7.5]);
    assert_eq!(a.argmax(1).unwrap().data(), [1.0, 2.0]);
    assert_eq!(a.argmax(0).unwrap().data(), [1.0, 0.0, 1.0]);
    let m = eval1(|tp, x| tp.add_mask(x, &t(&[2, 3], &[0.0, f64::NEG_INFINITY, 0.0, 0.0, 0.0, f64::NEG_INFINITY])), &a);
    assert_eq!(m.data()[1], f64::NEG_INFINITY);
    assert_eq!(m.data()[0], 1.0);
    assert_eq!(m.argmax(1).unwrap().data(), [2.0, 0.0]);
}

#[test]
fn gradients_match_finite_differences() {
    check_op(&[&[3, 4], &[3, 4]], |tp, v| tp.add(v[0], v[1]));
    check_op(&[&[3, 4], &[3, 4]], |tp, v| tp.sub(v[0], v[1]));
    check_op(&[&[3, 4], &[3, 4]], |tp, v| tp.mul(v[0], v[1]));
    check_op(&[&[3, 4]], |tp, v| tp.scale(v[0], -1.7));
    check_op(&[&[3, 4]], |tp, v| tp.neg(v[0]));
    check_op(&[&[3, 4]], |tp, v| tp.exp(v[0]));
    check_op_with(&[&[3, 4]], |x| x[0].data().iter().all(|v| v.abs() > 1e-3), |tp, v| tp.relu(v[0]));
    check_op(&[&[2, 3, 4]], |tp, v| tp.sum_axis(v[0], 1));
    check_op(&[&[4, 5], &[5, 3]], |tp, v| tp.matmul(v[0], v[1]));
    check_op(&[&[2, 3, 5], &[5, 2]], |tp, v| tp.matmul(v[0], v[1]));
    check_op(&[&[2, 3, 4], &[2, 4, 2]], |tp, v| tp.bmm(v[0], v[1]));
    check_op(&[&[2, 3, 4]], |tp, v| tp.transpose(v[0]));
    check_op(&[&[2, 6]], |tp, v| tp.reshape(v[0], &[3, 4]));
    check_op(&[&[2, 3]], |tp, v| tp.tile(v[0], 3));
    check_op(&[&[2, 3, 4], &[4]], |tp, v| tp.add_bias(v[0], v[1]));
    check_op(&[&[2, 4, 5]], |tp, v| tp.slice_block(v[0], 3, 2));
    check_op(&[&[2, 3, 4]], |tp, v| {
        let s = tp.split_heads(v[0], 2)?;
        let e = tp.exp(s)?;
        tp.merge_heads(e, 2)
    });
    check_op(&[&[3, 4]], |tp, v| tp.softmax_rows(v[0], 0.7));
    check_op(&[&[3, 4]], |tp, v| {
        let mask = Tensor::from_fn(vec![3, 4], |i| if i % 4 > i / 4 + 1 { f64::NEG_INFINITY } else { 0.0 });
        let m = tp.add_mask(v[0], &mask)?;
        tp.softmax_rows(m, 1.0)
    });
    check_op_with(
        &[&[1, 3, 4], &[1, 2, 4]],
        |x| x[0].data().chunks(4).all(|q| x[1].data().chunks(4).all(|k| q.iter().zip(k).all(|(a, b)| (a - b).abs() > 1e-3))),
        |tp, v| tp.l1_pairwise(v[0], v[1]),
    );
    check_op(&[&[3, 4], &[4], &[4]], |tp, v| tp.layer_norm(v[0], v[1], v[2], 1e-5));
    check_op(&[&[5, 3]], |tp, v| tp.embedding(v[0], &[4, 0, 4, 2]));
    check_op(&[&[4, 5]], |tp, v| tp.cross_entropy(v[0], &[1, 0, 4, 4]));
    check_op(&[&[3, 4]], |tp, v| tp.dropout(v[0], Tensor::from_fn(vec![3, 4], |i| if i % 3 == 0 { 0.0 } else { 1.5 })));
}

#[test]
fn selective_projection_weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..10 {
        let mask = Tensor::from_fn(vec![1, 3, 5], |_| if rng.gen::<bool>() { 1.0 } else { 0.0 });
        let w = rand_t(&[5, 4], &mut rng);
        let err = grad_check(&[w], |tp, v| {
            let m = tp.constant(mask.clone());
            tp.selective_project(m, v[0])
        }, seed);
        assert!(err <= 1e-4);
    }
}

#[test]
fn selective_projection_equals_matmul_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let (l, d) = (rng.gen_range(1..=16), rng.gen_range(1..=64));
        let p: f64 = rng.gen();
        let mask = Tensor::<f32>::from_fn(vec![l, d], |_| if rng.gen::<f64>() < p { 1.0 } else { 0.0 });
        let w: Tensor<f32> = Tensor::uniform(vec![d, d], 1.0, &mut rng);
        let got = selective_project(&mask, &w).unwrap();
        // Ascending-index accumulation, the same order as the matmul kernel.
        let mut tape = Tape::new();
        let (m, wv) = (tape.constant(mask), tape.constant(w));
        let want = tape.matmul(m, wv).unwrap();
        assert_eq!(&got, tape.value(want));
    }
    let bad = t(&[1, 2], &[1.0, 0.5]);
    assert!(matches!(selective_project(&bad, &Tensor::ones(vec![2, 2])), Err(Error::NonBinary { index: 1, .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-30.0f64..30.0, 12), scale in 0.01f64..4.0) {
        let s = eval1(|tp, a| tp.softmax_rows(a, scale), &t(&[3, 4], &data));
        for r in 0..3 {
            let row = s.row(r);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn identity_matmul_is_exact(data in prop::collection::vec(-1e3f64..1e3, 6)) {
        let a = t(&[2, 3], &data);
        let eye = |n: usize| Tensor::from_fn(vec![n, n], move |k| if k % (n + 1) == 0 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let (av, i2, i3) = (tape.leaf(a.clone()), tape.leaf(eye(2)), tape.leaf(eye(3)));
        let l = tape.matmul(i2, av).unwrap();
        let r = tape.matmul(av, i3).unwrap();
        prop_assert_eq!(tape.value(l), &a);
        prop_assert_eq!(tape.value(r), &a);
    }

    #[test]
    fn l1_is_nonnegative_and_symmetric(q in prop::collection::vec(-5.0f64..5.0, 8), k in prop::collection::vec(-5.0f64..5.0, 8)) {
        let mut tape = Tape::new();
        let qv = tape.leaf(t(&[1, 2, 4], &q));
        let kv = tape.leaf(t(&[1, 2, 4], &k));
        let a = tape.l1_pairwise(qv, kv).unwrap();
        let b = tape.l1_pairwise(kv, qv).unwrap();
        let bt = tape.transpose(b).unwrap();
        prop_assert!(tape.value(a).data().iter().all(|v| *v >= 0.0));
        prop_assert_eq!(tape.value(a), tape.value(bt));
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..500) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_t(&[3, 5], &mut rng);
            let b = rand_t(&[5, 4], &mut rng);
            let mut tape = Tape::new();
            let (av, bv) = (tape.leaf(a), tape.leaf(b));
            let m = tape.matmul(av, bv).unwrap();
            let s = tape.softmax_rows(m, 1.0).unwrap();
            tape.value(s).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
