use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = numel(shape);
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts the output against fixed pseudo-random weights so every output
/// entry contributes a distinct gradient.
fn weighted_sum(g: &Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&shape, &mut rng);
    let prod = g.mul_const(y, w.data)?;
    Ok(g.sum(prod))
}

#[test]
fn matmul_examples() {
    let g = Graph::<f64>::new();
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t(&[2, 1], &[5.0, 6.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), vec![2, 1]);
    assert_eq!(g.data(c), vec![17.0, 39.0]);

    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let bb = g.constant(t(&[2, 2], &[0.3, -1.5, 2.25, 7.0]));
    let p = g.matmul(eye, bb).unwrap();
    assert_eq!(g.data(p), g.data(bb));

    let x = g.constant(t(&[2, 3], &[0.0; 6]));
    let y = g.constant(t(&[2, 3], &[0.0; 6]));
    match g.matmul(x, y) {
        Err(Error::Shape { op, left, right }) => {
            assert_eq!(op, "matmul");
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn batched_and_shared_matmul_layouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Graph::<f64>::new();
    let a = random(&[3, 2, 4], &mut rng);
    let b = random(&[3, 4, 5], &mut rng);
    let w = random(&[4, 5], &mut rng);
    let (va, vb, vw) = (g.constant(a.clone()), g.constant(b.clone()), g.constant(w.clone()));
    let batched = g.data(g.matmul(va, vb).unwrap());
    let shared = g.data(g.matmul(va, vw).unwrap());
    for bi in 0..3 {
        for i in 0..2 {
            for j in 0..5 {
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for p in 0..4 {
                    s1 += a.data[bi * 8 + i * 4 + p] * b.data[bi * 20 + p * 5 + j];
                    s2 += a.data[bi * 8 + i * 4 + p] * w.data[p * 5 + j];
                }
                assert!((batched[bi * 10 + i * 5 + j] - s1).abs() < 1e-12);
                assert!((shared[bi * 10 + i * 5 + j] - s2).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_examples() {
    let g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = g.data(g.softmax_masked(x, None).unwrap());
    y.iter().for_each(|v| assert!((v - 1.0 / 3.0).abs() < 1e-15));

    let x = g.constant(t(&[3], &[10.0, 10.0, 123.0]));
    let y = g.data(g.softmax_masked(x, Some(&[true, true, false])).unwrap());
    assert_eq!(y, vec![0.5, 0.5, 0.0]);

    let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let y = g.data(g.softmax_masked(x, None).unwrap());
    for (a, b) in y.iter().zip([0.09003, 0.24473, 0.66524]) {
        assert!((a - b).abs() < 1e-5);
    }

    let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert!(matches!(g.softmax_masked(x, Some(&[true, false, false, false])), Err(Error::DegenerateRow { row: 1 })));
}

#[test]
fn layer_norm_examples() {
    let g = Graph::<f64>::new();
    let gain = g.constant(t(&[3], &[1.0; 3]));
    let bias = g.constant(t(&[3], &[0.0; 3]));
    let c = g.constant(t(&[3], &[4.0, 4.0, 4.0]));
    assert_eq!(g.data(g.layer_norm(c, gain, bias, 1e-5).unwrap()), vec![0.0; 3]);

    let x = g.constant(t(&[3], &[2.0, 4.0, 6.0]));
    let y = g.data(g.layer_norm(x, gain, bias, 1e-5).unwrap());
    for (a, b) in y.iter().zip([-1.22474, 0.0, 1.22474]) {
        assert!((a - b).abs() < 1e-4);
    }

    let gain2 = g.constant(t(&[2], &[1.0; 2]));
    let bias2 = g.constant(t(&[2], &[0.0; 2]));
    let x = g.constant(t(&[2], &[1.0, -1.0]));
    let y = g.data(g.layer_norm(x, gain2, bias2, 1e-12).unwrap());
    assert!((y[0] - 1.0).abs() < 1e-9 && (y[1] + 1.0).abs() < 1e-9);
}

#[test]
fn elementwise_examples() {
    let g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[0.0, -3.0, 3.0]));
    assert_eq!(g.data(g.sigmoid(x))[0], 0.5);
    assert_eq!(&g.data(g.relu(x))[1..], &[0.0, 3.0]);
    let one = g.constant(t(&[1], &[1.0]));
    assert!((g.data(g.tanh(one))[0] - 0.76159).abs() < 1e-5);
    let bad = g.constant(t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.add(x, bad), Err(Error::Shape { .. })));
}

#[test]
fn backward_examples() {
    let g = Graph::<f64>::new();
    let w = g.param(t(&[3], &[1.0, 2.0, 3.0]));
    let s = g.sum(w);
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap(), vec![1.0, 1.0, 1.0]);

    let g = Graph::<f64>::new();
    let w = g.param(t(&[3], &[1.0, 2.0, 3.0]));
    let sq = g.mul(w, w).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap(), vec![2.0, 4.0, 6.0]);

    // repeated calls accumulate
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap(), vec![4.0, 8.0, 12.0]);

    assert!(matches!(g.backward(sq), Err(Error::NonScalarLoss(_))));
}

#[test]
fn fan_out_sums_both_contributions() {
    let x = t(&[2, 3], &[0.5, -0.2, 0.9, 1.1, -0.7, 0.3]);
    let report = grad_check(
        |g, v| {
            let a = g.tanh(v);
            let b = g.sigmoid(v);
            let c = g.mul(a, b)?;
            let d = g.add(c, v)?;
            weighted_sum(g, d, 1)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.checked, 6);
}

#[test]
fn grad_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[2, 4], &mut rng);
    let r = grad_check(|g, v| Ok(g.sum(v)), &x, 1e-4).unwrap();
    assert!(r.max_rel_error < 1e-9 && r.passed);

    let fixed = random(&[4], &mut rng);
    let r = grad_check(
        |g, v| {
            let row = g.reshape(v, &[1, 8])?;
            let row = g.slice(row, 1, 0, 4)?;
            let p = g.softmax_masked(row, None)?;
            let p = g.reshape(p, &[4])?;
            let d = g.mul_const(p, fixed.data.clone())?;
            Ok(g.sum(d))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");

    let kink = t(&[3], &[0.0, 1.0, -2.0]);
    let r = grad_check(|g, v| Ok(g.sum(g.relu(v))), &kink, 1e-4).unwrap();
    assert!(r.near_kink);
    assert_eq!(r.excluded, vec![(0, 0)]);
    assert_eq!(r.checked, 2);
    assert!(r.passed);
}

#[test]
fn shift_moves_along_axis_with_zero_fill() {
    let g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    assert_eq!(g.data(g.shift(x, 1, 1).unwrap()), vec![3.0, 4.0, 5.0, 6.0, 0.0, 0.0]);
    assert_eq!(g.data(g.shift(x, 1, -1).unwrap()), vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn label_smoothing_examples() {
    let g = Graph::<f64>::new();
    // gamma = 0 is plain cross-entropy
    let l = g.constant(t(&[1, 3], &[2.0, 0.0, 0.0]));
    let ce = g.scalar_value(g.label_smoothed_ce(l, &[0], &[true], 0.0).unwrap());
    let lse = (2f64.exp() + 2.0).ln();
    assert!((ce - (lse - 2.0)).abs() < 1e-12);

    let smooth = g.scalar_value(g.label_smoothed_ce(l, &[0], &[true], 0.1).unwrap());
    let logp = [2.0 - lse, -lse, -lse];
    let want = -(0.9 * logp[0] + 0.05 * logp[1] + 0.05 * logp[2]);
    assert!((smooth - want).abs() < 1e-6);

    let u = g.constant(t(&[2, 5], &[0.7; 10]));
    for gamma in [0.0, 0.1, 0.5] {
        let v = g.scalar_value(g.label_smoothed_ce(u, &[1, 3], &[true, true], gamma).unwrap());
        assert!((v - 5f64.ln()).abs() < 1e-12);
    }
    assert!(matches!(g.label_smoothed_ce(u, &[1, 3], &[false, false], 0.1), Err(Error::DegenerateBatch)));
}

#[test]
fn matmul_identity_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = Graph::<f64>::new();
    let a = g.constant(random(&[5, 5], &mut rng));
    let mut eye = vec![0.0; 25];
    (0..5).for_each(|i| eye[i * 6] = 1.0);
    let i = g.constant(t(&[5, 5], &eye));
    let (l, r) = (g.matmul(i, a).unwrap(), g.matmul(a, i).unwrap());
    for ((x, y), z) in g.data(l).iter().zip(g.data(r)).zip(g.data(a)) {
        assert!((x - z).abs() <= 1e-15 && (y - z).abs() <= 1e-15);
    }
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=8, 1usize..=8, 1usize..=8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, n in 1usize..8, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[rows, n], &mut rng);
        let mut mask: Vec<bool> = (0..rows * n).map(|_| rng.gen_bool(0.6)).collect();
        for r in 0..rows {
            mask[r * n] = true;
        }
        let g = Graph::<f64>::new();
        let v = g.constant(x);
        let y = g.data(g.softmax_masked(v, Some(&mask)).unwrap());
        for r in 0..rows {
            let s: f64 = y[r * n..(r + 1) * n].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for j in 0..n {
                if !mask[r * n + j] {
                    prop_assert_eq!(y[r * n + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn every_op_matches_finite_differences((a, b, c) in dims(), seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tol = 1e-4;
        let x = random(&[a, b], &mut rng);
        let y = random(&[b, c], &mut rng);
        let z = random(&[a, b], &mut rng);
        let bias = random(&[b], &mut rng);
        let gain = random(&[b], &mut rng);
        let check = |name: &str, f: &dyn Fn(&Graph<f64>, &[Var]) -> Result<Var>, xs: &[Tensor<f64>]| {
            let r = grad_check_many(f, xs, tol).unwrap();
            assert!(r.passed, "{name}: {r:?}");
        };
        check("matmul", &|g, v| { let o = g.matmul(v[0], v[1])?; weighted_sum(g, o, 1) }, &[x.clone(), y.clone()]);
        check("add", &|g, v| { let o = g.add(v[0], v[1])?; weighted_sum(g, o, 2) }, &[x.clone(), z.clone()]);
        check("sub", &|g, v| { let o = g.sub(v[0], v[1])?; weighted_sum(g, o, 3) }, &[x.clone(), z.clone()]);
        check("mul", &|g, v| { let o = g.mul(v[0], v[1])?; weighted_sum(g, o, 4) }, &[x.clone(), z.clone()]);
        check("add_broadcast", &|g, v| { let o = g.add_broadcast(v[0], v[1])?; weighted_sum(g, o, 5) }, &[x.clone(), bias.clone()]);
        check("sigmoid", &|g, v| weighted_sum(g, g.sigmoid(v[0]), 6), std::slice::from_ref(&x));
        check("tanh", &|g, v| weighted_sum(g, g.tanh(v[0]), 7), std::slice::from_ref(&x));
        check("relu", &|g, v| weighted_sum(g, g.relu(v[0]), 8), std::slice::from_ref(&x));
        check("scale", &|g, v| weighted_sum(g, g.scale(v[0], 2.5), 9), std::slice::from_ref(&x));
        check("concat", &|g, v| { let o = g.concat(&[v[0], v[1]], 1)?; weighted_sum(g, o, 10) }, &[x.clone(), z.clone()]);
        check("concat0", &|g, v| { let o = g.concat(&[v[0], v[1]], 0)?; weighted_sum(g, o, 11) }, &[x.clone(), z.clone()]);
        check("slice", &|g, v| { let o = g.slice(v[0], 1, b / 2, b - b / 2)?; weighted_sum(g, o, 12) }, std::slice::from_ref(&x));
        check("transpose", &|g, v| { let o = g.transpose(v[0])?; weighted_sum(g, o, 13) }, std::slice::from_ref(&x));
        check("softmax", &|g, v| { let o = g.softmax_masked(v[0], None)?; weighted_sum(g, o, 14) }, std::slice::from_ref(&x));
        check("layer_norm", &|g, v| { let o = g.layer_norm(v[0], v[1], v[2], 1e-5)?; weighted_sum(g, o, 15) }, &[x.clone(), gain.clone(), bias.clone()]);
        check("shift", &|g, v| { let o = g.shift(v[0], 0, 1)?; weighted_sum(g, o, 16) }, std::slice::from_ref(&x));
        check("psi", &|g, v| { let r = g.relu(v[0]); let o = g.psi_normalize(r, 1e-9)?; weighted_sum(g, o, 17) }, std::slice::from_ref(&x));
        check("mean", &|g, v| { let s = g.mul(v[0], v[0])?; Ok(g.mean(s)) }, std::slice::from_ref(&x));
        let targets: Vec<usize> = (0..a).map(|i| (i * 7) % b.max(2)).collect();
        let mask: Vec<bool> = (0..a).map(|i| i % 3 != 2).collect();
        if b >= 2 {
            check("smoothed_ce", &|g, v| g.label_smoothed_ce(v[0], &targets, &mask, 0.1), std::slice::from_ref(&x));
        }
        let ids: Vec<usize> = (0..c).map(|i| (i * 5) % a).collect();
        check("embed", &|g, v| { let o = g.embed(v[0], &ids, &[1, c], 1.7)?; weighted_sum(g, o, 18) }, std::slice::from_ref(&x));
        let x3 = random(&[2, a, b], &mut rng);
        check("permute", &|g, v| { let o = g.permute(v[0], &[1, 2, 0])?; weighted_sum(g, o, 19) }, std::slice::from_ref(&x3));
        check("fourier_mix", &|g, v| { let o = g.fourier_mix(v[0], &[a, a.div_ceil(2)])?; weighted_sum(g, o, 20) }, std::slice::from_ref(&x3));
        let w3 = random(&[2, b, c], &mut rng);
        check("bmm", &|g, v| { let o = g.matmul(v[0], v[1])?; weighted_sum(g, o, 21) }, &[x3.clone(), w3.clone()]);
        check("shared_left", &|g, v| { let o = g.matmul(v[0], v[1])?; weighted_sum(g, o, 22) }, &[x.clone(), w3]);
    }
}
