use nartts::tensor::{grad_check, Ctx, GradCheckOptions, Graph, ParamStore, Precision, Var};
use nartts::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn g() -> Graph {
    Graph::new(Precision::High)
}

#[test]
fn elementwise_examples() {
    let mut g = g();
    let x = g.leaf(&[1], vec![0.0]).unwrap();
    let sp = g.softplus(x);
    assert!(close(g.item(sp), 2f64.ln(), 1e-15));

    let r = g.constant(&[2], vec![-3.5, 2.0]).unwrap();
    let r = g.relu(r);
    assert_eq!(g.value(r), &[0.0, 2.0]);

    let s = g.sigmoid(x);
    assert_eq!(g.item(s), 0.5);
    let loss = g.sum(s);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25]);
}

#[test]
fn broadcast_mismatch_reports_both_shapes() {
    let mut g = g();
    let a = g.zeros(&[2, 3]);
    let b = g.zeros(&[4]);
    match g.add(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn broadcast_backward_reduces() {
    let mut g = g();
    let a = g.leaf(&[2, 3], vec![1.0; 6]).unwrap();
    let b = g.leaf(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let c = g.mul(a, b).unwrap();
    let l = g.sum(c);
    g.backward(l).unwrap();
    assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
    assert_eq!(g.grad(a).unwrap(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
}

#[test]
fn matmul_examples() {
    let mut g = g();
    let eye = g.constant(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let v = g.constant(&[3], vec![0.3, -1.2, 7.0]).unwrap();
    let out = g.matmul(eye, v).unwrap();
    assert_eq!(g.shape(out), &[3]);
    assert_eq!(g.value(out), &[0.3, -1.2, 7.0]);

    let a = g.constant(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
    let b = g.constant(&[2, 1], vec![1., 1.]).unwrap();
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out), &[3.0, 7.0]);

    let bad = g.constant(&[3, 1], vec![1.; 3]).unwrap();
    assert!(matches!(g.matmul(a, bad), Err(Error::Shape { .. })));
}

/// Plain-loop oracle: sum(a x b) for row-major a [m,k], b [k,n].
fn sum_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
        }
    }
    s
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (m, k, n) = (4, 5, 3);
    let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();

    let h = 1e-5;
    let mut fd = vec![0.0; m * k];
    for i in 0..m * k {
        let mut ap = a.clone();
        ap[i] += h;
        let mut am = a.clone();
        am[i] -= h;
        fd[i] = (sum_matmul(&ap, &b, m, k, n) - sum_matmul(&am, &b, m, k, n)) / (2.0 * h);
    }
    // ones(4,3) x b^T
    let mut closed = vec![0.0; m * k];
    for i in 0..m {
        for p in 0..k {
            closed[i * k + p] = (0..n).map(|j| b[p * n + j]).sum();
        }
    }

    let mut g = g();
    let va = g.leaf(&[m, k], a.clone()).unwrap();
    let vb = g.leaf(&[k, n], b.clone()).unwrap();
    let c = g.matmul(va, vb).unwrap();
    let l = g.sum(c);
    g.backward(l).unwrap();
    for i in 0..m * k {
        let an = g.grad(va).unwrap()[i];
        assert!(close(an, fd[i], 1e-8), "entry {i}: {an} vs fd {}", fd[i]);
        assert!(close(an, closed[i], 1e-12));
    }
}

#[test]
fn batched_matmul_broadcasts_leading_dims() {
    let mut g = g();
    let a = g.constant(&[2, 1, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
    let b = g.constant(&[3, 2, 1], vec![1., 0., 0., 1., 1., 1.]).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 3, 2, 1]);
    // first batch, rhs [1,0]: picks column 0 of a[0] = [0, 2]
    assert_eq!(&g.value(c)[0..2], &[0.0, 2.0]);
    // second batch of a, rhs [1,1]: row sums of [[4,5],[6,7]]
    assert_eq!(&g.value(c)[10..12], &[9.0, 13.0]);
}

#[test]
fn softmax_examples() {
    let mut g = g();
    let x = g.constant(&[3], vec![0.0; 3]).unwrap();
    let y = g.softmax(x, 0).unwrap();
    for v in g.value(y) {
        assert!(close(*v, 1.0 / 3.0, 1e-15));
    }
    let x = g.constant(&[2], vec![1000.0, 1000.0]).unwrap();
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5]);
    assert!(g.softmax(x, 1).is_err());
}

fn softmax_plain(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    let x0 = [0.1, 0.2, 0.3];
    let h = 1e-5;
    for out_idx in 0..3 {
        let mut g = g();
        let x = g.leaf(&[3], x0.to_vec()).unwrap();
        let y = g.softmax(x, 0).unwrap();
        let pick = g.narrow(y, 0, out_idx, 1).unwrap();
        let l = g.sum(pick);
        g.backward(l).unwrap();
        for j in 0..3 {
            let mut p = x0;
            p[j] += h;
            let mut m = x0;
            m[j] -= h;
            let fd = (softmax_plain(&p)[out_idx] - softmax_plain(&m)[out_idx]) / (2.0 * h);
            let an = g.grad(x).unwrap()[j];
            assert!(close(an, fd, 1e-9), "d y{out_idx}/d x{j}: {an} vs {fd}");
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = g();
    let gain = g.constant(&[4], vec![1.0; 4]).unwrap();
    let bias = g.constant(&[4], vec![0.0; 4]).unwrap();
    let x = g.constant(&[4], vec![2.5; 4]).unwrap();
    let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
    assert!(g.value(y).iter().all(|v| *v == 0.0));

    let gain = g.constant(&[2], vec![1.0; 2]).unwrap();
    let bias = g.constant(&[2], vec![0.0; 2]).unwrap();
    let x = g.constant(&[2], vec![1.0, 3.0]).unwrap();
    let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
    let want = 1.0 / (1.0f64 + 1e-6).sqrt();
    assert!(close(g.value(y)[0], -want, 1e-15));
    assert!(close(g.value(y)[1], want, 1e-15));
}

#[test]
fn backward_examples() {
    let mut g = g();
    let p = g.leaf(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();
    assert_eq!(g.grad(p).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g2 = Graph::new(Precision::High);
    let p = g2.leaf(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let sq = g2.mul(p, p).unwrap();
    let l = g2.sum(sq);
    g2.backward(l).unwrap();
    assert_eq!(g2.grad(p).unwrap(), &[2.0, -4.0, 1.0]);
    // repeated calls add
    g2.backward(l).unwrap();
    assert_eq!(g2.grad(p).unwrap(), &[4.0, -8.0, 2.0]);

    let v = g2.leaf(&[2], vec![1.0, 1.0]).unwrap();
    assert!(matches!(g2.backward(v), Err(Error::NonScalarLoss(_))));
}

#[test]
fn fan_out_accumulates_both_paths() {
    // y = x*3 + exp(x) at x = 0.5; dy/dx = 3 + e^0.5
    let mut g = g();
    let x = g.leaf(&[1], vec![0.5]).unwrap();
    let a = g.scale(x, 3.0);
    let b = g.exp(x);
    let y = g.add(a, b).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert!(close(g.grad(x).unwrap()[0], 3.0 + 0.5f64.exp(), 1e-15));
}

#[test]
fn standard_precision_rounds_to_single() {
    let mut g = Graph::new(Precision::Standard);
    let x = g.constant(&[1], vec![0.1]).unwrap();
    assert_eq!(g.value(x)[0], 0.1f32 as f64);
}

fn linear_l2_store(seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    s.add("w", &[3, 2], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(), true).unwrap();
    s.add("b", &[2], vec![0.1, -0.2], true).unwrap();
    s
}

fn linear_l2(cx: &mut Ctx<'_>) -> nartts::Result<Var> {
    let params = cx.params();
    let (w, b) = (params.id("w").unwrap(), params.id("b").unwrap());
    let x = cx.g.constant(&[4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let t = cx.g.constant(&[4, 2], (0..8).map(|i| (i as f64 * 0.11).cos()).collect())?;
    let w = cx.param(w);
    let b = cx.param(b);
    let y = cx.g.matmul(x, w)?;
    let y = cx.g.add(y, b)?;
    let d = cx.g.sub(y, t)?;
    let d = cx.g.square(d);
    Ok(cx.g.sum(d))
}

#[test]
fn grad_check_linear_l2_is_exact() {
    let mut s = linear_l2_store(3);
    let r = grad_check(&mut s, &GradCheckOptions::default(), linear_l2).unwrap();
    assert!(r.max_rel_error() < 1e-8, "{:?}", r.params);
}

#[test]
fn grad_check_flags_corrupted_backward() {
    let mut s = linear_l2_store(3);
    let opts = GradCheckOptions {
        corrupt: Some((s.id("w").unwrap(), 1.01)),
        ..Default::default()
    };
    let r = grad_check(&mut s, &opts, linear_l2).unwrap();
    assert!(!r.passed());
    assert_eq!(r.failures().len(), 1);
    assert_eq!(r.failures()[0].name, "w");
}

#[test]
fn grad_check_rejects_nondeterminism() {
    use std::cell::Cell;
    let mut s = linear_l2_store(3);
    let calls = Cell::new(0u32);
    let r = grad_check(&mut s, &GradCheckOptions::default(), |cx| {
        calls.set(calls.get() + 1);
        let l = linear_l2(cx)?;
        Ok(cx.g.add_scalar(l, calls.get() as f64 * 1e-3))
    });
    assert!(matches!(r, Err(Error::NonDeterministic { .. })));
}

/// One scalar loss per differentiable op, each a random weighted sum of the
/// op output so every Jacobian entry is exercised.
fn op_loss(op: usize, cx: &mut Ctx<'_>) -> nartts::Result<Var> {
    let p = cx.params();
    let a = cx.param(p.id("a").unwrap());
    let b = cx.param(p.id("b").unwrap());
    let y = match op {
        0 => cx.g.add(a, b)?,
        1 => cx.g.sub(a, b)?,
        2 => cx.g.mul(a, b)?,
        3 => {
            let d = cx.g.add_scalar(b, 3.0);
            cx.g.div(a, d)?
        }
        4 => cx.g.sigmoid(a),
        5 => cx.g.tanh(a),
        6 => cx.g.softplus(a),
        7 => cx.g.exp(a),
        8 => {
            let s = cx.g.square(a);
            let s = cx.g.add_scalar(s, 0.5);
            cx.g.log(s)
        }
        9 => {
            let bt = cx.g.reshape(b, &[4, 3])?;
            let bt = cx.g.narrow(bt, 0, 0, 4)?;
            cx.g.matmul(a, bt)?
        }
        10 => cx.g.softmax(a, 1)?,
        11 => cx.g.softmax(a, 2)?,
        12 => {
            let gain = cx.param(p.id("gain").unwrap());
            let bias = cx.param(p.id("bias").unwrap());
            cx.g.layer_norm(a, gain, bias, 1e-6)?
        }
        13 => cx.g.permute(a, &[2, 0, 1])?,
        14 => cx.g.concat(&[a, a], 1)?,
        15 => cx.g.sum_axis(a, 1)?,
        16 => {
            let t = cx.g.reshape(a, &[6, 4])?;
            cx.g.gather_rows(t, &[Some(1), None, Some(5), Some(1)])?
        }
        17 => cx.g.unfold(a, 3, 2, 1, 2)?,
        18 => {
            let k = cx.param(p.id("kernel").unwrap());
            let k = cx.g.softmax(k, 1)?;
            cx.g.light_conv(a, k, false)?
        }
        19 => {
            let k = cx.param(p.id("kernel").unwrap());
            cx.g.light_conv(a, k, true)?
        }
        20 => {
            let s = cx.g.square(a);
            let s = cx.g.add_scalar(s, 0.1);
            cx.g.sqrt(s)
        }
        _ => unreachable!(),
    };
    let shape = cx.g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) as f64 * 0.61).sin()).collect();
    let w = cx.g.constant(&shape, w)?;
    let z = cx.g.mul(y, w)?;
    Ok(cx.g.sum(z))
}

const NUM_OPS: usize = 21;

fn op_store(seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<f64>>();
    let mut s = ParamStore::new();
    s.add("a", &[2, 3, 4], r(24), true).unwrap();
    s.add("b", &[3, 4], r(12), true).unwrap();
    s.add("gain", &[4], r(4), true).unwrap();
    s.add("bias", &[4], r(4), true).unwrap();
    s.add("kernel", &[2, 3], r(6), true).unwrap();
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_op_matches_finite_differences(seed in 0u64..1_000_000) {
        for op in 0..NUM_OPS {
            let mut s = op_store(seed);
            let r = grad_check(&mut s, &GradCheckOptions::default(), |cx| op_loss(op, cx)).unwrap();
            prop_assert!(r.passed(), "op {} seed {}: {:?}", op, seed, r.failures());
        }
    }

    #[test]
    fn softmax_rows_are_a_simplex(vals in proptest::collection::vec(-50.0f64..50.0, 12), axis in 0usize..2) {
        let mut g = Graph::new(Precision::High);
        let x = g.constant(&[3, 4], vals).unwrap();
        let y = g.softmax(x, axis).unwrap();
        let s = g.sum_axis(y, axis).unwrap();
        for v in g.value(y) {
            prop_assert!(*v >= 0.0 && *v <= 1.0);
        }
        for v in g.value(s) {
            prop_assert!((v - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn relu_and_abs_gradients_away_from_kinks() {
    let mut g = g();
    let x = g.leaf(&[4], vec![-1.0, 0.5, -0.01, 2.0]).unwrap();
    let r = g.relu(x);
    let a = g.abs(x);
    let y = g.add(r, a).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[-1.0, 2.0, -1.0, 2.0]);
}
