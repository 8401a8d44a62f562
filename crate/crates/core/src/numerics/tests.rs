use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{run_op_suite, DEFAULT_TOLERANCE};
use super::*;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Six nested loops, written without any of the range arithmetic of the kernel.
fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize, dil: usize) -> Tensor<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    let ow = (w + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    let mut out = Tensor::zeros(&[co, oh, ow]);
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky * dil) as isize - pad as isize;
                            let ix = (ox * stride + kx * dil) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x.at3(c, iy as usize, ix as usize) * k.data()[((o * ci + c) * kh + ky) * kw + kx];
                        }
                    }
                }
                out.data_mut()[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_box_sum() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::ones(&[1, 3, 3]));
    let k = t.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = t.conv2d(x, k, 1, 1, 1).unwrap();
    let v = t.value(y);
    assert_eq!(v.shape(), &[1, 3, 3]);
    assert_eq!(v.at3(0, 1, 1), 9.0);
    assert_eq!(v.at3(0, 0, 0), 4.0);
    assert_eq!(v.at3(0, 2, 2), 4.0);
    assert_eq!(v.at3(0, 0, 1), 6.0);
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = random(&mut rng, &[1, 4, 5]);
    let mut t = Tape::new();
    let x = t.constant(input.clone());
    let k = t.constant(Tensor::ones(&[1, 1, 1, 1]));
    let y = t.conv2d(x, k, 1, 0, 1).unwrap();
    assert_eq!(t.value(y), &input);
}

#[test]
fn conv_matches_naive_loops() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 5, 5]);
        let k = random(&mut rng, &[3, 2, 3, 3]);
        for &(s, p, d) in &[(1, 2, 2), (2, 1, 1), (1, 0, 1), (2, 3, 3)] {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let kv = t.constant(k.clone());
            let y = t.conv2d(xv, kv, s, p, d).unwrap();
            let expect = naive_conv(&x, &k, s, p, d);
            assert!(t.value(y).max_abs_diff(&expect) < 1e-6, "s={s} p={p} d={d}");
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::ones(&[2, 4, 4]));
    let k = t.constant(Tensor::ones(&[1, 3, 3, 3]));
    assert!(matches!(t.conv2d(x, k, 1, 1, 1), Err(crate::Error::Shape(_))));
    let k = t.constant(Tensor::ones(&[1, 2, 2, 2]));
    assert!(t.conv2d(x, k, 1, 1, 1).is_err());
}

#[test]
fn pooling_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::ones(&[1, 4, 4]));
    let y = t.avg_pool2d(x, 4).unwrap();
    assert_eq!(t.value(y).data(), &[1.0]);

    let mut one = Tensor::zeros(&[1, 4, 4]);
    one.data_mut()[5] = 1.0;
    let x = t.constant(one);
    let y = t.avg_pool2d(x, 4).unwrap();
    assert_eq!(t.value(y).data(), &[1.0 / 16.0]);

    assert!(t.avg_pool2d(x, 0).is_err());
}

#[test]
fn pooling_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[3, 8, 8]);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let y = t.avg_pool2d(xv, 2).unwrap();
    let mut expect = Tensor::zeros(&[3, 4, 4]);
    for c in 0..3 {
        for oy in 0..4 {
            for ox in 0..4 {
                let s = x.at3(c, 2 * oy, 2 * ox)
                    + x.at3(c, 2 * oy, 2 * ox + 1)
                    + x.at3(c, 2 * oy + 1, 2 * ox)
                    + x.at3(c, 2 * oy + 1, 2 * ox + 1);
                expect.data_mut()[(c * 4 + oy) * 4 + ox] = s / 4.0;
            }
        }
    }
    assert_eq!(t.value(y), &expect);
}

#[test]
fn pooling_zero_pads_ragged_extent() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::ones(&[1, 3, 5]));
    let y = t.avg_pool2d(x, 2).unwrap();
    assert_eq!(t.shape(y), &[1, 2, 3]);
    assert_eq!(t.value(y).data(), &[1.0, 1.0, 0.5, 0.5, 0.5, 0.25]);
}

#[test]
fn bilinear_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap());
    let y = t.bilinear_resize(x, 1, 4).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.25, 0.75, 1.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let r = random(&mut rng, &[2, 3, 4]);
    let x = t.constant(r.clone());
    let y = t.bilinear_resize(x, 3, 4).unwrap();
    assert_eq!(t.value(y), &r);

    let x = t.constant(Tensor::full(&[1, 3, 2], 0.37));
    let y = t.bilinear_resize(x, 11, 7).unwrap();
    assert!(t.value(y).data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    assert!(t.bilinear_resize(x, 0, 2).is_err());
}

#[test]
fn softmax_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
    let y = t.softmax(x, 0, 1.0).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);

    let x = t.constant(Tensor::new(&[2], vec![2f64.ln(), 0.0]).unwrap());
    let y = t.softmax(x, 0, 1.0).unwrap();
    let v = t.value(y).data();
    assert!((v[0] - 2.0 / 3.0).abs() < 1e-12 && (v[1] - 1.0 / 3.0).abs() < 1e-12);

    assert!(t.softmax(x, 0, 0.0).is_err());
    assert!(t.softmax(x, 0, -1.0).is_err());
    assert!(t.softmax(x, 1, 1.0).is_err());
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::new(&[3], vec![1000.0, 999.0, -1000.0]).unwrap());
    let y = t.softmax(x, 0, 0.01).unwrap();
    assert!(t.value(y).is_finite());
    assert!((t.value(y).sum() - 1.0).abs() < 1e-6);
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &x)| if x > best.1 { (i, x) } else { best },
        )
        .0
}

proptest! {
    #[test]
    fn softmax_normalized_and_order_preserving(
        logits in prop::collection::vec(-5.0f64..5.0, 2..12),
        temp in 0.01f64..10.0,
    ) {
        let n = logits.len();
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[n], logits.clone()).unwrap());
        let y = t.softmax(x, 0, temp).unwrap();
        let p = t.value(y).data();
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert_eq!(argmax(p), argmax(&logits));
    }

    #[test]
    fn softmax_columns_sum_to_one(
        data in prop::collection::vec(-3.0f64..3.0, 12),
        axis in 0usize..2,
    ) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[3, 4], data).unwrap());
        let y = t.softmax(x, axis, 0.7).unwrap();
        let v = t.value(y);
        if axis == 0 {
            for c in 0..4 {
                let s: f64 = (0..3).map(|r| v.at2(r, c)).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        } else {
            for r in 0..3 {
                let s: f64 = (0..4).map(|c| v.at2(r, c)).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn matmul_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[4, 5]);
    let b = random(&mut rng, &[5, 3]);
    let mut t = Tape::new();
    let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
    let c = t.matmul(av, bv).unwrap();
    for i in 0..4 {
        for j in 0..3 {
            let e: f64 = (0..5).map(|k| a.at2(i, k) * b.at2(k, j)).sum();
            assert!((t.value(c).at2(i, j) - e).abs() < 1e-12);
        }
    }
    assert!(t.matmul(bv, bv).is_err());
}

#[test]
fn elementwise_ops_match_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&mut rng, &[2, 3]);
    let b = random(&mut rng, &[2, 3]);
    let mut t = Tape::new();
    let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
    let s = t.add(av, bv).unwrap();
    let d = t.sub(av, bv).unwrap();
    let m = t.mul(av, bv).unwrap();
    let r = t.relu(av);
    let e = t.exp(av);
    for i in 0..6 {
        let (x, y) = (a.data()[i], b.data()[i]);
        assert_eq!(t.value(s).data()[i], x + y);
        assert_eq!(t.value(d).data()[i], x - y);
        assert_eq!(t.value(m).data()[i], x * y);
        assert_eq!(t.value(r).data()[i], x.max(0.0));
        assert_eq!(t.value(e).data()[i], x.exp());
    }
    let z = t.constant(Tensor::zeros(&[2]));
    let l = t.log(z);
    assert!(t.value(l).data().iter().all(|&v| (v - 1e-12f64.ln()).abs() < 1e-9));
    assert!(t.add(av, z).is_err());
}

#[test]
fn center_and_weighted_mean() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(&[3, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap());
    let c = t.center(x).unwrap();
    assert_eq!(t.value(c).data(), &[-1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let m = t.weighted_mean(x, &[1.0, 3.0]).unwrap();
    assert_eq!(t.shape(m), &[3, 1]);
    assert_eq!(t.value(m).data(), &[4.0, 4.25, 4.5]);
    let z = t.weighted_mean(x, &[0.0, 0.0]).unwrap();
    assert_eq!(t.value(z).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::<f64>::new();
    let target = vec![true, false, true, false];
    let mut perfect = vec![0.0; 8];
    for (i, &fg) in target.iter().enumerate() {
        perfect[usize::from(fg) * 4 + i] = 1.0;
    }
    let p = t.constant(Tensor::new(&[2, 2, 2], perfect).unwrap());
    let l = t.weighted_cross_entropy(p, &target, [0.05, 1.0]).unwrap();
    assert_eq!(t.value(l).item(), 0.0);

    let p = t.constant(Tensor::full(&[2, 2, 2], 0.5));
    let l = t.weighted_cross_entropy(p, &[true; 4], [0.05, 1.0]).unwrap();
    assert!((t.value(l).item() - 2f64.ln()).abs() < 1e-15);

    assert!(t.weighted_cross_entropy(p, &[true; 3], [0.05, 1.0]).is_err());
    assert!(t.weighted_cross_entropy(p, &[true; 4], [0.0, 1.0]).is_err());
}

#[test]
fn cross_entropy_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 25;
    let fg: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let target: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    let mut data: Vec<f64> = fg.iter().map(|p| 1.0 - p).collect();
    data.extend(&fg);
    let mut t = Tape::new();
    let p = t.constant(Tensor::new(&[2, 5, 5], data).unwrap());
    let l = t.weighted_cross_entropy(p, &target, [0.05, 1.0]).unwrap();
    let mut expect = 0.0;
    for i in 0..n {
        expect += if target[i] {
            -fg[i].max(1e-12).ln()
        } else {
            -0.05 * (1.0 - fg[i]).max(1e-12).ln()
        };
    }
    expect /= n as f64;
    assert!((t.value(l).item() - expect).abs() < 1e-8);
}

#[test]
fn backward_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = random(&mut rng, &[3, 2]);
    let mut t = Tape::new();
    let x = t.param(x0.clone());
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[1.0; 6]);

    let mut t = Tape::new();
    let x = t.param(x0.clone());
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &x0.map(|v| 2.0 * v));
}

#[test]
fn backward_rejects_non_scalar_and_accumulates() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::ones(&[3]));
    assert!(t.backward(x).is_err());
    let s = t.sum(x);
    t.backward(s).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2.0; 3]);
    t.zero_grad();
    assert!(t.grad(x).is_none());
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::ones(&[2]));
    let c = t.constant(Tensor::ones(&[2]));
    let y = t.mul(x, c).unwrap();
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert!(t.grad(c).is_none());
    assert!(!t.requires_grad(c));
    assert!(t.grad(x).is_some());
}

#[test]
fn backward_is_linear_in_the_loss() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(&mut rng, &[2, 4, 4]);
        let k0 = random(&mut rng, &[3, 2, 3, 3]);
        let build = |t: &mut Tape<f64>| {
            let x = t.param(x0.clone());
            let k = t.param(k0.clone());
            let y = t.conv2d(x, k, 1, 1, 1).unwrap();
            let a = t.softmax(y, 0, 0.5).unwrap();
            let la = gradcheck::project(t, a, seed).unwrap();
            let r = t.relu(y);
            let lb = gradcheck::project(t, r, seed + 100).unwrap();
            (x, k, la, lb)
        };
        let mut t1 = Tape::new();
        let (x1, k1, la, lb) = build(&mut t1);
        let total = t1.add(la, lb).unwrap();
        t1.backward(total).unwrap();

        let mut t2 = Tape::new();
        let (x2, k2, la, lb) = build(&mut t2);
        t2.backward(la).unwrap();
        t2.backward(lb).unwrap();

        assert!(t1.grad(x1).unwrap().max_abs_diff(t2.grad(x2).unwrap()) < 1e-10);
        assert!(t1.grad(k1).unwrap().max_abs_diff(t2.grad(k2).unwrap()) < 1e-10);
    }
}

#[test]
fn every_op_passes_finite_differences() {
    let checks = run_op_suite(0, 10, DEFAULT_TOLERANCE).unwrap();
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}
