use proptest::prelude::*;
use vsumm::autodiff::Tape;
use vsumm::gradcheck::GradChecker;
use vsumm::{Error, Tensor};

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let x = (i as u64).wrapping_mul(6364136223846793005).wrapping_add(seed.wrapping_mul(1442695040888963407));
            ((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Direct summation over the padded input, written without the library's
/// index helpers.
fn conv_oracle(x: &Tensor, k: &Tensor, b: Option<&Tensor>, s: [usize; 3], p: [usize; 3]) -> (Vec<usize>, Vec<f64>) {
    let (t, ci, w, h) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kt, kw, kh) = (k.shape()[0], k.shape()[2], k.shape()[3], k.shape()[4]);
    let ot = (t + 2 * p[0] - kt) / s[0] + 1;
    let ow = (w + 2 * p[1] - kw) / s[1] + 1;
    let oh = (h + 2 * p[2] - kh) / s[2] + 1;
    let xa = |a: i64, c: usize, i: i64, j: i64| -> f64 {
        if a < 0 || i < 0 || j < 0 || a >= t as i64 || i >= w as i64 || j >= h as i64 {
            0.0
        } else {
            x.data()[((a as usize * ci + c) * w + i as usize) * h + j as usize]
        }
    };
    let mut out = vec![];
    for o_t in 0..ot {
        for o in 0..co {
            for o_w in 0..ow {
                for o_h in 0..oh {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for dt in 0..kt {
                            for dw in 0..kw {
                                for dh in 0..kh {
                                    let kv = k.data()[(((o * ci + c) * kt + dt) * kw + dw) * kh + dh];
                                    acc += kv
                                        * xa(
                                            (o_t * s[0] + dt) as i64 - p[0] as i64,
                                            c,
                                            (o_w * s[1] + dw) as i64 - p[1] as i64,
                                            (o_h * s[2] + dh) as i64 - p[2] as i64,
                                        );
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (vec![ot, co, ow, oh], out)
}

#[test]
fn conv3d_matches_direct_summation() {
    // input shape, kernel shape, stride, padding
    type Case = ([usize; 4], [usize; 5], [usize; 3], [usize; 3]);
    let cases: [Case; 4] = [
        ([5, 2, 3, 3], [3, 2, 3, 3, 3], [1, 1, 1], [1, 1, 1]),
        ([6, 3, 1, 1], [2, 3, 3, 1, 1], [1, 1, 1], [1, 0, 0]),
        ([7, 1, 4, 2], [2, 1, 2, 3, 1], [2, 1, 1], [0, 1, 0]),
        ([4, 2, 2, 2], [1, 2, 1, 1, 1], [1, 2, 2], [0, 0, 0]),
    ];
    for (i, (xs, ks, s, p)) in cases.into_iter().enumerate() {
        let x = tensor(&xs, i as u64);
        let k = tensor(&ks, 10 + i as u64);
        let b = tensor(&[ks[0]], 20 + i as u64);
        let mut tape = Tape::new();
        let (xi, ki, bi) = (tape.leaf(x.clone()), tape.leaf(k.clone()), tape.leaf(b.clone()));
        let y = tape.conv3d(xi, ki, Some(bi), s, p).unwrap();
        let (shape, want) = conv_oracle(&x, &k, Some(&b), s, p);
        assert_eq!(tape.value(y).shape(), &shape[..]);
        for (a, e) in tape.value(y).data().iter().zip(&want) {
            assert!((a - e).abs() < 1e-12, "case {i}: {a} vs {e}");
        }
    }
}

#[test]
fn one_by_one_kernel_is_channel_mixing() {
    let x = tensor(&[3, 2, 1, 1], 1);
    let k = Tensor::new(&[1, 2, 1, 1, 1], vec![2.0, -1.0]).unwrap();
    let mut tape = Tape::new();
    let (xi, ki) = (tape.leaf(x.clone()), tape.leaf(k));
    let y = tape.conv3d(xi, ki, None, [1, 1, 1], [0, 0, 0]).unwrap();
    for t in 0..3 {
        let want = 2.0 * x.data()[2 * t] - x.data()[2 * t + 1];
        assert!((tape.value(y).data()[t] - want).abs() < 1e-15);
    }
}

#[test]
fn conv_transpose_upsamples_temporal() {
    let x = tensor(&[4, 3, 1, 1], 2);
    let k = tensor(&[3, 5, 2, 1, 1], 3);
    let mut tape = Tape::new();
    let (xi, ki) = (tape.leaf(x), tape.leaf(k));
    let y = tape.conv_transpose(xi, ki, None, [2, 1, 1]).unwrap();
    assert_eq!(tape.value(y).shape(), &[8, 5, 1, 1]);
}

#[test]
fn mismatched_channels_name_the_axis() {
    let mut tape = Tape::new();
    let xi = tape.leaf(tensor(&[4, 3, 1, 1], 0));
    let ki = tape.leaf(tensor(&[2, 2, 1, 1, 1], 0));
    match tape.conv3d(xi, ki, None, [1, 1, 1], [0, 0, 0]) {
        Err(Error::Shape { axis, .. }) => assert_eq!(axis, "channel"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[4, 1, 1, 1], vec![1.0, 3.0, 2.0, 2.0]).unwrap());
    let y = tape.maxpool_temporal(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 2.0]);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap().wrt(&tape, x);
    // ties send the gradient to the first maximum
    assert_eq!(g.data(), &[0.0, 1.0, 1.0, 0.0]);
    let short = tape.leaf(Tensor::zeros(&[1, 1, 1, 1]));
    assert!(matches!(tape.maxpool_temporal(short, 2, 2), Err(Error::Degenerate(_))));
}

#[test]
fn sigmoid_is_stable_at_extremes() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![-800.0, 0.0, 800.0]));
    let y = tape.sigmoid(x);
    let v = tape.value(y).data();
    assert!(v.iter().all(|p| p.is_finite()));
    assert_eq!(v[1], 0.5);
    assert!(v[0] < 1e-300 && v[2] == 1.0);
}

#[test]
fn gap_and_concat_order() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[1, 2, 2, 1], vec![1.0, 3.0, 10.0, 20.0]).unwrap());
    let g = tape.global_avg_pool_spatial(x).unwrap();
    assert_eq!(tape.value(g).shape(), &[1, 2]);
    assert_eq!(tape.value(g).data(), &[2.0, 15.0]);
    let a = tape.leaf(Tensor::full(&[2, 1, 1, 1], 1.0));
    let b = tape.leaf(Tensor::full(&[2, 2, 1, 1], 2.0));
    let c = tape.concat_channels(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 2.0, 1.0, 2.0, 2.0]);
}

#[test]
fn abs_derivative_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![0.0, -2.0, 3.0]));
    let a = tape.abs(x);
    let s = tape.sum(a);
    assert_eq!(tape.backward(s).unwrap().wrt(&tape, x).data(), &[0.0, -1.0, 1.0]);
}

#[test]
fn bernoulli_log_lik_gradient_is_a_minus_sigma() {
    let z = vec![-1.5, 0.0, 2.0];
    let a = vec![1.0, 0.0, 1.0];
    let mut tape = Tape::new();
    let zi = tape.leaf(Tensor::from_vec(z.clone()));
    let ll = tape.bernoulli_log_lik(zi, &a).unwrap();
    let g = tape.backward(ll).unwrap().wrt(&tape, zi);
    for i in 0..3 {
        let want = a[i] - 1.0 / (1.0 + (-z[i]).exp());
        assert!((g.data()[i] - want).abs() < 1e-15);
    }
}

#[test]
fn grad_check_rejects_bad_eps_and_reports_non_finite() {
    assert!(matches!(GradChecker::new(1e-9), Err(Error::Config(_))));
    assert!(matches!(GradChecker::new(0.1), Err(Error::Config(_))));
    let c = GradChecker::new(1e-6).unwrap();
    let r = c.check(
        |t, ids| {
            let r = t.recip(ids[0]);
            Ok(t.sum(r))
        },
        &[Tensor::from_vec(vec![1.0, 0.0, 2.0])],
    );
    match r {
        Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// <conv3d(x, k), y> == <x, conv_transpose(y, k)> for zero padding.
    #[test]
    fn conv_transpose_is_adjoint(
        t in 1usize..6, w in 1usize..4, h in 1usize..4,
        ci in 1usize..4, co in 1usize..4,
        kt in 1usize..3, kw in 1usize..3, kh in 1usize..3,
        st in 1usize..3, sw in 1usize..3, sh in 1usize..3,
        seed in 0u64..1000,
    ) {
        prop_assume!(kt <= t && kw <= w && kh <= h);
        let x = tensor(&[t, ci, w, h], seed);
        let k = tensor(&[co, ci, kt, kw, kh], seed + 1);
        let mut tape = Tape::new();
        let (xi, ki) = (tape.leaf(x.clone()), tape.leaf(k.clone()));
        let y = tape.conv3d(xi, ki, None, [st, sw, sh], [0, 0, 0]).unwrap();
        let ys = tape.value(y).shape().to_vec();
        let r = tensor(&ys, seed + 2);
        let lhs = tape.value(y).dot(&r);
        // Both ops read the same [C_y, C_x, kt, kw, kh] tensor.
        let ri = tape.leaf(r.clone());
        let z = tape.conv_transpose(ri, ki, None, [st, sw, sh]).unwrap();
        // conv_transpose output may be longer than x when strides skip the
        // tail; the extra entries pair with nothing.
        let zv = tape.value(z);
        let zs = zv.shape().to_vec();
        prop_assert!(zs[0] <= t && zs[2] <= w && zs[3] <= h);
        let mut rhs = 0.0;
        for a in 0..zs[0] { for c in 0..ci { for i in 0..zs[2] { for j in 0..zs[3] {
            rhs += zv.data()[((a * ci + c) * zs[2] + i) * zs[3] + j]
                * x.data()[((a * ci + c) * w + i) * h + j];
        }}}}
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn conv3d_gradients_match_finite_differences(
        t in 2usize..5, ci in 1usize..3, co in 1usize..3, w in 1usize..3, seed in 0u64..500,
    ) {
        let kw = if w == 1 { 1 } else { 2 };
        let c = GradChecker::new(1e-6).unwrap();
        let rep = c.check(
            |tape, ids| {
                let y = tape.conv3d(ids[0], ids[1], Some(ids[2]), [1, 1, 1], [1, 0, 0])?;
                let s = tape.square(y);
                Ok(tape.sum(s))
            },
            &[tensor(&[t, ci, w, 1], seed), tensor(&[co, ci, 2, kw, 1], seed + 1), tensor(&[co], seed + 2)],
        ).unwrap();
        prop_assert!(rep.max_rel_err < 1e-6, "{:?}", rep);
    }

    #[test]
    fn elementwise_chain_gradients(n in 1usize..8, seed in 0u64..500) {
        let c = GradChecker::new(1e-6).unwrap();
        let x = tensor(&[n], seed).map(|v| v + 3.0);
        let y = tensor(&[n], seed + 9);
        let rep = c.check(
            |t, ids| {
                let a = t.mul(ids[0], ids[1])?;
                let b = t.recip(ids[0]);
                let d = t.sub(a, b)?;
                let e = t.scale(d, 0.7);
                let f = t.add_scalar(e, -0.2);
                let g = t.sigmoid(f);
                let h = t.relu(g);
                Ok(t.mean(h))
            },
            &[x, y],
        ).unwrap();
        prop_assert!(rep.max_rel_err < 1e-7);
    }

    #[test]
    fn reshape_and_truncate_keep_prefix(t in 2usize..9, c in 1usize..4, keep in 1usize..9) {
        prop_assume!(keep <= t);
        let x = tensor(&[t, c], 3);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let r = tape.reshape(xi, &[t * c]).unwrap();
        prop_assert_eq!(tape.value(r).data(), x.data());
        let y = tape.truncate(xi, keep).unwrap();
        prop_assert_eq!(tape.value(y).data(), &x.data()[..keep * c]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap().wrt(&tape, xi);
        prop_assert!(g.data()[..keep * c].iter().all(|&v| v == 1.0));
        prop_assert!(g.data()[keep * c..].iter().all(|&v| v == 0.0));
    }
}
