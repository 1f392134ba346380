use super::*;
use crate::Error;
use std::cell::Cell;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Direct-summation convolution used as an oracle for the im2col path.
fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad_top: usize, pad_left: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (n, h, w, cin) = x.nhwc().unwrap();
    let (kh, kw, _, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let mut out = vec![0.0; n * oh * ow * cout];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad_top as isize;
                            let ix = (ox * stride + kx) as isize - pad_left as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x.data()[((b * h + iy as usize) * w + ix as usize) * cin + ci];
                                let kv = k.data()[((ky * kw + kx) * cin + ci) * cout + co];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    out
}

fn pseudo(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

#[test]
fn conv_identity_kernel_returns_input() {
    let x = t(&[1, 4, 4, 1], &pseudo(16, 1));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = tape.conv2d(xv, k, 1, Padding::Same).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv_valid_all_ones_gives_fours() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 3, 3, 1], 1.0));
    let k = tape.constant(Tensor::full(&[2, 2, 1, 1], 1.0));
    let y = tape.conv2d(x, k, 1, Padding::Valid).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 2, 1]);
    assert_eq!(tape.value(y).data(), &[4.0; 4]);
}

#[test]
fn conv_stride_two_same_halves_extent() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 28, 28, 1]));
    let k = tape.constant(Tensor::zeros(&[3, 3, 1, 4]));
    let y = tape.conv2d(x, k, 2, Padding::Same).unwrap();
    assert_eq!(tape.shape(y), &[1, 14, 14, 4]);
}

#[test]
fn conv_matches_direct_summation() {
    let x = t(&[2, 7, 6, 3], &pseudo(2 * 7 * 6 * 3, 2));
    let k = t(&[3, 3, 3, 4], &pseudo(108, 3));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(k.clone());
    let same = tape.conv2d(xv, kv, 2, Padding::Same).unwrap();
    assert_eq!(tape.shape(same), &[2, 4, 3, 4]);
    // h=7: out 4, total pad (3*2+3-7)=2 -> top 1; w=6: out 3, total pad 1 -> left 0
    let oracle = conv_oracle(&x, &k, 2, 1, 0, 4, 3);
    for (a, b) in tape.value(same).data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
    let valid = tape.conv2d(xv, kv, 1, Padding::Valid).unwrap();
    let oracle = conv_oracle(&x, &k, 1, 0, 0, 5, 4);
    for (a, b) in tape.value(valid).data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 4, 4, 2]));
    let k = tape.constant(Tensor::zeros(&[3, 3, 3, 1]));
    assert!(matches!(tape.conv2d(x, k, 1, Padding::Same), Err(Error::Shape { .. })));
}

#[test]
fn sigmoid_of_zero_is_half_and_stays_open() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 800.0, -800.0]));
    let y = tape.sigmoid(x).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[0], 0.5);
    assert!(v[1] < 1.0 && v[2] > 0.0);
}

#[test]
fn global_avg_pool_of_constant_map() {
    let mut tape = Tape::new();
    let mut data = vec![0.0; 5 * 5 * 2];
    for px in data.chunks_mut(2) {
        px[0] = 3.5;
        px[1] = -1.25;
    }
    let x = tape.constant(t(&[1, 5, 5, 2], &data));
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(y).data(), &[3.5, -1.25]);
}

#[test]
fn upsample_repeats_by_index() {
    let x = t(&[1, 4, 4, 1], &(0..16).map(f64::from).collect::<Vec<_>>());
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.upsample2x(xv).unwrap();
    assert_eq!(tape.shape(y), &[1, 8, 8, 1]);
    for r in 0..8 {
        for c in 0..8 {
            assert_eq!(tape.value(y).data()[r * 8 + c], x.data()[(r / 2) * 4 + c / 2]);
        }
    }
}

#[test]
fn gradient_of_sum_of_squares() {
    let x = t(&[4], &[1.0, -2.0, 0.5, 3.0]);
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let sq = tape.square(xv).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss).unwrap();
    let expect: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(tape.grad(xv).unwrap(), &expect[..]);
}

#[test]
fn sigmoid_gradient_at_zero_is_quarter() {
    let mut tape = Tape::new();
    let xv = tape.param(Tensor::zeros(&[5]));
    let s = tape.sigmoid(xv).unwrap();
    let loss = tape.sum(s).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(xv).unwrap(), &[0.25; 5]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let xv = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = tape.relu(xv).unwrap();
    let loss = tape.sum(r).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(xv).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn dense_relu_chain_matches_finite_differences() {
    let x = t(&[3, 4], &pseudo(12, 7));
    let w = t(&[4, 5], &pseudo(20, 8));
    let b = t(&[5], &pseudo(5, 9));
    let err = grad_check(
        |tape, v| {
            let d = tape.dense(v[0], v[1], v[2])?;
            let r = tape.relu(d)?;
            tape.sum(r)
        },
        &[x, w, b],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_rejects_non_scalar_and_detached() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[3]));
    let y = tape.exp(x).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    let c = tape.constant(Tensor::zeros(&[3]));
    let s = tape.sum(c).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::DetachedGraph)));
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(&[2], 1.0));
    let unused = tape.param(Tensor::full(&[3], 1.0));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(unused).unwrap(), &[0.0; 3]);
}

#[test]
fn batch_norm_training_needs_two_items() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 2, 3]));
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let mut stats = RunningStats::new(3);
    assert!(matches!(
        tape.batch_norm(x, g, b, &mut stats, true),
        Err(Error::BatchTooSmall(1))
    ));
    assert!(tape.batch_norm(x, g, b, &mut stats, false).is_ok());
}

#[test]
fn batch_norm_updates_running_stats_with_momentum() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 1], &[1.0, 3.0]));
    let g = tape.constant(Tensor::full(&[1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let mut stats = RunningStats::new(1);
    tape.batch_norm(x, g, b, &mut stats, true).unwrap();
    assert!((stats.mean[0] - 0.01 * 2.0).abs() < 1e-15);
    assert!((stats.var[0] - (0.99 + 0.01 * 1.0)).abs() < 1e-15);
}

#[test]
fn exp_overflow_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1], &[1000.0]));
    assert!(matches!(tape.exp(x), Err(Error::NonFinite("exp"))));
}

#[test]
fn grad_check_linear_is_exact() {
    let x = t(&[6], &pseudo(6, 11));
    let err = grad_check(
        |tape, v| {
            let a = tape.affine(v[0], 3.0, 1.0)?;
            tape.sum(a)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn grad_check_conv_bn_relu_stack() {
    let x = t(&[2, 5, 5, 2], &pseudo(100, 21));
    let k = t(&[3, 3, 2, 3], &pseudo(54, 22));
    let gamma = t(&[3], &[1.2, 0.8, 1.1]);
    let beta = t(&[3], &[0.1, -0.2, 0.3]);
    let weights = t(&[2, 5, 5, 3], &pseudo(150, 23));
    let stats = RunningStats {
        mean: vec![0.05, -0.1, 0.02],
        var: vec![1.3, 0.7, 2.0],
    };
    let err = grad_check(
        |tape, v| {
            let c = tape.conv2d(v[0], v[1], 1, Padding::Same)?;
            let mut s = stats.clone();
            let n = tape.batch_norm(c, v[2], v[3], &mut s, false)?;
            let r = tape.relu(n)?;
            let w = tape.constant(weights.clone());
            let p = tape.mul(r, w)?;
            tape.sum(p)
        },
        &[x, k, gamma, beta],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn grad_check_catches_wrong_backward_rule() {
    let x = t(&[4], &[0.3, -0.7, 1.1, 2.0]);
    let err = grad_check(
        |tape, v| {
            let value = tape.value(v[0]).map(|a| a * a * a);
            // true derivative is 3a^2; this rule claims 2a^2
            let cube = tape.custom(
                &[v[0]],
                value,
                Box::new(|ins: &[&Tensor], _out: &Tensor, g: &[f64]| {
                    vec![ins[0].data().iter().zip(g).map(|(a, gv)| 2.0 * a * a * gv).collect()]
                }),
            )?;
            tape.sum(cube)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err > 1e-2, "{err}");
}

#[test]
fn noise_aware_check_still_catches_wrong_backward_rule() {
    let x = t(&[4], &[0.3, -0.7, 1.1, 2.0]);
    let err = grad_check_noise_aware(
        |tape, v| {
            let value = tape.value(v[0]).map(|a| a * a * a);
            let cube = tape.custom(
                &[v[0]],
                value,
                Box::new(|ins: &[&Tensor], _out: &Tensor, g: &[f64]| {
                    vec![ins[0].data().iter().zip(g).map(|(a, gv)| 2.0 * a * a * gv).collect()]
                }),
            )?;
            let s = tape.sum(cube)?;
            tape.affine(s, 1.0, 1e3)
        },
        &[x],
        1e-6,
    )
    .unwrap();
    assert!(err > 1e-2, "{err}");
}

#[test]
fn noise_aware_check_resolves_exact_zero_gradients() {
    // centring makes every gradient exactly zero; the offset makes the
    // difference quotient pure rounding noise
    let x = t(&[6], &[0.3, -0.7, 1.1, 2.0, 0.05, -1.4]);
    let f = |tape: &mut Tape, v: &[Var]| {
        let m = tape.mean(v[0])?;
        let neg = tape.scale(m, -1.0)?;
        let s = tape.sum(v[0])?;
        let six = tape.scale(neg, 6.0)?;
        let c = tape.add(s, six)?;
        tape.affine(c, 1.0, 40.0)
    };
    let strict = grad_check(f, &[x.clone()], 1e-6).unwrap();
    let aware = grad_check_noise_aware(f, &[x], 1e-6).unwrap();
    assert!(aware < 1e-4, "{aware}");
    assert!(aware <= strict);
}

#[test]
fn grad_check_rejects_nondeterministic_function() {
    let calls = Cell::new(0u32);
    let x = t(&[2], &[1.0, 2.0]);
    let res = grad_check(
        |tape, v| {
            calls.set(calls.get() + 1);
            let s = tape.affine(v[0], 1.0, f64::from(calls.get()))?;
            tape.sum(s)
        },
        &[x],
        1e-5,
    );
    assert!(matches!(res, Err(Error::NonDeterministic)));
}

#[test]
fn compose_clamps_to_convex_bounds() {
    let sigma = t(&[1, 1, 1, 1], &[0.1]);
    let x = t(&[1, 1, 1, 2], &[0.3, 0.7]);
    let out = tape::compose_values(&sigma, &x, &x).unwrap();
    assert_eq!(out, x);
    let bad = t(&[1, 1, 1, 1], &[1.5]);
    assert!(tape::compose_values(&bad, &x, &x).is_err());
}
