use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signal_lab::autodiff::{Adam, AdamConfig, ConvGeom, Mlp, ParamStore, Tape, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Central-difference check of d loss / d input for every input of `f`.
fn gradcheck(inputs: &[Tensor], f: impl Fn(&mut Tape<'_>, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let l = f(&mut tape, &vars);
        tape.value(l).item()
    };
    let h = 1e-5;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], x);
        let mut numeric = vec![0.0; x.len()];
        #[allow(clippy::needless_range_loop)]
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt()
            + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = if norm < 1e-12 { diff } else { diff / norm };
        assert!(
            rel < 1e-4,
            "input {i}: relative error {rel:e}\nanalytic {:?}\nnumeric {numeric:?}",
            analytic.data()
        );
    }
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weigh(tape: &mut Tape<'_>, y: Var) -> Var {
    let n = tape.value(y).len();
    let shape = tape.value(y).shape().to_vec();
    let w = Tensor::new(
        shape,
        (0..n).map(|i| 0.3 + ((i * 7) % 11) as f64 * 0.1).collect(),
    )
    .unwrap();
    let wv = tape.constant(w);
    let p = tape.mul(y, wv).unwrap();
    tape.sum(p)
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    gradcheck(&[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let d = t.sub(s, v[1]).unwrap();
        let m = t.mul(d, v[1]).unwrap();
        let e = t.exp(m);
        let q = t.square(e);
        let sc = t.scale(q, 0.7);
        let y = t.add_scalar(sc, 2.0);
        weigh(t, y)
    });
    gradcheck(std::slice::from_ref(&a), |t, v| {
        let s = t.sigmoid(v[0]);
        let r = t.relu(v[0]);
        let y = t.add(s, r).unwrap();
        weigh(t, y)
    });
    gradcheck(&[a, b], |t, v| {
        let c = t.clamp(v[0], -0.5, 0.5);
        let m = t.minimum(c, v[1]).unwrap();
        t.mean(m)
    });
}

#[test]
fn linear_algebra_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[4, 3], &mut rng);
    let w = random(&[3, 5], &mut rng);
    let b = random(&[5], &mut rng);
    let z = random(&[4, 2], &mut rng);
    gradcheck(&[x, w, b, z], |t, v| {
        let y = t.linear(v[0], v[1], v[2]).unwrap();
        let c = t.concat_cols(y, v[3]).unwrap();
        let r = t.reshape(c, &[7, 4]).unwrap();
        weigh(t, r)
    });
}

#[test]
fn softmax_family_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[3, 8], &mut rng);
    gradcheck(std::slice::from_ref(&x), |t, v| {
        let l = t.log_softmax(v[0]);
        let g = t.gather(l, &[1, 7, 0]).unwrap();
        weigh(t, g)
    });
    gradcheck(std::slice::from_ref(&x), |t, v| {
        let s = t.softmax(v[0]);
        weigh(t, s)
    });
    let target = Tensor::new(vec![3, 8], (0..24).map(|i| (i % 5) as f64 / 4.0).collect()).unwrap();
    gradcheck(&[x.map(|v| 4.0 * v)], |t, v| {
        t.bce_with_logits_sum(v[0], &target).unwrap()
    });
}

#[test]
fn convolution_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (stride, op) in [(1, 0), (2, 0), (2, 1)] {
        let x = random(&[2, 3, 5, 4], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let g = ConvGeom::new(stride, 1);
        gradcheck(&[x, k, b], |t, v| {
            let y = t.conv2d(v[0], v[1], g).unwrap();
            let y = t.add_channel_bias(y, v[2]).unwrap();
            weigh(t, y)
        });
        let x = random(&[2, 3, 3, 2], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let g = ConvGeom::new(stride, 1).with_output_padding(op);
        gradcheck(&[x, k], |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], g).unwrap();
            weigh(t, y)
        });
    }
}

/// Direct six-loop cross-correlation with zero padding.
fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let [o, _, kh, kw] = k.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                    s += x.data()
                                        [((b * c + ci) * h + y as usize) * w + xx as usize]
                                        * k.data()[((oc * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out.data_mut()[((b * o + oc) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    out
}

/// Scatter form of the transposed convolution.
fn naive_conv_t(x: &Tensor, k: &Tensor, stride: usize, pad: usize, op: usize) -> Tensor {
    let [n, ci, h, w] = x.shape().try_into().unwrap();
    let [_, co, kh, kw] = k.shape().try_into().unwrap();
    let oh = (h - 1) * stride + kh + op - 2 * pad;
    let ow = (w - 1) * stride + kw + op - 2 * pad;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for b in 0..n {
        for c in 0..ci {
            for iy in 0..h {
                for ix in 0..w {
                    let v = x.data()[((b * ci + c) * h + iy) * w + ix];
                    for o in 0..co {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (iy * stride + ky) as isize - pad as isize;
                                let xx = (ix * stride + kx) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < oh && (xx as usize) < ow {
                                    out.data_mut()
                                        [((b * co + o) * oh + y as usize) * ow + xx as usize] +=
                                        v * k.data()[((c * co + o) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_naive_loops(seed in any::<u64>(), h in 2usize..7, w in 2usize..7, stride in 1usize..3, c in 1usize..4, o in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, c, h, w], &mut rng);
        let k = random(&[o, c, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.leaf(x.clone()), tape.leaf(k.clone()));
        let y = tape.conv2d(xv, kv, ConvGeom::new(stride, 1)).unwrap();
        prop_assert!(max_abs_diff(tape.value(y), &naive_conv(&x, &k, stride, 1)) < 1e-12);
    }

    #[test]
    fn conv_transpose_matches_scatter(seed in any::<u64>(), h in 1usize..5, w in 1usize..5, stride in 1usize..3, op in 0usize..2) {
        let op = op.min(stride - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 3, h, w], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let g = ConvGeom::new(stride, 1).with_output_padding(op);
        prop_assume!(g.transpose_out(h, 3).is_some() && g.transpose_out(w, 3).is_some());
        let mut tape = Tape::new();
        let (xv, kv) = (tape.leaf(x.clone()), tape.leaf(k.clone()));
        let y = tape.conv_transpose2d(xv, kv, g).unwrap();
        prop_assert!(max_abs_diff(tape.value(y), &naive_conv_t(&x, &k, stride, 1, op)) < 1e-12);
    }

    /// <conv(x, k), y> == <x, conv_t(y, k)>: the transposed convolution is the adjoint.
    #[test]
    fn transpose_is_adjoint(seed in any::<u64>(), h in 3usize..7, w in 3usize..7, stride in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = ConvGeom::new(stride, 1);
        let x = random(&[1, 2, h, w], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let (oh, ow) = (g.conv_out(h, 3).unwrap(), g.conv_out(w, 3).unwrap());
        let op = h + 2 - 3 - (oh - 1) * stride;
        prop_assume!(op == w + 2 - 3 - (ow - 1) * stride && op < stride.max(1));
        let y = random(&[1, 3, oh, ow], &mut rng);
        let fwd = naive_conv(&x, &k, stride, 1);
        // A conv kernel [o, c, .] read as a transposed kernel maps o channels back to c.
        let mut tape = Tape::new();
        let (yv, kv) = (tape.leaf(y.clone()), tape.leaf(k.clone()));
        let back = tape.conv_transpose2d(yv, kv, g.with_output_padding(op)).unwrap();
        let lhs = fwd.dot(&y);
        let rhs = x.dot(tape.value(back));
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[4, 8], &mut rng).map(|v| 10.0 * v);
        let s = signal_lab::autodiff::softmax_rows(&x);
        for r in 0..4 {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = signal_lab::autodiff::softmax_rows(&x.map(|v| v + shift));
        prop_assert!(max_abs_diff(&s, &shifted) < 1e-12);
    }
}

#[test]
fn fan_out_accumulates() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![3.0]));
    let a = tape.mul(x, x).unwrap();
    let b = tape.add(a, x).unwrap();
    let l = tape.sum(b);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[7.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[4, 5]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::vector(vec![1.0]));
    let x = tape.leaf(Tensor::vector(vec![2.0]));
    let p = tape.mul(c, x).unwrap();
    let l = tape.sum(p);
    let g = tape.backward(l).unwrap();
    assert!(g.get(c).is_none());
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![1.0, -2.0]));
    let mut adam = Adam::new(AdamConfig::with_lr(0.1), &store);
    adam.step(&mut store, &[Tensor::vector(vec![0.5, -3.0])]);
    let w = store.get(id).data();
    assert!(
        (w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6,
        "{w:?}"
    );
}

#[test]
fn adam_minimises_a_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "f", &[2, 8, 1], &mut rng);
    let xs = Tensor::from_rows(&[
        vec![0.0, 1.0],
        vec![1.0, 0.0],
        vec![1.0, 1.0],
        vec![-1.0, 0.5],
    ])
    .unwrap();
    let ys = Tensor::new(vec![4, 1], vec![1.0, -1.0, 0.0, 2.0]).unwrap();
    let mut adam = Adam::new(AdamConfig::with_lr(0.02), &store);
    let mut last = f64::INFINITY;
    for _ in 0..800 {
        let grads = {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let x = tape.constant(xs.clone());
            let y = tape.constant(ys.clone());
            let p = mlp.forward(&mut tape, &b, x).unwrap();
            let d = tape.sub(p, y).unwrap();
            let sq = tape.square(d);
            let l = tape.mean(sq);
            last = tape.value(l).item();
            store.collect_grads(&b, &tape.backward(l).unwrap())
        };
        adam.step(&mut store, &grads);
    }
    assert!(last < 1e-3, "loss {last}");
}

#[test]
fn manifest_round_trip_and_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut a = ParamStore::new();
    Mlp::new(&mut a, "net", &[3, 4, 2], &mut rng);
    let json = a.to_json().unwrap();
    let mut b = ParamStore::new();
    Mlp::new(&mut b, "net", &[3, 4, 2], &mut rng);
    assert_ne!(a, b);
    b.load_json(&json).unwrap();
    assert_eq!(a, b);
    let mut c = ParamStore::new();
    Mlp::new(&mut c, "net", &[3, 5, 2], &mut rng);
    assert!(c.load_json(&json).is_err());
}
