use cmr::reference;
use cmr::tensor::{grad_check, rng, BatchNormState, Tape, Tensor, GRAD_CHECK_STEP};
use cmr::Error;

fn rand(seed: u64, shape: &[usize]) -> Tensor {
    rng::normal(&mut rng::stream(seed, "tensor-ops"), shape, 1.0)
}

fn eval1(x: &Tensor, f: impl FnOnce(&mut Tape, cmr::Var) -> cmr::Var) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v);
    tape.value(out).clone()
}

#[test]
fn matmul_examples() {
    let b = rand(1, &[3, 4]);
    let mut tape = Tape::new();
    let i3 = tape.constant(Tensor::eye(3));
    let bv = tape.constant(b.clone());
    let y = tape.matmul(i3, bv).unwrap();
    assert_eq!(tape.value(y), &b);

    let a = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let c = tape.constant(Tensor::new(&[2, 1], vec![5.0, 6.0]).unwrap());
    let y = tape.matmul(a, c).unwrap();
    assert_eq!(tape.value(y).data(), &[17.0, 39.0]);

    let a = rand(2, &[7, 5]);
    let c = rand(3, &[5, 3]);
    let av = tape.constant(a.clone());
    let cv = tape.constant(c.clone());
    let y = tape.matmul(av, cv).unwrap();
    let want = reference::matmul(&a, &c).unwrap();
    assert!(tape.value(y).max_abs_diff(&want).unwrap() <= 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn pointwise_linear_examples() {
    let x = rand(4, &[1, 2, 4, 3, 3]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let eye = tape.constant(Tensor::eye(4));
    let y = tape.pointwise_linear(xv, eye, None).unwrap();
    assert_eq!(tape.value(y), &x);

    let zero = tape.constant(Tensor::zeros(&[2, 4]));
    let b = tape.constant(Tensor::new(&[2], vec![1.5, -3.0]).unwrap());
    let y = tape.pointwise_linear(xv, zero, Some(b)).unwrap();
    let out = tape.value(y);
    for n in 0..2 {
        for p in 0..9 {
            assert_eq!(out.data()[(n * 2) * 9 + p], 1.5);
            assert_eq!(out.data()[(n * 2 + 1) * 9 + p], -3.0);
        }
    }

    let w = rand(5, &[2, 4]);
    let wv = tape.constant(w.clone());
    let y = tape.pointwise_linear(xv, wv, None).unwrap();
    let want = reference::pointwise_linear(&x, &w, None).unwrap();
    assert!(tape.value(y).max_abs_diff(&want).unwrap() <= 1e-12);

    let bad = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        tape.pointwise_linear(xv, bad, None),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn conv3x3_examples() {
    let x = rand(6, &[1, 2, 3, 5, 5]);
    let mut delta = Tensor::zeros(&[3, 3, 3, 3]);
    for c in 0..3 {
        delta.set(&[c, c, 1, 1], 1.0);
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let dv = tape.constant(delta);
    let y = tape.conv2d_3x3(xv, dv, 1).unwrap();
    assert_eq!(tape.value(y), &x);

    let c = 2.0;
    let xc = tape.constant(Tensor::full(&[1, 1, 1, 4, 5], c));
    let ones = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = tape.conv2d_3x3(xc, ones, 1).unwrap();
    let out = tape.value(y);
    assert_eq!(out.at(&[0, 0, 0, 1, 1]), 9.0 * c);
    assert_eq!(out.at(&[0, 0, 0, 0, 0]), 4.0 * c);
    assert_eq!(out.at(&[0, 0, 0, 0, 2]), 6.0 * c);
    assert_eq!(out.at(&[0, 0, 0, 3, 4]), 4.0 * c);

    let x = rand(7, &[1, 1, 2, 5, 5]);
    let w = rand(8, &[3, 2, 3, 3]);
    for stride in [1, 2] {
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv2d_3x3(xv, wv, stride).unwrap();
        let want = reference::conv2d_3x3(&x, &w, stride).unwrap();
        assert!(tape.value(y).max_abs_diff(&want).unwrap() <= 1e-12);
    }

    let wrong = tape.constant(Tensor::zeros(&[3, 1, 3, 3]));
    let xv = tape.constant(x);
    assert!(tape.conv2d_3x3(xv, wrong, 1).is_err());
}

#[test]
fn gap_examples() {
    let y = eval1(&Tensor::full(&[1, 2, 3, 4, 4], 1.25), |t, v| {
        t.global_avg_pool_spatial(v).unwrap()
    });
    assert!(y.data().iter().all(|&v| v == 1.25));

    let x = Tensor::new(&[1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = eval1(&x, |t, v| t.global_avg_pool_spatial(v).unwrap());
    assert_eq!(y.data(), &[2.5]);

    let x = rand(9, &[2, 3, 4, 5, 5]);
    let y = eval1(&x, |t, v| t.global_avg_pool_spatial(v).unwrap());
    let want = reference::global_avg_pool_spatial(&x).unwrap();
    assert!(y.max_abs_diff(&want).unwrap() <= 1e-12);
}

#[test]
fn softmax_examples() {
    let y = eval1(&Tensor::full(&[2, 5], 3.0), |t, v| t.softmax_lastdim(v).unwrap());
    assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

    let y = eval1(&Tensor::full(&[1], -7.0), |t, v| t.softmax_lastdim(v).unwrap());
    assert_eq!(y.data(), &[1.0]);

    let x = Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap();
    let y = eval1(&x, |t, v| t.softmax_lastdim(v).unwrap());
    assert!((y.data()[0] - 0.25).abs() < 1e-15);
    assert!((y.data()[1] - 0.75).abs() < 1e-15);

    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(&[2], vec![0.0, f64::NAN]).unwrap());
    assert!(matches!(tape.softmax_lastdim(v), Err(Error::Numeric(_))));
}

#[test]
fn softmax_rows_are_stochastic_over_many_seeds() {
    for seed in 0..1000 {
        let x = rng::normal(&mut rng::stream(seed, "softmax"), &[3, 7], 10.0);
        let y = eval1(&x, |t, v| t.softmax_lastdim(v).unwrap());
        for row in y.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
        let want = reference::softmax_lastdim(&x);
        assert!(y.max_abs_diff(&want).unwrap() <= 1e-10);
    }
}

#[test]
fn activation_examples() {
    let y = eval1(&Tensor::zeros(&[1]), |t, v| t.sigmoid(v));
    assert_eq!(y.data(), &[0.5]);
    let y = eval1(&Tensor::new(&[2], vec![-2.0, 2.0]).unwrap(), |t, v| t.relu(v));
    assert_eq!(y.data(), &[0.0, 2.0]);

    let x = rand(10, &[50]);
    let pos = eval1(&x, |t, v| t.sigmoid(v));
    let neg = eval1(&x.map(|v| -v), |t, v| t.sigmoid(v));
    for (a, b) in pos.data().iter().zip(neg.data()) {
        assert!((a + b - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn batch_norm_matches_loop_oracle() {
    let x = rand(11, &[2, 3, 4, 3, 3]);
    let mut bn = BatchNormState::new(4);
    bn.gamma = rand(12, &[4]);
    bn.beta = rand(13, &[4]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = bn.bind(&mut tape);
    let y = bn.forward(&mut tape, xv, vars).unwrap();
    let want = reference::batch_norm(&x, bn.gamma.data(), bn.beta.data(), None, bn.eps).unwrap();
    assert!(tape.value(y).max_abs_diff(&want).unwrap() <= 1e-10);

    bn.mode = cmr::tensor::BnMode::Inference;
    let y = bn.forward(&mut tape, xv, vars).unwrap();
    let stats = (bn.running_mean.data(), bn.running_var.data());
    let want = reference::batch_norm(&x, bn.gamma.data(), bn.beta.data(), Some(stats), bn.eps).unwrap();
    assert!(tape.value(y).max_abs_diff(&want).unwrap() <= 1e-12);
}

#[test]
fn batch_norm_training_output_is_standardized() {
    for seed in 0..20 {
        let x = rng::normal(&mut rng::stream(seed, "bn-std"), &[2, 2, 3, 2, 2], 3.0)
            .map(|v| v + 5.0);
        let mut bn = BatchNormState::new(3);
        let mut tape = Tape::new();
        let input = cmr::tensor::channel_stats(&x).unwrap();
        let xv = tape.constant(x);
        let vars = bn.bind(&mut tape);
        let y = bn.forward(&mut tape, xv, vars).unwrap();
        let stats = cmr::tensor::channel_stats(tape.value(y)).unwrap();
        for c in 0..3 {
            assert!(stats.mean[c].abs() <= 1e-9);
            // var(xhat) = var / (var + eps), so the gap to 1 is at most eps / var
            assert!((stats.var[c] - 1.0).abs() <= bn.eps / input.var[c]);
        }
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(&[3, 5]));
    let loss = tape.cross_entropy_loss(l, &[0, 2, 4]).unwrap();
    assert!((tape.value(loss).item().unwrap() - 5f64.ln()).abs() < 1e-15);

    let mut logits = Tensor::zeros(&[1, 4]);
    logits.set(&[0, 2], 20.0);
    let l = tape.constant(logits);
    let loss = tape.cross_entropy_loss(l, &[2]).unwrap();
    assert!(tape.value(loss).item().unwrap() < 1e-3);

    let logits = rand(14, &[4, 6]);
    let labels = [1, 0, 5, 3];
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy_loss(l, &labels).unwrap();
    let want = reference::cross_entropy(&logits, &labels);
    assert!((tape.value(loss).item().unwrap() - want).abs() <= 1e-12);

    assert!(matches!(
        tape.cross_entropy_loss(l, &[1, 0, 6, 3]),
        Err(Error::Index { index: 6, bound: 6 })
    ));
}

#[test]
fn backward_examples() {
    let x = rand(15, &[3, 4]);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let s = tape.sum(v);
    let g = tape.backward(s).unwrap();
    assert!(g.get(v).unwrap().data().iter().all(|&d| d == 1.0));

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    let half = tape.scale(s, 0.5);
    let g = tape.backward(half).unwrap();
    assert!(g.get(v).unwrap().max_abs_diff(&x).unwrap() < 1e-15);

    assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
}

#[test]
fn gradients_accumulate_over_consumers() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2], 3.0));
    let a = tape.scale(x, 2.0);
    let b = tape.add(a, x).unwrap();
    let s = tape.sum(b);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[2]));
    let c = tape.constant(Tensor::ones(&[2]));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert!(g.get(x).is_some());
}

// ---- grad_check ----------------------------------------------------------

const H: f64 = GRAD_CHECK_STEP;

#[test]
fn grad_check_of_linear_program_is_exact() {
    let w = rand(16, &[6]);
    let theta = rand(17, &[6]);
    let err = grad_check(|t, v| t.weighted_sum(v, &w), &theta, H).unwrap();
    assert!(err <= 1e-10, "{err}");
}

#[test]
fn grad_check_of_sigmoid_dot() {
    let x = rand(18, &[4, 1]);
    let theta = rand(19, &[1, 4]);
    let err = grad_check(
        |t, w| {
            let xv = t.constant(x.clone());
            let d = t.matmul(w, xv)?;
            let s = t.sigmoid(d);
            Ok(t.sum(s))
        },
        &theta,
        H,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

/// Random probe weights make the scalarisation generic.
fn probe(t: &mut Tape, y: cmr::Var, seed: u64) -> cmr::Result<cmr::Var> {
    let w = rand(seed, t.shape(y));
    t.weighted_sum(y, &w)
}

fn check(name: &str, theta: &Tensor, f: impl FnMut(&mut Tape, cmr::Var) -> cmr::Result<cmr::Var>) {
    let err = grad_check(f, theta, H).unwrap();
    assert!(err < 1e-4, "{name}: max relative error {err}");
}

#[test]
fn every_primitive_passes_grad_check() {
    let a = rand(20, &[3, 4]);
    let b = rand(21, &[4, 2]);
    check("matmul/lhs", &a, |t, v| {
        let bv = t.constant(b.clone());
        let y = t.matmul(v, bv)?;
        probe(t, y, 1)
    });
    check("matmul/rhs", &b, |t, v| {
        let av = t.constant(a.clone());
        let y = t.matmul(av, v)?;
        probe(t, y, 1)
    });
    let ba = rand(22, &[2, 3, 4]);
    let bb = rand(23, &[2, 4, 3]);
    check("bmm", &ba, |t, v| {
        let bv = t.constant(bb.clone());
        let y = t.bmm(v, bv)?;
        probe(t, y, 2)
    });
    check("transpose+bias", &a, |t, v| {
        let tr = t.transpose(v)?;
        let bias = t.constant(rand(3, &[3]));
        let y = t.add_bias(tr, bias)?;
        probe(t, y, 3)
    });
    check("softmax", &a, |t, v| {
        let y = t.softmax_lastdim(v)?;
        probe(t, y, 4)
    });
    check("sigmoid", &a, |t, v| {
        let y = t.sigmoid(v);
        probe(t, y, 5)
    });
    check("relu", &a, |t, v| {
        let y = t.relu(v);
        probe(t, y, 6)
    });
    check("sub/mul/affine", &a, |t, v| {
        let c = t.constant(rand(7, &[3, 4]));
        let d = t.sub(v, c)?;
        let m = t.mul(d, v)?;
        let y = t.affine(m, -1.5, 0.25);
        probe(t, y, 8)
    });

    let x = rand(24, &[1, 2, 3, 4, 4]);
    let w1 = rand(25, &[2, 3]);
    check("pointwise/x", &x, |t, v| {
        let w = t.constant(w1.clone());
        let b = t.constant(rand(9, &[2]));
        let y = t.pointwise_linear(v, w, Some(b))?;
        probe(t, y, 10)
    });
    check("pointwise/w", &w1, |t, v| {
        let xv = t.constant(x.clone());
        let y = t.pointwise_linear(xv, v, None)?;
        probe(t, y, 10)
    });
    check("pointwise/b", &rand(26, &[2]), |t, v| {
        let xv = t.constant(x.clone());
        let w = t.constant(w1.clone());
        let y = t.pointwise_linear(xv, w, Some(v))?;
        probe(t, y, 10)
    });
    let k3 = rand(27, &[2, 3, 3, 3]);
    for stride in [1, 2] {
        check("conv/x", &x, |t, v| {
            let w = t.constant(k3.clone());
            let y = t.conv2d_3x3(v, w, stride)?;
            probe(t, y, 11)
        });
        check("conv/w", &k3, |t, v| {
            let xv = t.constant(x.clone());
            let y = t.conv2d_3x3(xv, v, stride)?;
            probe(t, y, 11)
        });
    }
    check("subsample", &x, |t, v| {
        let y = t.subsample_spatial(v, 2)?;
        probe(t, y, 12)
    });
    check("gap+mean_time", &x, |t, v| {
        let g = t.global_avg_pool_spatial(v)?;
        let y = t.mean_time(g)?;
        probe(t, y, 13)
    });
    let gate = rand(28, &[1, 2, 3]);
    check("scale_channels/x", &x, |t, v| {
        let g = t.constant(gate.clone());
        let y = t.scale_channels(v, g)?;
        probe(t, y, 14)
    });
    check("scale_channels/gate", &gate, |t, v| {
        let xv = t.constant(x.clone());
        let y = t.scale_channels(xv, v)?;
        probe(t, y, 14)
    });
    let map = rand(29, &[1, 2, 4, 4]);
    check("scale_positions/x", &x, |t, v| {
        let m = t.constant(map.clone());
        let y = t.scale_positions(v, m)?;
        probe(t, y, 15)
    });
    check("scale_positions/map", &map, |t, v| {
        let xv = t.constant(x.clone());
        let y = t.scale_positions(xv, v)?;
        probe(t, y, 15)
    });
    let x3 = rand(30, &[1, 3, 3, 2, 2]);
    check("cosine", &x3, |t, v| {
        let y = t.pointwise_cosine(v)?;
        probe(t, y, 16)
    });
    check("extend_last", &map, |t, v| {
        let y = t.extend_last_frame(v)?;
        probe(t, y, 17)
    });
    let kt = rand(31, &[3, 3]);
    check("temporal_conv/x", &x3, |t, v| {
        let k = t.constant(kt.clone());
        let y = t.temporal_conv(v, k)?;
        probe(t, y, 18)
    });
    check("temporal_conv/k", &kt, |t, v| {
        let xv = t.constant(x3.clone());
        let y = t.temporal_conv(xv, v)?;
        probe(t, y, 18)
    });
    let mut bn = BatchNormState::new(3);
    bn.gamma = rand(32, &[3]);
    bn.beta = rand(33, &[3]);
    check("batch_norm/x", &x, |t, v| {
        let vars = bn.bind(t);
        let (y, _) = cmr::tensor::batch_norm_train(t, v, vars, 1e-5)?;
        probe(t, y, 19)
    });
    check("batch_norm/gamma", &bn.gamma, |t, v| {
        let xv = t.constant(x.clone());
        let beta = t.constant(bn.beta.clone());
        let vars = cmr::tensor::BnVars { gamma: v, beta };
        let (y, _) = cmr::tensor::batch_norm_train(t, xv, vars, 1e-5)?;
        probe(t, y, 19)
    });
    check("batch_norm/infer", &x, |t, v| {
        let vars = bn.bind(t);
        let y = cmr::tensor::batch_norm_infer(t, v, vars, &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?;
        probe(t, y, 19)
    });
    let logits = rand(34, &[3, 5]);
    check("cross_entropy", &logits, |t, v| t.cross_entropy_loss(v, &[4, 0, 2]));
}
