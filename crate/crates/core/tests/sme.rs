mod common;

use cmr::reference;
use cmr::sme::{self, sme_forward_naive, similarity_map, SmeParams};
use cmr::tensor::{grad_check, BnMode, Tape, Tensor, GRAD_CHECK_STEP};
use common::{probe, rand, random_sme};
use proptest::prelude::*;

fn cosine(x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let s = sme::pointwise_cosine(&mut tape, xv).unwrap();
    tape.value(s).clone()
}

/// Frame `t` of `x` replaced by `f(frame t-1)`.
fn with_frames(x: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
    let [_, t, c, h, w] = x.clip_dims().unwrap();
    let frame = c * h * w;
    let mut out = x.clone();
    for b in 0..x.shape()[0] {
        for ti in 1..t {
            for i in 0..frame {
                let prev = out.data()[(b * t + ti - 1) * frame + i];
                out.data_mut()[(b * t + ti) * frame + i] = f(ti, prev);
            }
        }
    }
    out
}

#[test]
fn cosine_examples() {
    let x = with_frames(&rand(1, &[1, 3, 4, 3, 3]), |_, v| 2.0 * v);
    assert!(cosine(&x).data().iter().all(|&s| (s - 1.0).abs() < 1e-8));

    // orthogonal: frame 0 uses channel 0, frame 1 channel 1
    let mut o = Tensor::zeros(&[1, 2, 2, 2, 2]);
    for p in 0..4 {
        o.set(&[0, 0, 0, p / 2, p % 2], 1.0 + p as f64);
        o.set(&[0, 1, 1, p / 2, p % 2], 3.0 - p as f64 * 0.5);
    }
    assert!(cosine(&o).data().iter().all(|&s| s == 0.0));

    let r = rand(2, &[1, 3, 4, 3, 3]);
    let want = reference::pointwise_cosine(&r).unwrap();
    assert!(cosine(&r).max_abs_diff(&want).unwrap() <= 1e-10);
}

#[test]
fn extension_copies_the_last_slice() {
    let mut tape = Tape::new();
    let one = tape.constant(rand(3, &[2, 1, 3, 3]));
    let e = sme::extend_similarity(&mut tape, one).unwrap();
    let v = tape.value(e);
    assert_eq!(v.shape(), &[2, 2, 3, 3]);
    for b in 0..2 {
        for p in 0..9 {
            assert_eq!(v.at(&[b, 0, p / 3, p % 3]), v.at(&[b, 1, p / 3, p % 3]));
        }
    }

    let s = rand(4, &[1, 7, 2, 3]);
    let sv = tape.constant(s.clone());
    let e = sme::extend_similarity(&mut tape, sv).unwrap();
    let v = tape.value(e);
    assert_eq!(v.shape(), &[1, 8, 2, 3]);
    assert_eq!(&v.data()[..s.len()], s.data());
    assert_eq!(&v.data()[7 * 6..], &s.data()[6 * 6..]);
}

#[test]
fn identical_frames_leave_the_input_unchanged() {
    let x = with_frames(&rand(5, &[2, 4, 6, 3, 3]), |_, v| v);
    let mut p = random_sme(6, 5);
    p.bn.beta = Tensor::zeros(&[6]);
    assert_eq!(p.forward(&x).unwrap(), x);
    assert_eq!(sme_forward_naive(&x, &p).unwrap(), x);
}

#[test]
fn zero_initialised_branch_is_identity() {
    for seed in 0..20 {
        let x = rand(seed, &[1, 4, 6, 4, 4]).map(|v| v * (1 + seed) as f64);
        let mut p = SmeParams::new(6, seed, "sme");
        assert!(p.forward(&x).unwrap().max_abs_diff(&x).unwrap() <= 1e-15);
    }
}

#[test]
fn single_frame_skips_the_branch() {
    let x = rand(6, &[2, 1, 4, 3, 3]);
    let mut p = random_sme(4, 6);
    assert_eq!(p.forward(&x).unwrap(), x);
    assert_eq!(sme_forward_naive(&x, &p).unwrap(), x);
}

#[test]
fn vectorized_matches_naive_over_fifty_seeds() {
    let mut worst = 0.0_f64;
    for seed in 0..50 {
        let x = rand(300 + seed, &[1, 4, 8, 5, 5]);
        let mut p = random_sme(8, seed);
        // training mode: batch statistics
        let naive = sme_forward_naive(&x, &p).unwrap();
        worst = worst.max(p.clone().forward(&x).unwrap().max_abs_diff(&naive).unwrap());
        // warm the running statistics, then compare in inference mode
        for _ in 0..3 {
            p.forward(&x).unwrap();
        }
        p.bn.mode = BnMode::Inference;
        p.bn.gamma = Tensor::ones(&[8]);
        let naive = sme_forward_naive(&x, &p).unwrap();
        worst = worst.max(p.forward(&x).unwrap().max_abs_diff(&naive).unwrap());
    }
    assert!(worst <= 1e-10, "{worst}");
}

#[test]
fn inference_needs_warm_statistics() {
    let mut p = random_sme(4, 7);
    p.bn.mode = BnMode::Inference;
    let x = rand(7, &[1, 3, 4, 2, 2]);
    assert!(matches!(p.forward(&x), Err(cmr::Error::UninitializedStats)));
    assert!(matches!(sme_forward_naive(&x, &p), Err(cmr::Error::UninitializedStats)));
}

#[test]
fn similarity_changes_only_inside_a_perturbed_patch() {
    let x = rand(8, &[1, 4, 5, 6, 6]);
    let mut y = x.clone();
    // perturb frame 2 inside rows 1..3, cols 2..5
    for c in 0..5 {
        for r in 1..3 {
            for q in 2..5 {
                let v = y.at(&[0, 2, c, r, q]);
                y.set(&[0, 2, c, r, q], v + 0.7 * (c as f64 - 2.0));
            }
        }
    }
    let a = similarity_map(&x).unwrap().weighting();
    let b = similarity_map(&y).unwrap().weighting();
    let mut changed_inside = false;
    for t in 0..4 {
        for r in 0..6 {
            for q in 0..6 {
                let d = (a.at(&[0, t, r, q]) - b.at(&[0, t, r, q])).abs();
                let inside = (1..3).contains(&r) && (2..5).contains(&q);
                if inside {
                    changed_inside |= d > 1e-6;
                } else {
                    assert_eq!(d, 0.0, "t={t} r={r} q={q}");
                }
            }
        }
    }
    assert!(changed_inside);
}

#[test]
fn gradients_pass_grad_check() {
    let p = random_sme(8, 9);
    let x = rand(10, &[1, 4, 8, 5, 5]);
    let h = GRAD_CHECK_STEP;
    let err = grad_check(
        |t, xv| {
            let mut p = p.clone();
            let vars = p.bind(t);
            let v = sme::sme_forward(t, xv, &mut p, vars)?;
            probe(t, v, 1)
        },
        &x,
        h,
    )
    .unwrap();
    assert!(err < 1e-4, "x: {err}");

    let params = [("wc", p.wc.clone()), ("gamma", p.bn.gamma.clone()), ("beta", p.bn.beta.clone())];
    for (which, (name, theta)) in params.iter().enumerate() {
        let err = grad_check(
            |t, v| {
                let mut p = p.clone();
                let xv = t.constant(x.clone());
                let mut vars = p.bind(t);
                match which {
                    0 => vars.wc = v,
                    1 => vars.bn.gamma = v,
                    _ => vars.bn.beta = v,
                }
                let out = sme::sme_forward(t, xv, &mut p, vars)?;
                probe(t, out, 2)
            },
            theta,
            h,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn similarity_stays_bounded(seed in any::<u64>(), t in 2usize..6) {
        let s = similarity_map(&rand(seed, &[2, t, 3, 3, 3])).unwrap();
        prop_assert!(s.within_bounds(1e-9));
        for b in 0..2 {
            for p in 0..9 {
                prop_assert_eq!(s.0.at(&[b, t - 1, p / 3, p % 3]), s.0.at(&[b, t - 2, p / 3, p % 3]));
            }
        }
    }

    #[test]
    fn similarity_ignores_positive_frame_scaling(seed in any::<u64>()) {
        let x = rand(seed, &[1, 4, 5, 3, 3]);
        let alpha = rng_scales(seed, 4);
        let frame = 5 * 9;
        let scaled = Tensor::from_fn(x.shape(), |i| x.data()[i] * alpha[i / frame]);
        let a = similarity_map(&x).unwrap().0;
        let b = similarity_map(&scaled).unwrap().0;
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-9);
    }
}

fn rng_scales(seed: u64, n: usize) -> Vec<f64> {
    use rand::Rng;
    let mut r = cmr::tensor::rng::stream(seed, "alpha");
    (0..n).map(|_| 10f64.powf(r.gen_range(-2.0..2.0))).collect()
}
