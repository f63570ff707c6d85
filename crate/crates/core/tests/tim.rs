mod common;

use cmr::reference;
use cmr::tensor::{grad_check, Tensor, GRAD_CHECK_STEP};
use cmr::tim::{tim_forward, TimInit, TimParams};
use common::{probe, rand};

#[test]
fn identity_kernel_is_exact() {
    let x = rand(1, &[2, 5, 3, 2, 2]);
    assert_eq!(TimParams::identity(3).forward(&x).unwrap(), x);
}

#[test]
fn difference_kernel_on_static_input() {
    let x = Tensor::from_fn(&[1, 5, 2, 2, 2], |i| 1.0 + (i % 8) as f64);
    let p = TimParams {
        wt: Tensor::new(&[2, 3], vec![-1.0, 1.0, 0.0, -1.0, 1.0, 0.0]).unwrap(),
    };
    let y = p.forward(&x).unwrap();
    let frame = 8;
    // first frame sees zero padding on the left: a plain copy
    assert_eq!(&y.data()[..frame], &x.data()[..frame]);
    assert!(y.data()[frame..].iter().all(|&v| v == 0.0));
}

#[test]
fn shift_init_moves_two_folds_in_opposite_directions() {
    let (c, f) = (16, 4);
    let x = rand(4, &[1, f, c, 1, 1]);
    let y = TimParams::with_init(c, TimInit::Shift).forward(&x).unwrap();
    let at = |v: &Tensor, t: usize, ch: usize| v.data()[t * c + ch];
    for t in 0..f {
        for ch in 0..c {
            let want = match ch {
                0..=1 if t > 0 => at(&x, t - 1, ch),
                2..=3 if t + 1 < f => at(&x, t + 1, ch),
                0..=3 => 0.0,
                _ => at(&x, t, ch),
            };
            assert_eq!(at(&y, t, ch), want, "t {t} channel {ch}");
        }
    }
    assert_eq!(TimParams::with_init(c, TimInit::Identity), TimParams::identity(c));
}

#[test]
fn matches_loop_oracle() {
    let x = rand(2, &[1, 5, 3, 2, 2]);
    let p = TimParams { wt: rand(3, &[3, 3]) };
    let want = reference::temporal_conv(&x, &p.wt).unwrap();
    assert!(p.forward(&x).unwrap().max_abs_diff(&want).unwrap() <= 1e-12);
}

#[test]
fn interior_outputs_follow_a_time_shift() {
    let x = rand(4, &[1, 7, 3, 2, 2]);
    let p = TimParams { wt: rand(5, &[3, 3]) };
    let frame = 12;
    // shifted[t] = x[t - 1]
    let shifted = Tensor::from_fn(x.shape(), |i| if i < frame { 0.0 } else { x.data()[i - frame] });
    let y = p.forward(&x).unwrap();
    let ys = p.forward(&shifted).unwrap();
    for t in 2..6 {
        for i in 0..frame {
            let d = ys.data()[t * frame + i] - y.data()[(t - 1) * frame + i];
            assert!(d.abs() < 1e-12);
        }
    }
}

#[test]
fn rejects_channel_mismatch_and_even_kernels() {
    let x = rand(6, &[1, 3, 4, 2, 2]);
    assert!(TimParams::identity(3).forward(&x).is_err());
    assert!(TimParams::identity_with_size(4, 2).validate().is_err());
}

#[test]
fn gradients_pass_grad_check() {
    let x = rand(7, &[1, 4, 8, 5, 5]);
    let wt = rand(8, &[8, 3]);
    let err = grad_check(
        |t, xv| {
            let k = t.leaf(wt.clone());
            let y = tim_forward(t, xv, k)?;
            probe(t, y, 1)
        },
        &x,
        GRAD_CHECK_STEP,
    )
    .unwrap();
    assert!(err < 1e-4, "x: {err}");
    let err = grad_check(
        |t, k| {
            let xv = t.constant(x.clone());
            let y = tim_forward(t, xv, k)?;
            probe(t, y, 2)
        },
        &wt,
        GRAD_CHECK_STEP,
    )
    .unwrap();
    assert!(err < 1e-4, "wt: {err}");
}
