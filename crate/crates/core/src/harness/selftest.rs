//! Invariant, gradient, oracle and wiring checks shared by the `selftest`
//! command and the acceptance suite.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::blocks::{
    block_b_forward, build_network, estimate_macs, network_forward, read_checkpoint, write_checkpoint, BlockParams,
    Network, NetworkConfig, Placement,
};
use crate::cme::{self, CmeParams};
use crate::error::Result;
use crate::sme::{self, SmeParams};
use crate::tensor::{grad_check, relative_error, rng, BnMode, Tape, Tensor, Var, GRAD_CHECK_STEP};
use crate::tim::{self, TimParams};

pub const INVARIANT_SEEDS: u64 = 100;
pub const ORACLE_SEEDS: u64 = 50;
pub const ROW_SUM_TOL: f64 = 1e-9;
pub const SCALE_TOL: f64 = 1e-9;
pub const PERMUTATION_TOL: f64 = 1e-9;
pub const ZERO_INIT_TOL: f64 = 1e-15;
pub const GRAD_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-10;
pub const NEUTRAL_TOL: f64 = 1e-9;
/// Largest clip used by the operator gradient checks.
pub const GRAD_INPUT: [usize; 5] = [1, 4, 8, 5, 5];
/// Clip for the whole-network check, which needs at least 8x8 frames.
pub const NETWORK_GRAD_INPUT: [usize; 5] = [1, 2, 8, 8, 8];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    /// Worst observed error (or count of violations for range checks).
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {:.3e} (tol {:.0e}, {:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance,
            self.seconds
        )
    }
}

/// Runs `f`, turning an error into a failed check.
fn check(name: &str, tolerance: f64, strict_zero: bool, f: impl FnOnce() -> Result<f64>) -> Check {
    let t0 = Instant::now();
    let (value, passed) = match f() {
        Ok(v) if strict_zero => (v, v == 0.0),
        Ok(v) => (v, v <= tolerance),
        Err(e) => {
            eprintln!("{name}: {e}");
            (f64::NAN, false)
        }
    };
    Check {
        name: name.into(),
        value,
        tolerance,
        passed,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// Input clip with per-seed shape variation.
fn random_clip(seed: u64, label: &str, shape: &[usize], std: f64) -> Tensor {
    rng::normal(&mut rng::stream(seed, label), shape, std)
}

/// CME parameters with every tensor random.
pub fn random_cme(channels: usize, r: usize, seed: u64) -> Result<CmeParams> {
    let mut p = CmeParams::new(channels, r, r, seed, "selftest.cme")?;
    let c1 = channels / r;
    p.w3 = rng::normal(&mut rng::stream(seed, "selftest.w3"), &[channels, c1], 0.7);
    p.b1 = rng::normal(&mut rng::stream(seed, "selftest.b1"), &[c1], 0.3);
    p.b2 = rng::normal(&mut rng::stream(seed, "selftest.b2"), &[c1], 0.3);
    p.b3 = rng::normal(&mut rng::stream(seed, "selftest.b3"), &[channels], 0.3);
    Ok(p)
}

/// SME parameters with a live normalisation branch.
pub fn random_sme(channels: usize, seed: u64) -> SmeParams {
    let mut p = SmeParams::new(channels, seed, "selftest.sme");
    p.bn.gamma = rng::uniform(&mut rng::stream(seed, "selftest.gamma"), &[channels], 0.5, 1.5);
    p.bn.beta = rng::normal(&mut rng::stream(seed, "selftest.beta"), &[channels], 0.2);
    p
}

/// Scalarises `y` with fixed random weights.
pub fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = rng::normal(&mut rng::stream(seed, "selftest.probe"), tape.shape(y), 1.0);
    tape.weighted_sum(y, &w)
}

fn shape_for(seed: u64) -> [usize; 5] {
    let mut r = rng::stream(seed, "selftest.shape");
    [r.gen_range(1..3), r.gen_range(2..7), 8, r.gen_range(2..5), r.gen_range(2..5)]
}

fn max_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.max_abs_diff(b)
}

/// Algebraic properties over [`INVARIANT_SEEDS`] random draws each.
pub fn invariant_checks() -> Vec<Check> {
    let seeds = 0..INVARIANT_SEEDS;
    vec![
        check("softmax rows sum to one", ROW_SUM_TOL, false, || {
            let mut worst = 0.0_f64;
            for s in seeds.clone() {
                let [n, t, c, _, _] = shape_for(s);
                let mut tape = Tape::new();
                // wide keys make the softmax sharp
                let k = tape.constant(random_clip(s, "selftest.keys", &[n, t, c / 2], 3.0));
                let dm = cme::discrepancy(&mut tape, k)?;
                for row in tape.value(dm.d_hat).data().chunks(t) {
                    worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
            Ok(worst)
        }),
        check("gates inside (0, 1)", 0.0, true, || {
            let mut outside = 0;
            for s in seeds.clone() {
                let shape = shape_for(s);
                let scale = 10f64.powf(rng::stream(s, "selftest.gscale").gen_range(-1.0..1.5));
                let p = random_cme(8, 4, s)?;
                let g = p.gates(&random_clip(s, "selftest.x", &shape, scale))?;
                outside += g.0.data().iter().filter(|&&a| !(a > 0.0 && a < 1.0)).count();
            }
            Ok(outside as f64)
        }),
        check("discrepancy is symmetric", 0.0, true, || {
            let mut worst = 0.0_f64;
            for s in seeds.clone() {
                let [n, t, c, _, _] = shape_for(s);
                let mut tape = Tape::new();
                let k = tape.constant(random_clip(s, "selftest.keys", &[n, t, c / 2], 1.0));
                let dm = cme::discrepancy(&mut tape, k)?;
                let d = tape.value(dm.d);
                for b in 0..n {
                    for i in 0..t {
                        for j in 0..t {
                            worst = worst.max((d.at(&[b, i, j]) - d.at(&[b, j, i])).abs());
                        }
                    }
                }
            }
            Ok(worst)
        }),
        check("cosine similarity within [-1, 1]", 0.0, true, || {
            let mut outside = 0;
            for s in seeds.clone() {
                let x = random_clip(s, "selftest.x", &shape_for(s), 1.0);
                let m = sme::similarity_map(&x)?;
                outside += m.0.data().iter().filter(|v| !(-1.0..=1.0).contains(*v)).count();
            }
            Ok(outside as f64)
        }),
        check("cosine ignores positive frame scaling", SCALE_TOL, false, || {
            let mut worst = 0.0_f64;
            for s in seeds.clone() {
                let shape = shape_for(s);
                let x = random_clip(s, "selftest.x", &shape, 1.0);
                let mut r = rng::stream(s, "selftest.alpha");
                let alphas: Vec<f64> = (0..shape[0] * shape[1]).map(|_| 10f64.powf(r.gen_range(-2.0..2.0))).collect();
                let per = x.len() / alphas.len();
                let mut y = x.clone();
                for (chunk, a) in y.data_mut().chunks_mut(per).zip(&alphas) {
                    chunk.iter_mut().for_each(|v| *v *= a);
                }
                worst = worst.max(max_diff(&sme::similarity_map(&x)?.0, &sme::similarity_map(&y)?.0)?);
            }
            Ok(worst)
        }),
        check("channel enhancement commutes with frame permutation", PERMUTATION_TOL, false, || {
            let mut worst = 0.0_f64;
            for s in seeds.clone() {
                let shape = shape_for(s);
                let x = random_clip(s, "selftest.x", &shape, 1.0);
                let mut perm: Vec<usize> = (0..shape[1]).collect();
                rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng::stream(s, "selftest.perm"));
                let p = random_cme(8, 4, s)?;
                let lhs = p.forward(&x.permute_frames(&perm)?)?;
                let rhs = p.forward(&x)?.permute_frames(&perm)?;
                worst = worst.max(max_diff(&lhs, &rhs)?);
            }
            Ok(worst)
        }),
        check("zero-initialised spatial enhancement is identity", ZERO_INIT_TOL, false, || {
            let mut worst = 0.0_f64;
            for s in seeds.clone() {
                let x = random_clip(s, "selftest.x", &shape_for(s), 1.0);
                let mut p = SmeParams::new(8, s, "selftest.sme");
                worst = worst.max(max_diff(&p.forward(&x)?, &x)?);
            }
            Ok(worst)
        }),
        check("static input passes spatial enhancement unchanged", 0.0, true, || {
            let mut worst = 0.0_f64;
            for s in seeds.clone() {
                let [n, t, c, h, w] = shape_for(s);
                let frame = random_clip(s, "selftest.frame", &[n, 1, c, h, w], 1.0);
                let x = Tensor::from_fn(&[n, t, c, h, w], |i| {
                    let (b, rest) = (i / (t * c * h * w), i % (c * h * w));
                    frame.data()[b * c * h * w + rest]
                });
                let mut p = random_sme(c, s);
                p.bn.beta = Tensor::zeros(&[c]);
                worst = worst.max(max_diff(&p.forward(&x)?, &x)?);
            }
            Ok(worst)
        }),
    ]
}

fn grad_case(name: &str, f: impl FnOnce() -> Result<f64>) -> Check {
    check(name, GRAD_TOL, false, f)
}

/// Result of [`network_grad_error`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkGradReport {
    pub worst: f64,
    pub checked: usize,
    /// Entries whose central difference crossed a ReLU kink.
    pub skipped: usize,
}

/// Worst relative error over every entry of every parameter and the input of
/// `net` in training mode, for a random linear probe of the logits. Entries
/// where the `+h` and `-h` evaluations switch some ReLU are skipped, since
/// central differences are meaningless across a kink.
pub fn network_grad_error(net: &Network, x: &Tensor, seed: u64) -> Result<NetworkGradReport> {
    let h = GRAD_CHECK_STEP;
    let w = rng::normal(
        &mut rng::stream(seed, "selftest.probe"),
        &[x.shape()[0], net.config.classes],
        1.0,
    );
    let eval = |n: &Network, x: &Tensor| -> Result<(Tape, Var, NetVarsHandle)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let mut n = n.clone();
        let vars = n.bind(&mut tape);
        let y = network_forward(&mut tape, xv, &mut n, &vars)?;
        let l = tape.weighted_sum(y, &w)?;
        Ok((tape, l, NetVarsHandle { x: xv, named: vars.named }))
    };
    let (tape, l, handles) = eval(net, x)?;
    let grads = tape.backward(l)?;
    let mut report = NetworkGradReport {
        worst: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut compare = |analytic: f64, plus: (Tape, Var, NetVarsHandle), minus: (Tape, Var, NetVarsHandle)| -> Result<()> {
        if plus.0.relu_pattern() != minus.0.relu_pattern() {
            report.skipped += 1;
            return Ok(());
        }
        let num = (plus.0.value(plus.1).item()? - minus.0.value(minus.1).item()?) / (2.0 * h);
        report.worst = report.worst.max(relative_error(analytic, num));
        report.checked += 1;
        Ok(())
    };
    let gx = grads.get_or_zeros(&tape, handles.x);
    for i in 0..x.len() {
        let (mut p, mut m) = (x.clone(), x.clone());
        p.data_mut()[i] += h;
        m.data_mut()[i] -= h;
        compare(gx.data()[i], eval(net, &p)?, eval(net, &m)?)?;
    }
    for (k, (_, v)) in handles.named.iter().enumerate() {
        let g = grads.get_or_zeros(&tape, *v);
        for i in 0..g.len() {
            let shifted = |d: f64| {
                let mut n = net.clone();
                n.params_mut()[k].1.data_mut()[i] += d;
                eval(&n, x)
            };
            compare(g.data()[i], shifted(h)?, shifted(-h)?)?;
        }
    }
    Ok(report)
}

struct NetVarsHandle {
    x: Var,
    named: Vec<(String, Var)>,
}

/// Small config used for the whole-network gradient check.
pub fn grad_check_config() -> NetworkConfig {
    NetworkConfig {
        stages: vec![(1, 8), (2, 16)],
        in_channels: NETWORK_GRAD_INPUT[2],
        classes: 2,
        r1: 4,
        r2: 4,
        frames: NETWORK_GRAD_INPUT[1],
        image_size: NETWORK_GRAD_INPUT[3],
        ..NetworkConfig::default()
    }
}

/// Randomises every parameter that starts at a constant so no gradient is
/// trivially zero.
pub fn liven(net: &mut Network, seed: u64) {
    for (name, t) in net.params_mut() {
        let shape = t.shape().to_vec();
        let mut r = rng::stream(seed, &format!("liven.{name}"));
        *t = if name.ends_with("gamma") {
            rng::uniform(&mut r, &shape, 0.5, 1.5)
        } else if name.ends_with("beta") || name.ends_with(".b3") || name == "head.b" {
            rng::normal(&mut r, &shape, 0.2)
        } else if name.ends_with(".wt") {
            t.zip_map(&rng::normal(&mut r, &shape, 0.2), |a, b| a + b).unwrap()
        } else if name == "head.w" {
            rng::normal(&mut r, &shape, 0.5)
        } else {
            t.clone()
        };
    }
}

/// Central-difference checks of every operator on clips no larger than
/// [`GRAD_INPUT`].
pub fn gradient_checks() -> Vec<Check> {
    let h = GRAD_CHECK_STEP;
    let c = GRAD_INPUT[2];
    let x = random_clip(1, "selftest.grad", &GRAD_INPUT, 1.0);
    vec![
        grad_case("cme_forward gradient", || {
            let p = random_cme(c, 4, 2)?;
            let mut worst = grad_check(
                |tape, xv| {
                    let v = p.bind(tape);
                    let y = cme::cme_forward(tape, xv, &v)?;
                    probe(tape, y, 3)
                },
                &x,
                h,
            )?;
            for k in 0..6 {
                let theta = p.tensors()[k].1.clone();
                worst = worst.max(grad_check(
                    |tape, tv| {
                        let xv = tape.constant(x.clone());
                        let mut v = p.bind(tape);
                        *[&mut v.w1, &mut v.b1, &mut v.w2, &mut v.b2, &mut v.w3, &mut v.b3][k] = tv;
                        let y = cme::cme_forward(tape, xv, &v)?;
                        probe(tape, y, 3)
                    },
                    &theta,
                    h,
                )?);
            }
            Ok(worst)
        }),
        grad_case("sme_forward gradient", || {
            let p = random_sme(c, 4);
            let mut worst = grad_check(
                |tape, xv| {
                    let mut p = p.clone();
                    let v = p.bind(tape);
                    let y = sme::sme_forward(tape, xv, &mut p, v)?;
                    probe(tape, y, 5)
                },
                &x,
                h,
            )?;
            for (k, theta) in [&p.wc, &p.bn.gamma, &p.bn.beta].into_iter().enumerate() {
                worst = worst.max(grad_check(
                    |tape, tv| {
                        let mut p = p.clone();
                        let xv = tape.constant(x.clone());
                        let mut v = p.bind(tape);
                        *[&mut v.wc, &mut v.bn.gamma, &mut v.bn.beta][k] = tv;
                        let y = sme::sme_forward(tape, xv, &mut p, v)?;
                        probe(tape, y, 5)
                    },
                    theta,
                    h,
                )?);
            }
            Ok(worst)
        }),
        grad_case("tim_forward gradient", || {
            let mut p = TimParams::identity(c);
            p.wt = rng::normal(&mut rng::stream(6, "selftest.wt"), p.wt.shape(), 1.0);
            let a = grad_check(
                |tape, xv| {
                    let k = p.bind(tape);
                    let y = tim::tim_forward(tape, xv, k)?;
                    probe(tape, y, 7)
                },
                &x,
                h,
            )?;
            let b = grad_check(
                |tape, kv| {
                    let xv = tape.constant(x.clone());
                    let y = tim::tim_forward(tape, xv, kv)?;
                    probe(tape, y, 7)
                },
                &p.wt,
                h,
            )?;
            Ok(a.max(b))
        }),
        grad_case("block_b_forward gradient", || {
            let cfg = NetworkConfig {
                r1: 4,
                r2: 4,
                ..grad_check_config()
            };
            let mut p = BlockParams::new(&cfg, 0, 0, (1, c, 2 * c), 8)?;
            if let Some(s) = p.sme.as_mut() {
                s.bn.gamma = rng::uniform(&mut rng::stream(9, "selftest.g"), &[2 * c], 0.5, 1.5);
            }
            if let Some(k) = p.cme.as_mut() {
                k.b3 = rng::normal(&mut rng::stream(9, "selftest.b3"), &[c], 0.3);
            }
            grad_check(
                |tape, xv| {
                    let mut p = p.clone();
                    let v = p.bind(tape);
                    let y = block_b_forward(tape, xv, &mut p, &v)?;
                    probe(tape, y, 10)
                },
                &x,
                h,
            )
        }),
        grad_case("full network gradient", || {
            let mut net = build_network(&grad_check_config(), 11)?;
            liven(&mut net, 11);
            let clip = rng::uniform(&mut rng::stream(12, "selftest.clip"), &NETWORK_GRAD_INPUT, 0.0, 1.0);
            let r = network_grad_error(&net, &clip, 13)?;
            // a handful of kinks is expected; many would mean the check is vacuous
            Ok(if r.skipped * 20 > r.checked { f64::INFINITY } else { r.worst })
        }),
    ]
}

/// Vectorised operators against the scalar-loop oracles.
pub fn oracle_checks() -> Vec<Check> {
    vec![
        check("cme_forward matches scalar oracle", ORACLE_TOL, false, || {
            let mut worst = 0.0_f64;
            for s in 0..ORACLE_SEEDS {
                let x = random_clip(s, "selftest.x", &shape_for(s), 1.0);
                let p = random_cme(8, [1, 2, 4, 8][s as usize % 4], s)?;
                worst = worst.max(max_diff(&p.forward(&x)?, &cme::cme_forward_naive(&x, &p)?)?);
            }
            Ok(worst)
        }),
        check("sme_forward matches scalar oracle", ORACLE_TOL, false, || {
            let mut worst = 0.0_f64;
            for s in 0..ORACLE_SEEDS {
                let x = random_clip(s, "selftest.x", &shape_for(s), 1.0);
                let mut p = random_sme(8, s);
                let naive = sme::sme_forward_naive(&x, &p)?;
                worst = worst.max(max_diff(&p.forward(&x)?, &naive)?);
                p.bn.mode = BnMode::Inference;
                let naive = sme::sme_forward_naive(&x, &p)?;
                worst = worst.max(max_diff(&p.forward(&x)?, &naive)?);
            }
            Ok(worst)
        }),
    ]
}

/// A network whose enhancement modules are forced neutral: gates saturated
/// at one, identity temporal kernels, zero-gamma spatial branches.
pub fn neutralised(cfg: &NetworkConfig, seed: u64) -> Result<(Network, Network)> {
    let mut full = build_network(cfg, seed)?;
    liven(&mut full, seed);
    for stage in &mut full.stages {
        for b in stage {
            if let Some(c) = b.cme.as_mut() {
                c.b3 = Tensor::full(c.b3.shape(), 60.0);
            }
            if let Some(t) = b.tim.as_mut() {
                *t = TimParams::identity(t.channels());
            }
            if let Some(s) = b.sme.as_mut() {
                s.bn.gamma = Tensor::zeros(s.bn.gamma.shape());
                s.bn.beta = Tensor::zeros(s.bn.beta.shape());
            }
        }
    }
    let mut plain = build_network(&cfg.plain(), seed)?;
    let shared: Vec<(String, Tensor)> = full.params().into_iter().map(|(n, t)| (n, t.clone())).collect();
    for (name, t) in plain.params_mut() {
        if let Some((_, v)) = shared.iter().find(|(n, _)| *n == name) {
            *t = v.clone();
        }
    }
    Ok((full, plain))
}

/// Largest logit difference between the neutralised network and its plain
/// control, in training mode and then in inference mode after a warm-up.
pub fn neutralisation_error(cfg: &NetworkConfig, seed: u64) -> Result<f64> {
    let (mut full, mut plain) = neutralised(cfg, seed)?;
    let x = rng::uniform(
        &mut rng::stream(seed, "selftest.neutral"),
        &[2, cfg.frames, cfg.in_channels, cfg.image_size, cfg.image_size],
        0.0,
        1.0,
    );
    full.set_mode(BnMode::Training);
    plain.set_mode(BnMode::Training);
    let mut worst = max_diff(&full.logits(&x)?, &plain.logits(&x)?)?;
    full.set_mode(BnMode::Inference);
    plain.set_mode(BnMode::Inference);
    worst = worst.max(max_diff(&full.logits(&x)?, &plain.logits(&x)?)?);
    Ok(worst)
}

fn wiring_checks() -> Vec<Check> {
    vec![
        check("neutralised network equals plain network", NEUTRAL_TOL, false, || {
            let cfg = NetworkConfig {
                frames: 4,
                image_size: 12,
                ..NetworkConfig::default()
            };
            neutralisation_error(&cfg, 21)
        }),
        check("module placement counts", 0.0, true, || {
            let mut bad = 0;
            for stages in [vec![(2, 16), (2, 32)], vec![(1, 8)], vec![(3, 8), (2, 16), (1, 16)]] {
                let cfg = NetworkConfig {
                    stages,
                    r1: 4,
                    r2: 4,
                    cme: Placement::All,
                    sme: Placement::First,
                    ..NetworkConfig::default()
                };
                let net = build_network(&cfg, 0)?;
                bad += usize::from(net.sme_count() != cfg.stages.len());
                bad += usize::from(net.cme_count() != cfg.block_count());
            }
            Ok(bad as f64)
        }),
        check("checkpoint round trip", 0.0, true, || {
            let mut net = build_network(&NetworkConfig::default(), 5)?;
            liven(&mut net, 5);
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &net)?;
            let back = read_checkpoint(&mut buf.as_slice())?;
            Ok(if back == net { 0.0 } else { 1.0 })
        }),
        check("reduction ratio lowers MACs", 0.0, true, || {
            let macs = |r| {
                estimate_macs(&NetworkConfig {
                    r1: r,
                    r2: r,
                    ..NetworkConfig::default()
                })
                .map(|m| m.total())
            };
            let (a, b, c) = (macs(1)?, macs(4)?, macs(8)?);
            Ok(if a > b && b > c { 0.0 } else { 1.0 })
        }),
    ]
}

/// Every check, in the order the `selftest` command prints them.
pub fn run_selftest() -> Vec<Check> {
    let mut all = invariant_checks();
    all.extend(gradient_checks());
    all.extend(oracle_checks());
    all.extend(wiring_checks());
    all
}
