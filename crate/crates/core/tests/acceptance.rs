//! End-to-end acceptance: one PASS/FAIL line per criterion.
//!
//! The learning criteria train 12 models plus a short sweep, so the whole
//! target takes the better part of an hour on one core.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use cmr::blocks::{estimate_macs, load_checkpoint, NetworkConfig};
use cmr::harness::selftest::{gradient_checks, invariant_checks, neutralisation_error, oracle_checks, Check};
use cmr::harness::viz::{heatmaps, mask_fractions, mass_fraction, motion_masks};
use cmr::harness::{
    benchmark, run_ratio_sweep, sweep_csv, train_with, AblationRow, AblationTable, BenchConfig, RunConfig, SweepRow,
    Variant, CHECKPOINT_FILE, METRICS_FILE,
};
use cmr::synthdata::{clip_from_indices, generate_video, uniform_sample_frames, Split, SynthConfig};
use cmr::tim::TimInit;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const INVARIANT_BUDGET_S: f64 = 60.0;
const GRADIENT_BUDGET_S: f64 = 300.0;
const NEUTRAL_TOL: f64 = 1e-9;
const SEEDS: [u64; 3] = [0, 1, 2];
const RUN_BUDGET_S: f64 = 600.0;
const GAIN_OVER_BASELINE: f64 = 0.05;
const SINGLE_MODULE_SLACK: f64 = 0.01;
const COMBINED_SLACK: f64 = 0.01;
const ABSOLUTE_TOP1: f64 = 0.80;
const SWEEP_RATIOS: [usize; 3] = [1, 4, 8];
const BENCH_BUDGET_S: f64 = 120.0;
const SME_MASS_IN_MASK: f64 = 0.60;

/// Training setup shared by the learning, sweep and visualisation criteria.
fn learning_run() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.network.tim_init = TimInit::Shift;
    cfg.train.lr = 0.1;
    cfg.train.batch_size = 8;
    cfg.train.epochs = 10;
    cfg.train.milestones = Some(vec![7, 9]);
    cfg.data.train_size = 384;
    cfg.data.val_size = 128;
    // distractors as bright as the target, so appearance alone cannot find it
    cfg.data.distractor_min = 1.0;
    cfg.data.distractor_max = 1.0;
    cfg
}

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: usize, passed: bool, text: &str) {
        if !passed {
            self.failed += 1;
        }
        println!("criterion {id}: {} {text}", if passed { "PASS" } else { "FAIL" });
    }
}

fn suite(report: &mut Report, id: usize, name: &str, checks: Vec<Check>, budget: f64) {
    let seconds: f64 = checks.iter().map(|c| c.seconds).sum();
    for c in checks.iter().filter(|c| !c.passed) {
        eprintln!("  {c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    let ok = failed == 0 && seconds < budget;
    let worst = checks.iter().map(|c| c.value).fold(0.0, f64::max);
    report.line(
        id,
        ok,
        &format!("{name}: {} checks, {failed} failed, worst value {worst:.2e}, {seconds:.1}s (budget {budget}s)", checks.len()),
    );
}

struct Trained {
    top1: f64,
    top5: f64,
    seconds: f64,
}

fn train_cell(cfg: &RunConfig, out: Option<&Path>, tag: &str) -> cmr::Result<Trained> {
    let t0 = Instant::now();
    let run = train_with(cfg, out, |e| {
        eprintln!("  {tag} epoch {} train loss {:.3} val top1 {:.3} ({:.1}s)", e.epoch, e.train.loss, e.val.top1, e.seconds)
    })?;
    Ok(Trained {
        top1: run.metrics.final_top1,
        top5: run.metrics.final_top5,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

fn learning(report: &mut Report) -> cmr::Result<()> {
    let base = learning_run();
    let mut rows = Vec::new();
    let mut slowest: f64 = 0.0;
    for variant in Variant::ABLATION {
        for seed in SEEDS {
            let mut cfg = base.clone();
            cfg.train.variant = variant;
            cfg.train.seed = seed;
            let t = train_cell(&cfg, None, &format!("{variant} seed {seed}"))?;
            slowest = slowest.max(t.seconds);
            rows.push(AblationRow {
                variant,
                seed,
                top1: t.top1,
                top5: t.top5,
            });
        }
    }
    let table = AblationTable::from_rows(rows);
    print!("{}", table.to_csv());
    let mean = |v| table.mean_top1(v).unwrap_or(f64::NAN);
    let (b, c, s, cs) = (mean(Variant::Baseline), mean(Variant::Cme), mean(Variant::Sme), mean(Variant::CmeSme));
    let conditions = [
        cs >= b + GAIN_OVER_BASELINE,
        c >= b - SINGLE_MODULE_SLACK,
        s >= b - SINGLE_MODULE_SLACK,
        cs >= c.max(s) - COMBINED_SLACK,
        cs >= ABSOLUTE_TOP1,
        slowest < RUN_BUDGET_S,
    ];
    report.line(
        5,
        conditions.iter().all(|&x| x),
        &format!(
            "mean top1 baseline {b:.3}, +CME {c:.3}, +SME {s:.3}, +CME&SME {cs:.3}; \
             gain {:+.3} (need >= {GAIN_OVER_BASELINE}), abs >= {ABSOLUTE_TOP1}: {}, slowest run {slowest:.0}s; conditions {conditions:?}",
            cs - b,
            cs >= ABSOLUTE_TOP1
        ),
    );

    // the r = 8 cell is the +CME&SME configuration already trained above
    assert_eq!((base.network.r1, base.network.r2), (8, 8));
    let mut sweep = run_ratio_sweep(&base, &SWEEP_RATIOS[..2], &SEEDS[..1], |r, s, e| {
        eprintln!("  r={r} seed {s} epoch {} val top1 {:.3}", e.epoch, e.val.top1)
    })?;
    let cs0 = table.rows.iter().find(|r| r.variant == Variant::CmeSme && r.seed == 0).unwrap();
    let macs8 = estimate_macs(&base.network_config())?.total();
    sweep.push(SweepRow {
        r1: base.network.r1,
        r2: base.network.r2,
        top1: cs0.top1,
        top5: cs0.top5,
        macs: macs8,
    });
    print!("{}", sweep_csv(&sweep));
    let decreasing = sweep.windows(2).all(|w| w[0].macs > w[1].macs);
    report.line(
        6,
        sweep.len() == SWEEP_RATIOS.len() && decreasing,
        &format!(
            "r in {SWEEP_RATIOS:?}: top1 {:?}, MACs {:?}, strictly decreasing: {decreasing}",
            sweep.iter().map(|r| (r.top1 * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            sweep.iter().map(|r| r.macs).collect::<Vec<_>>()
        ),
    );
    Ok(())
}

fn bench(report: &mut Report) -> cmr::Result<()> {
    let cfg = BenchConfig::default();
    let t0 = Instant::now();
    let r = benchmark(&cfg)?;
    let seconds = t0.elapsed().as_secs_f64();
    let complete = r.is_complete(&cfg.frames, &cfg.batches);
    let mut increasing = true;
    let mut shown = Vec::new();
    for &b in &cfg.batches {
        let times: Vec<f64> = cfg
            .frames
            .iter()
            .map(|&t| r.get("cme.discrepancy", t, b).map_or(f64::NAN, |e| e.median_ms))
            .collect();
        increasing &= times.windows(2).all(|w| w[0] < w[1]);
        shown.push(format!("batch {b}: {:?} us", times.iter().map(|v| (v * 1e5).round() / 1e2).collect::<Vec<_>>()));
    }
    report.line(
        7,
        complete && increasing && seconds < BENCH_BUDGET_S,
        &format!(
            "{} entries, complete: {complete}; discrepancy over T {:?} {}; strictly increasing: {increasing}; {seconds:.1}s (budget {BENCH_BUDGET_S}s)",
            r.entries.len(),
            cfg.frames,
            shown.join(", ")
        ),
    );
    Ok(())
}

/// Heatmap model: identity temporal kernels, default distractors.
fn heatmap_run() -> RunConfig {
    let mut cfg = learning_run();
    cfg.network.tim_init = TimInit::Identity;
    cfg.data.distractor_min = SynthConfig::default().distractor_min;
    cfg.data.distractor_max = SynthConfig::default().distractor_max;
    cfg.train.variant = Variant::CmeSme;
    cfg.train.seed = 0;
    cfg
}

fn visualisation(report: &mut Report, work: &Path) -> cmr::Result<()> {
    let dir = work.join("heatmap_model");
    let cfg = heatmap_run();
    train_cell(&cfg, Some(&dir), "heatmap model")?;
    let mut net = load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    let mut clean = cfg.data.clone();
    clean.noise_std = 0.0;
    let idx = uniform_sample_frames(clean.clip_len, clean.frames)?;
    let (mut sme, mut top, mut bottom) = (Vec::new(), Vec::new(), Vec::new());
    let mut per_frame = vec![0.0; clean.frames];
    for i in 0..clean.classes {
        let video = generate_video(&clean, clean.index(Split::Val, i));
        let set = heatmaps(&mut net, &clip_from_indices(&video, &idx))?;
        let masks = motion_masks(&video, &idx, clean.square_size as f64, clean.image_size);
        let f = mask_fractions(&set, &masks)?;
        for (t, acc) in per_frame.iter_mut().enumerate() {
            *acc += mass_fraction(&set.sme[t..=t], &masks[t..=t])? / clean.classes as f64;
        }
        sme.push(f.sme);
        top.push(f.top);
        bottom.push(f.bottom);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (s, t, b) = (mean(&sme), mean(&top), mean(&bottom));
    report.line(
        8,
        s >= SME_MASS_IN_MASK && t > b,
        &format!(
            "over {} noise-free clips (one per class): SME mass in mask {s:.3} (need >= {SME_MASS_IN_MASK}, per frame {:?}), \
             top-10 {t:.3} vs bottom-10 {b:.3}",
            sme.len(),
            per_frame.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    );
    Ok(())
}

fn strip_seconds(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(h, _)| h))
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism(report: &mut Report, work: &Path) -> cmr::Result<()> {
    let mut cfg = learning_run();
    cfg.train.epochs = 2;
    cfg.train.milestones = Some(vec![1]);
    cfg.data.train_size = 64;
    cfg.data.val_size = 32;
    let cfg_path = work.join("determinism.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)?)?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = work.join(format!("determinism_{run}"));
        for args in [
            vec!["train", "--variant", "+CME&SME", "--seed", "1"],
            vec!["eval", "--clips", "2"],
        ] {
            let status = Command::new(env!("CARGO_BIN_EXE_cmr"))
                .args(&args)
                .arg("--config")
                .arg(&cfg_path)
                .arg("--out")
                .arg(&out)
                .output()?;
            if !status.status.success() {
                eprintln!("{}", String::from_utf8_lossy(&status.stderr));
            }
        }
        let metrics = std::fs::read_to_string(out.join(METRICS_FILE)).unwrap_or_default();
        let eval = std::fs::read_to_string(out.join("eval_clips2.csv")).unwrap_or_default();
        outputs.push((metrics, eval));
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    let same_metrics = !a.0.is_empty() && strip_seconds(&a.0) == strip_seconds(&b.0);
    let same_eval = !a.1.is_empty() && a.1 == b.1;
    report.line(
        9,
        same_metrics && same_eval,
        &format!(
            "two CLI train + eval runs: metrics.csv equal without the seconds column: {same_metrics}; eval CSV byte-equal: {same_eval}"
        ),
    );
    Ok(())
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut report = Report { failed: 0 };
    let work = tempfile::tempdir().expect("scratch directory");

    suite(&mut report, 1, "invariants", invariant_checks(), INVARIANT_BUDGET_S);
    suite(&mut report, 2, "gradient checks", gradient_checks(), GRADIENT_BUDGET_S);
    suite(&mut report, 3, "oracle equivalence", oracle_checks(), f64::INFINITY);

    let neutral = neutralisation_error(&NetworkConfig::default(), 4);
    match neutral {
        Ok(e) => report.line(4, e <= NEUTRAL_TOL, &format!("neutralised vs plain logits differ by {e:.2e} (tol {NEUTRAL_TOL:.0e})")),
        Err(e) => report.line(4, false, &format!("error: {e}")),
    }

    for (id, result) in [
        (5, learning(&mut report)),
        (7, bench(&mut report)),
        (8, visualisation(&mut report, work.path())),
        (9, determinism(&mut report, work.path())),
    ] {
        if let Err(e) = result {
            report.line(id, false, &format!("error: {e}"));
            if id == 5 {
                report.line(6, false, "not run");
            }
        }
    }
    println!("{} of 9 criteria failed, {:.0}s", report.failed, started.elapsed().as_secs_f64());
    // failed criteria only fail the target on request, so that `cargo test`
    // still runs every other test binary
    if report.failed == 0 || std::env::var_os("CMR_ACCEPTANCE_STRICT").is_none() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
