//! Latency and throughput of isolated modules and the whole network.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::blocks::{block_forward, build_network, network_forward, BlockParams, NetworkConfig, Placement};
use crate::cme::{self, CmeParams};
use crate::error::{Error, Result};
use crate::sme::{self, SmeParams};
use crate::tensor::{rng, BnMode, Tape, Tensor};
use crate::tim::{self, TimParams};

pub const BENCH_HEADER: &str = "module,T,batch,median_ms,iqr_ms,throughput_cps";
pub const MIN_WARMUP: usize = 3;
pub const MIN_REPETITIONS: usize = 5;
/// Calls per timing of the discrepancy stage, which is otherwise too short
/// to measure. Its entries are reported per call.
pub const DISCREPANCY_INNER: usize = 2000;

pub const MODULES: [&str; 7] = ["cme", "cme.discrepancy", "sme", "tim", "block_a", "block_b", "network"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchEntry {
    pub module: String,
    pub frames: usize,
    pub batch: usize,
    /// One wall-clock reading per repetition, in milliseconds.
    pub timings_ms: Vec<f64>,
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// Clips per second at the median.
    pub throughput_cps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub warmup: usize,
    pub repetitions: usize,
    pub entries: Vec<BenchEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchConfig {
    pub network: NetworkConfig,
    pub frames: Vec<usize>,
    pub batches: Vec<usize>,
    pub warmup: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            frames: vec![4, 8, 16],
            batches: vec![1, 8],
            warmup: MIN_WARMUP,
            repetitions: MIN_REPETITIONS,
            seed: 0,
        }
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl BenchEntry {
    pub fn from_timings(module: &str, frames: usize, batch: usize, timings_ms: Vec<f64>) -> Self {
        let mut s = timings_ms.clone();
        s.sort_by(f64::total_cmp);
        let median_ms = quantile(&s, 0.5);
        Self {
            module: module.into(),
            frames,
            batch,
            median_ms,
            iqr_ms: quantile(&s, 0.75) - quantile(&s, 0.25),
            min_ms: s[0],
            max_ms: s[s.len() - 1],
            throughput_cps: batch as f64 / (median_ms.max(1e-9) / 1e3),
            timings_ms,
        }
    }
}

impl BenchReport {
    pub fn get(&self, module: &str, frames: usize, batch: usize) -> Option<&BenchEntry> {
        self.entries
            .iter()
            .find(|e| e.module == module && e.frames == frames && e.batch == batch)
    }

    /// Every module has an entry for every `(T, batch)` pair.
    pub fn is_complete(&self, frames: &[usize], batches: &[usize]) -> bool {
        MODULES.iter().all(|m| {
            frames
                .iter()
                .all(|&t| batches.iter().all(|&b| self.get(m, t, b).is_some_and(|e| e.timings_ms.len() == self.repetitions)))
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{BENCH_HEADER}\n");
        for e in &self.entries {
            writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.3}",
                e.module, e.frames, e.batch, e.median_ms, e.iqr_ms, e.throughput_cps
            )
            .unwrap();
        }
        s
    }
}

fn time_it(warmup: usize, reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    for _ in 0..warmup {
        f()?;
    }
    (0..reps)
        .map(|_| {
            let t0 = Instant::now();
            f()?;
            Ok(t0.elapsed().as_secs_f64() * 1e3)
        })
        .collect()
}

/// Times every module for every `(T, batch)` pair in `cfg`.
pub fn benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.warmup < MIN_WARMUP || cfg.repetitions < MIN_REPETITIONS {
        return Err(Error::Config(format!(
            "benchmarks need at least {MIN_WARMUP} warmups and {MIN_REPETITIONS} repetitions"
        )));
    }
    if cfg.frames.is_empty() || cfg.batches.iter().any(|&b| b == 0) {
        return Err(Error::Config("benchmark needs frame counts and positive batches".into()));
    }
    let net_cfg = &cfg.network;
    net_cfg.validate()?;
    let c = net_cfg.stem_width();
    let size = net_cfg.image_size;
    let cme_p = CmeParams::new(c, net_cfg.r1, net_cfg.r2, cfg.seed, "bench.cme")?;
    let mut sme_p = SmeParams::new(c, cfg.seed, "bench.sme");
    sme_p.bn.gamma = Tensor::ones(&[c]);
    let tim_p = TimParams::identity(c);
    let geo = (1, c, c);
    let block_cfg = |sme: Placement| NetworkConfig {
        sme,
        cme: Placement::All,
        tim: true,
        ..net_cfg.clone()
    };
    // block 1 of stage 0 is A under the First placement, block 0 is B
    let mut block_a = BlockParams::new(&block_cfg(Placement::None), 0, 1, geo, cfg.seed)?;
    let mut block_b = BlockParams::new(&block_cfg(Placement::All), 0, 0, geo, cfg.seed)?;
    let mut net = build_network(net_cfg, cfg.seed)?;
    net.set_mode(BnMode::Training);

    let (warm, reps) = (cfg.warmup, cfg.repetitions);
    let mut entries = Vec::new();
    for &t in &cfg.frames {
        for &b in &cfg.batches {
            let x = rng::normal(
                &mut rng::stream_at(cfg.seed, "bench.input", &[t as u64, b as u64]),
                &[b, t, c, size, size],
                1.0,
            );
            let clips = rng::uniform(
                &mut rng::stream_at(cfg.seed, "bench.clips", &[t as u64, b as u64]),
                &[b, t, net_cfg.in_channels, size, size],
                0.0,
                1.0,
            );
            let keys = rng::normal(
                &mut rng::stream_at(cfg.seed, "bench.keys", &[t as u64, b as u64]),
                &[b, t, c / net_cfg.r2],
                1.0,
            );
            let mut record = |name: &str, timings: Vec<f64>| entries.push(BenchEntry::from_timings(name, t, b, timings));

            record(
                "cme",
                time_it(warm, reps, || {
                    let mut tape = Tape::new();
                    let xv = tape.constant(x.clone());
                    let v = cme_p.bind(&mut tape);
                    cme::cme_forward(&mut tape, xv, &v).map(drop)
                })?,
            );
            let per_call = time_it(warm, reps, || {
                for _ in 0..DISCREPANCY_INNER {
                    let mut tape = Tape::new();
                    let k = tape.constant(keys.clone());
                    cme::discrepancy(&mut tape, k)?;
                }
                Ok(())
            })?;
            record(
                "cme.discrepancy",
                per_call.into_iter().map(|ms| ms / DISCREPANCY_INNER as f64).collect(),
            );
            record(
                "sme",
                time_it(warm, reps, || {
                    let mut tape = Tape::new();
                    let xv = tape.constant(x.clone());
                    let v = sme_p.bind(&mut tape);
                    sme::sme_forward(&mut tape, xv, &mut sme_p, v).map(drop)
                })?,
            );
            record(
                "tim",
                time_it(warm, reps, || {
                    let mut tape = Tape::new();
                    let xv = tape.constant(x.clone());
                    let k = tim_p.bind(&mut tape);
                    tim::tim_forward(&mut tape, xv, k).map(drop)
                })?,
            );
            for (name, p) in [("block_a", &mut block_a), ("block_b", &mut block_b)] {
                record(
                    name,
                    time_it(warm, reps, || {
                        let mut tape = Tape::new();
                        let xv = tape.constant(x.clone());
                        let v = p.bind(&mut tape);
                        block_forward(&mut tape, xv, p, &v).map(drop)
                    })?,
                );
            }
            record(
                "network",
                time_it(warm, reps, || {
                    let mut tape = Tape::new();
                    let xv = tape.constant(clips.clone());
                    let v = net.bind(&mut tape);
                    network_forward(&mut tape, xv, &mut net, &v).map(drop)
                })?,
            );
        }
    }
    Ok(BenchReport {
        warmup: warm,
        repetitions: reps,
        entries,
    })
}
