//! Latency and throughput of every module and the whole network at
//! T = 4, 8, 16 and batch 1 and 8.

use cmr::harness::{benchmark, BenchConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> cmr::Result<()> {
    let cfg = BenchConfig::default();
    let started = std::time::Instant::now();
    let report = benchmark(&cfg)?;
    print!("{}", report.to_csv());
    for t in &cfg.frames {
        let e = report.get("cme.discrepancy", *t, 1).unwrap();
        println!("discrepancy stage at T={t}: {:.2} us per call (IQR {:.2})", e.median_ms * 1e3, e.iqr_ms * 1e3);
    }
    println!("took {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
