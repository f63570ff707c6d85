//! Builds the tiny network for each ablation variant and prints parameter
//! and multiply-accumulate counts, per block and per operation.

use cmr::blocks::{build_network, estimate_macs, NetworkConfig};
use cmr::harness::Variant;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> cmr::Result<()> {
    let base = NetworkConfig::default();
    println!("{:<10} {:>8} {:>12} {:>5} {:>5}", "variant", "params", "MACs", "CME", "SME");
    for v in Variant::ABLATION {
        let cfg = v.apply(&base);
        let net = build_network(&cfg, 0)?;
        let macs = estimate_macs(&cfg)?;
        println!(
            "{:<10} {:>8} {:>12} {:>5} {:>5}",
            v.name(),
            net.param_count(),
            macs.total(),
            net.cme_count(),
            net.sme_count()
        );
    }
    let report = estimate_macs(&base)?;
    println!("\nper block:");
    for (scope, m) in report.per_block() {
        println!("  {scope:<10} {m:>10}");
    }
    println!("per operation:");
    for (op, m) in report.per_op() {
        println!("  {:<18} {m:>10}", format!("{op:?}"));
    }
    for r in [1, 4, 8] {
        let cfg = NetworkConfig { r1: r, r2: r, ..base.clone() };
        println!("r1 = r2 = {r}: {} MACs", estimate_macs(&cfg)?.total());
    }
    Ok(())
}
