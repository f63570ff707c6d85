//! The invariant, gradient, oracle and wiring checks behind `cmr selftest`.

use cmr::harness::run_selftest;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    let checks = run_selftest();
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    std::process::exit(if failed == 0 { 0 } else { 1 });
}
