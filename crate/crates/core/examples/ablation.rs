//! The variant matrix (baseline, +CME, +SME, +CME&SME) on a reduced task,
//! followed by a reduction-ratio sweep. Intended to show the table format;
//! the runs are far too short for meaningful accuracy.

use cmr::harness::{run_ablation, run_ratio_sweep, sweep_csv, RunConfig, Variant};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> cmr::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 1;
    cfg.data.train_size = 32;
    cfg.data.val_size = 16;
    let table = run_ablation(&cfg, &Variant::ABLATION, &[0, 1], |v, s, e| {
        eprintln!("{v} seed {s}: val top1 {:.3}", e.val.top1)
    })?;
    print!("{}", table.to_csv());
    let sweep = run_ratio_sweep(&cfg, &[1, 4, 8], &[0], |_, _, _| {})?;
    print!("{}", sweep_csv(&sweep));
    Ok(())
}
