//! A short training run of the full +CME&SME network, writing metrics, the
//! config and a checkpoint to a temporary directory.
//!
//! `cargo run --release --example train_small -- [epochs] [train_size]`

use cmr::harness::{train_with, RunConfig, Variant};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> cmr::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("numeric argument"));
    let mut cfg = RunConfig::default();
    cfg.train.variant = Variant::CmeSme;
    cfg.train.epochs = args.next().unwrap_or(2);
    cfg.data.train_size = args.next().unwrap_or(64);
    cfg.data.val_size = 32;
    let out = std::env::temp_dir().join("cmr_train_example");
    let run = train_with(&cfg, Some(&out), |e| {
        println!(
            "epoch {}  lr {:.0e}  train loss {:.3}  val top1 {:.3}  ({:.1}s)",
            e.epoch, e.lr, e.train.loss, e.val.top1, e.seconds
        )
    })?;
    println!("final top1 {:.3} top5 {:.3}; outputs in {}", run.metrics.final_top1, run.metrics.final_top5, out.display());
    Ok(())
}
