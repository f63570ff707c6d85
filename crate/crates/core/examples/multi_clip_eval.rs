//! Trains briefly, then scores the validation split with 1, 2 and 4 clips
//! per video, averaging softmax scores before ranking.

use cmr::harness::{eval_csv, evaluate, train, RunConfig};
use cmr::synthdata::Split;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> cmr::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 2;
    cfg.data.train_size = 64;
    cfg.data.val_size = 32;
    let mut net = train(&cfg, None)?.network;
    for clips in [1, 2, 4] {
        let m = evaluate(&mut net, &cfg.data, Split::Val, clips)?;
        print!("{}", eval_csv(clips, &m).lines().nth(1).map(|l| format!("{l}\n")).unwrap_or_default());
    }
    Ok(())
}
