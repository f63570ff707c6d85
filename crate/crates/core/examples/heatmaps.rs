//! Trains a small model, then writes top-10 / bottom-10 channel heatmaps and
//! SME weighting maps for a noise-free clip and reports how much of each
//! map's mass sits on the moving square.

use cmr::harness::viz::{heatmaps, mask_fractions, motion_masks, write_heatmaps};
use cmr::harness::{train, RunConfig};
use cmr::synthdata::{clip_from_indices, generate_video, uniform_sample_frames, Split};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> cmr::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 2;
    cfg.data.train_size = 64;
    cfg.data.val_size = 16;
    let mut net = train(&cfg, None)?.network;

    let mut clean = cfg.data.clone();
    clean.noise_std = 0.0;
    clean.distractors_max = 0;
    let video = generate_video(&clean, clean.index(Split::Val, 0));
    let idx = uniform_sample_frames(clean.clip_len, clean.frames)?;
    let set = heatmaps(&mut net, &clip_from_indices(&video, &idx))?;
    let dir = std::env::temp_dir().join("cmr_heatmaps_example");
    write_heatmaps(&set, &dir)?;
    let masks = motion_masks(&video, &idx, clean.square_size as f64, clean.image_size);
    let f = mask_fractions(&set, &masks)?;
    println!("wrote {} frames to {}", set.sme.len(), dir.display());
    println!("mass inside the dilated square: sme {:.3}, top {:.3}, bottom {:.3}", f.sme, f.top, f.bottom);
    Ok(())
}
