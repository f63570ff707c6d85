//! Generates the moving-square dataset, prints one clip as ASCII and dumps
//! the validation split to disk.

use cmr::synthdata::{dump_split, generate_video, load_split, uniform_sample_frames, Split, SynthConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> cmr::Result<()> {
    let cfg = SynthConfig {
        train_size: 64,
        val_size: 32,
        ..SynthConfig::default()
    };
    let v = generate_video(&cfg, 5);
    let idx = uniform_sample_frames(cfg.clip_len, cfg.frames)?;
    println!("video 5: {} moving at {:?}, frames {idx:?}", cfg.class_names()[v.label], cfg.direction(v.label));
    let size = cfg.image_size;
    for &f in idx.iter().take(2) {
        println!("frame {f}, square at ({:.1}, {:.1}):", v.positions[f].0, v.positions[f].1);
        for r in (0..size).step_by(2) {
            let line: String = (0..size)
                .map(|c| match v.frames.at(&[f, 0, r, c]) {
                    p if p > 0.8 => '#',
                    p if p > 0.25 => '+',
                    _ => '.',
                })
                .collect();
            println!("  {line}");
        }
    }

    let dir = std::env::temp_dir().join("cmr_synth_example");
    dump_split(&cfg, Split::Val, &dir)?;
    let (_, clips, labels) = load_split(&dir, Split::Val)?;
    println!("dumped {:?} clips to {} with labels {:?}...", clips.shape(), dir.display(), &labels[..8]);
    Ok(())
}
