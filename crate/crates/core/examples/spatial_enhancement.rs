//! Point-to-point cosine similarity between adjacent frames. Static pixels
//! read 1, the moving square's edges fall below it.

use cmr::sme::similarity_map;
use cmr::synthdata::{generate_clip, SynthConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> cmr::Result<()> {
    let cfg = SynthConfig {
        noise_std: 0.0,
        ..SynthConfig::default()
    };
    let clip = generate_clip(&cfg, 0)?.clip;
    let s = similarity_map(&clip)?;
    let w = s.weighting();
    let h = cfg.image_size;
    println!("1 - s for the first frame pair ('#' above 0.5, '+' above 0):");
    for r in 0..h {
        let line: String = (0..h)
            .map(|c| match w.at(&[0, 0, r, c]) {
                v if v > 0.5 => '#',
                v if v > 0.0 => '+',
                _ => '.',
            })
            .collect();
        println!("{line}");
    }
    println!("within [-1, 1]: {}", s.within_bounds(1e-12));
    Ok(())
}
