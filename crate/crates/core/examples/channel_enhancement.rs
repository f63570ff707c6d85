//! Channel gates and the frame discrepancy matrix on a synthetic clip lifted
//! to 16 random feature channels.

use cmr::cme::{self, CmeParams};
use cmr::synthdata::{generate_clip, SynthConfig};
use cmr::tensor::{rng, Tape};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> cmr::Result<()> {
    let cfg = SynthConfig {
        noise_std: 0.0,
        ..SynthConfig::default()
    };
    let clip = generate_clip(&cfg, 3)?;
    // stand-in features: the frame seen through 16 random spatial gratings,
    // so a translated square changes the pooled descriptors
    let c = 16;
    let freq = rng::uniform(&mut rng::stream(0, "gratings"), &[c, 3], -0.4, 0.4);
    let [_, t, _, h, wd] = clip.clip.clip_dims()?;
    let plane = h * wd;
    let x = cmr::Tensor::from_fn(&[1, t, c, h, wd], |i| {
        let (f, ch, p) = (i / (c * plane), (i / plane) % c, i % plane);
        let (r, col) = ((p / wd) as f64, (p % wd) as f64);
        let k = &freq.data()[ch * 3..ch * 3 + 3];
        clip.clip.data()[f * plane + p] * (1.0 + (k[0] * r + k[1] * col + 10.0 * k[2]).sin())
    });

    let mut p = CmeParams::new(c, 8, 8, 1, "cme")?;
    p.w3 = rng::normal(&mut rng::stream(1, "w3"), p.w3.shape(), 0.5);

    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let vars = p.bind(&mut tape);
    let k = cme::key_descriptor(&mut tape, xv, &vars)?;
    let dm = cme::discrepancy(&mut tape, k)?;
    let (_, gates) = cme::cme_forward_with_gates(&mut tape, xv, &vars)?;

    println!("label {} ({})", clip.label, cfg.class_names()[clip.label]);
    println!("raw discrepancy between frames (x1000):");
    let d = tape.value(dm.d).map(|v| v * 1000.0);
    for i in 0..t {
        let row: Vec<String> = (0..t).map(|j| format!("{:7.3}", d.at(&[0, i, j]))).collect();
        println!("  {}", row.join(" "));
    }
    let row0: Vec<String> = (0..t).map(|j| format!("{:.4}", tape.value(dm.d_hat).at(&[0, 0, j]))).collect();
    println!("softmax weights of frame 0: {}", row0.join(" "));
    let g = tape.value(gates);
    println!("gates for frame 0: {:?}", &g.data()[..c].iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    Ok(())
}
