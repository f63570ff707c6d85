//! Per-channel temporal convolution: identity, shift and difference kernels
//! on a short ramp.

use cmr::tim::TimParams;
use cmr::Tensor;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> cmr::Result<()> {
    // [N=1, T=5, C=3, H=1, W=1] with x[t, c] = t + 1
    let x = Tensor::from_fn(&[1, 5, 3, 1, 1], |i| (i / 3 + 1) as f64);
    let mut p = TimParams::identity(3);
    p.wt = Tensor::new(&[3, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, -1.0, 1.0, 0.0])?;
    let y = p.forward(&x)?;
    for (c, name) in ["identity [0,1,0]", "previous frame [1,0,0]", "backward difference [-1,1,0]"].iter().enumerate() {
        let series: Vec<f64> = (0..5).map(|t| y.at(&[0, t, c, 0, 0])).collect();
        println!("{name:>30}: {series:?}");
    }
    let shift = TimParams::shift(16);
    println!("shift initialisation for 16 channels: {:?}", shift.wt.data().chunks(3).take(5).collect::<Vec<_>>());
    Ok(())
}
